"""Command line entry point: ``strokeseg split | train | infer | evaluate | synth``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, PipelineConfig, load_config, write_resolved
from .volume_io import DatasetManifest, ManifestError, VolumeError, load_manifest, save_manifest

log = logging.getLogger("strokeseg")


def _manifest(args, cfg: PipelineConfig | None = None) -> DatasetManifest:
    path = args.manifest or (cfg.paths.manifest if cfg else None)
    if not path:
        raise ConfigError("no manifest given (use --manifest or paths.manifest in the config)")
    return load_manifest(path)


def _triple(text: str) -> tuple[float, float, float]:
    parts = [float(v) for v in text.replace("x", ",").split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 comma-separated values, got {text!r}")
    return tuple(parts)


# --------------------------------------------------------------------------
# commands


def cmd_split(args) -> int:
    from .training import make_folds

    m = load_manifest(args.manifest)
    out = make_folds(m, args.k, args.seed)
    save_manifest(out, args.out or args.manifest)
    sizes = out.fold_sizes()
    print("fold sizes: " + " ".join(f"{k}:{v}" for k, v in sorted(sizes.items())))
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_crossval, plot_history
    from .training import TrainingError, crossval_table, run_crossval, train_fold, write_crossval_summary

    cfg = load_config(args.config)
    manifest = _manifest(args, cfg)
    for case in manifest.labeled_cases():
        try:
            case.check_paths()
        except FileNotFoundError as exc:
            raise TrainingError(str(exc)) from exc
    if args.fold is None and not args.all_folds:
        raise ConfigError("choose --fold K or --all-folds")
    tcfg = cfg.train
    if args.checkpoint_dir:
        tcfg = tcfg.model_copy(update={"checkpoint_dir": args.checkpoint_dir})
        cfg = cfg.model_copy(update={"train": tcfg})
    out_root = Path(tcfg.checkpoint_dir)
    write_resolved(cfg, out_root)

    common = dict(window=cfg.window, overlap=cfg.inference.overlap, resume=not args.no_resume)
    if args.all_folds:
        results = run_crossval(manifest, tcfg, cfg.network, repeats=args.repeats, **common)
    else:
        results = [train_fold(manifest, args.fold, tcfg, cfg.network, repeat=args.repeat, **common)]

    for r in results:
        if not args.no_figures:
            plot_history(r.history, r.latest_path.parent / "history.png", f"run {r.repeat} fold {r.fold_index}")
        print(f"run {r.repeat} fold {r.fold_index}: best val Dice {r.best_val_dice:.4f} -> {r.checkpoint_path}")
    if args.all_folds:
        mean = write_crossval_summary(results, out_root / "crossval_summary.csv")
        header, rows, _ = crossval_table(results)
        print("\t".join(header))
        for row in rows:
            print("\t".join(f"{v:.4f}" for v in row))
        print(f"mean best val Dice over {len(results)} models: {mean:.4f}")
        if not args.no_figures:
            plot_crossval(header, rows, out_root / "crossval_summary.png")
    return 0


def cmd_infer(args) -> int:
    import numpy as np

    from .inference import (
        EnsembleSpec,
        binarize,
        check_ensemble,
        ensemble_predict,
        load_ensemble,
        restore_native,
        write_prediction,
        write_probability,
    )
    from .metrics import prediction_path
    from .plotting import plot_overlay
    from .preprocessing import preprocess_case
    from .segresnet import build, parameter_count
    from .training import default_device

    cfg = load_config(args.config)
    manifest = _manifest(args, cfg)
    spec = EnsembleSpec(args.checkpoints, cfg.network)
    check_ensemble(spec)
    device = default_device()
    out_dir = Path(args.out_dir)
    write_resolved(cfg, out_dir)

    # Keep all members resident only when that stays small.
    nets = None
    if len(spec.checkpoint_paths) * parameter_count(build(cfg.network)) * 4 < 1e9:
        nets = load_ensemble(spec, device)

    save_probs = args.save_probs or cfg.inference.save_probabilities
    failed = []
    for case in manifest.cases:
        try:
            img, _, native = preprocess_case(case, cfg.train.target_spacing, cfg.train.norm_region, load_label=False)
            pm = ensemble_predict(spec, img, cfg.window, cfg.inference.overlap, device=device, nets=nets)
            mask = restore_native(binarize(pm), native)
            path = write_prediction(mask, native, prediction_path(out_dir, case.case_id))
            if save_probs:
                write_probability(pm, out_dir / f"{case.case_id}_prob.nii.gz")
            if args.figures:
                plot_overlay(img.data[0], None, binarize(pm).labels, out_dir / "figures" / f"{case.case_id}.png")
            print(f"{case.case_id}: {int(np.count_nonzero(mask.labels))} lesion voxels -> {path}")
        except Exception as exc:
            if not args.keep_going:
                raise RuntimeError(f"case {case.case_id}: {exc}") from exc
            log.error("case %s failed: %s", case.case_id, exc)
            failed.append(case.case_id)
    if failed:
        print(f"failed cases: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_cases
    from .plotting import plot_metrics

    manifest = load_manifest(args.manifest)
    report = evaluate_cases(args.pred_dir, manifest, args.connectivity, args.matching, args.allow_missing)
    out_dir = Path(args.out or args.pred_dir)
    table, summary = report.write(out_dir)
    if not args.no_figures and report.rows:
        plot_metrics(report, out_dir / "metrics.png")
    print(f"{'dice':>5} {'f1':>5} {'avd_ml':>6} {'lcd'}")
    print(report.summary_line())
    print(f"report: {table}, {summary}")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import make_sphere_dataset

    out = Path(args.out_dir)
    m = make_sphere_dataset(out, args.n_cases, tuple(int(v) for v in args.shape), args.spacing, args.seed,
                            n_lesions=args.lesions)
    save_manifest(m, out / "manifest.json")
    print(f"wrote {len(m.cases)} cases and {out / 'manifest.json'}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="strokeseg", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", help="assign labeled cases to k random folds")
    s.add_argument("--manifest", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output manifest (default: overwrite input)")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train one fold or the full cross-validation")
    s.add_argument("--config")
    s.add_argument("--manifest")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--fold", type=int)
    g.add_argument("--all-folds", action="store_true")
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--repeat", type=int, default=0, help="run index for a single --fold")
    s.add_argument("--checkpoint-dir")
    s.add_argument("--no-resume", action="store_true")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="ensemble prediction in native DWI space")
    s.add_argument("--config")
    s.add_argument("--checkpoints", nargs="+", required=True)
    s.add_argument("--manifest")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--keep-going", action="store_true")
    s.add_argument("--save-probs", action="store_true")
    s.add_argument("--figures", action="store_true", help="write an overlay PNG per case")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="Dice, lesion F1, volume and lesion-count differences")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=26)
    s.add_argument("--matching", choices=("any_overlap", "one_to_one"), default="any_overlap")
    s.add_argument("--allow-missing", action="store_true")
    s.add_argument("--out", help="report directory (default: --pred-dir)")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth", help="write a synthetic sphere-lesion dataset")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n-cases", type=int, default=8)
    s.add_argument("--shape", type=_triple, default=(64, 64, 64))
    s.add_argument("--spacing", type=_triple, default=(1.0, 1.0, 1.0))
    s.add_argument("--lesions", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    from .metrics import MissingPredictionError
    from .segresnet import WeightsError
    from .training import TrainingError

    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, WeightsError, MissingPredictionError, VolumeError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
