"""Fold assignment, cosine LR schedule, per-fold training and cross-validation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from .augmentation import AugmentConfig, augment, sample_rng
from .inference import binarize, sliding_window_predict
from .loss import LossConfig, deep_supervision_loss
from .metrics import dice_score
from .preprocessing import CropSpec, MultiChannelVolume, crop_offsets, pad_array, preprocess_case
from .segresnet import NetworkConfig, SegResNetDS, build, load_state, read_archive, weights_archive
from .volume_io import CaseRecord, DatasetManifest, SegmentationMask

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_dice")


class TrainingError(RuntimeError):
    pass


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(1000, ge=1)
    lr0: float = Field(2e-4, gt=0)
    weight_decay: float = Field(1e-5, ge=0)
    batch_size_global: int = Field(8, ge=1)
    folds: int = Field(5, ge=2)
    seed: int = 0
    val_interval: int = Field(5, ge=1)
    crops_per_case: int = Field(1, ge=1)
    checkpoint_dir: str = "runs"
    pretrained_weights: Optional[str] = None
    target_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    norm_region: Literal["all", "nonzero"] = "all"
    augment_stage: Literal["post_crop", "pre_crop"] = "post_crop"
    loss: LossConfig = LossConfig()
    augment: AugmentConfig = AugmentConfig()
    crop: CropSpec = CropSpec()


@dataclass
class HistoryRow:
    epoch: int
    lr: float
    train_loss: float
    val_dice: float | None = None


@dataclass
class FoldResult:
    fold_index: int
    repeat: int
    best_val_dice: float
    checkpoint_path: Path
    latest_path: Path
    history: list[HistoryRow] = field(default_factory=list)


def config_hash(*configs: BaseModel) -> str:
    doc = json.dumps([c.model_dump(mode="json") for c in configs], sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def derived_seed(*parts: int) -> int:
    """Deterministic 32-bit seed for a (seed, purpose, ...) tuple."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def default_device() -> torch.device:
    env = os.environ.get("STROKESEG_DEVICE")
    if env:
        return torch.device(env)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


# --------------------------------------------------------------------------
# folds and schedule


def make_folds(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> DatasetManifest:
    """Random partition of labeled cases into ``k`` folds whose sizes differ by at most one."""
    labeled = [c.case_id for c in manifest.labeled_cases()]
    if k < 2:
        raise ValueError("need at least two folds")
    if len(labeled) < k:
        raise ValueError(f"cannot split {len(labeled)} labeled cases into {k} folds")
    order = np.random.default_rng(seed).permutation(len(labeled))
    fold_of = {labeled[j]: int(pos % k) for pos, j in enumerate(order)}
    fold_of = {cid: fold_of[cid] for cid in labeled}
    out = DatasetManifest(list(manifest.cases), fold_of)
    out.validate(num_folds=k)
    return out


def split_cases(manifest: DatasetManifest, fold: int) -> tuple[list[CaseRecord], list[CaseRecord]]:
    train = [c for c in manifest.labeled_cases() if manifest.fold_of.get(c.case_id) != fold]
    val = [c for c in manifest.labeled_cases() if manifest.fold_of.get(c.case_id) == fold]
    overlap = {c.case_id for c in train} & {c.case_id for c in val}
    assert not overlap, f"cases in both train and validation split: {overlap}"
    return train, val


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """``lr0 * (1 + cos(pi * epoch / epochs)) / 2``; defined for 0 <= epoch <= epochs."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


# --------------------------------------------------------------------------
# data


@dataclass
class PreparedCase:
    case_id: str
    image: MultiChannelVolume
    mask: SegmentationMask


def prepare_cases(records: list[CaseRecord], cfg: TrainConfig, cache: dict | None = None) -> list[PreparedCase]:
    out = []
    for rec in records:
        if rec.label is None:
            raise TrainingError(f"case {rec.case_id} has no label and cannot be used for training")
        if cache is not None and rec.case_id in cache:
            out.append(cache[rec.case_id])
            continue
        img, mask, _ = preprocess_case(rec, cfg.target_spacing, cfg.norm_region)
        pc = PreparedCase(rec.case_id, img, mask)
        if cache is not None:
            cache[rec.case_id] = pc
        out.append(pc)
    return out


def training_sample(case: PreparedCase, cfg: TrainConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One padded, cropped and augmented (image, mask) pair."""
    img, _ = pad_array(case.image.data, cfg.crop.size, 0.0)
    mask, _ = pad_array(case.mask.labels, cfg.crop.size, 0)
    if cfg.augment_stage == "pre_crop":
        img, mask = augment(img, mask, cfg.augment, rng)
    off = crop_offsets(mask.shape, cfg.crop.size, rng, mask > 0, cfg.crop.foreground_bias)
    sl = tuple(slice(o, o + s) for o, s in zip(off, cfg.crop.size))
    img, mask = img[(slice(None),) + sl], mask[sl]
    if cfg.augment_stage == "post_crop":
        img, mask = augment(img, mask, cfg.augment, rng)
    return np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(mask)


# --------------------------------------------------------------------------
# checkpoints and logs


def save_checkpoint(path: Path, net, optimizer, epoch: int, val_dice: float, history, snapshot: dict, chash: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save(
        {
            "weights": weights_archive(net),
            "optimizer": optimizer.state_dict(),
            "epoch": int(epoch),
            "val_dice": float(val_dice),
            "history": [vars(h) for h in history],
            "config": snapshot,
            "config_hash": chash,
        },
        tmp,
    )
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> dict:
    return torch.load(Path(path), map_location="cpu", weights_only=True)


def write_history(path: Path, history: list[HistoryRow]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for h in history:
            w.writerow([h.epoch, repr(h.lr), repr(h.train_loss), "" if h.val_dice is None else repr(h.val_dice)])


def read_history(path: str | Path) -> list[HistoryRow]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append(
                HistoryRow(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]),
                           float(r["val_dice"]) if r["val_dice"] else None)
            )
    return rows


# --------------------------------------------------------------------------
# training


def validate(net: SegResNetDS, cases: list[PreparedCase], window, overlap: float, device) -> float:
    """Mean whole-volume Dice of argmax predictions in the working grid."""
    net.eval()
    scores = []
    for case in cases:
        pm = sliding_window_predict(net, case.image, window, overlap, device=device)
        scores.append(dice_score(binarize(pm).labels, case.mask.labels))
    return float(np.mean(scores))


def fold_dir(cfg: TrainConfig, fold: int, repeat: int = 0) -> Path:
    return Path(cfg.checkpoint_dir) / f"run{repeat}" / f"fold{fold}"


def train_fold(
    manifest: DatasetManifest,
    fold: int,
    cfg: TrainConfig,
    net_cfg: NetworkConfig | None = None,
    *,
    repeat: int = 0,
    window=None,
    overlap: float = 0.5,
    resume: bool = True,
    stop_after: int | None = None,
    device=None,
    cache: dict | None = None,
) -> FoldResult:
    """Train on every labeled case outside ``fold`` and validate on the cases inside it.

    Writes ``latest.pt``, ``best.pt`` and ``history.csv`` under
    ``<checkpoint_dir>/run<repeat>/fold<fold>``. ``stop_after`` ends the run
    early after that many total epochs (the schedule still spans ``cfg.epochs``).
    """
    net_cfg = net_cfg or NetworkConfig()
    device = torch.device(device) if device is not None else default_device()
    if not 0 <= fold < cfg.folds:
        raise ValueError(f"fold {fold} outside [0, {cfg.folds})")
    if manifest.num_folds != cfg.folds:
        raise ValueError(f"manifest has {manifest.num_folds} folds, config expects {cfg.folds}")
    window = tuple(window or cfg.crop.size)
    for name, size in (("crop", cfg.crop.size), ("window", window)):
        if any(s % net_cfg.divisor for s in size):
            raise ValueError(f"{name} size {size} must be divisible by {net_cfg.divisor}")

    train_recs, val_recs = split_cases(manifest, fold)
    if not train_recs or not val_recs:
        raise TrainingError(f"fold {fold}: empty split ({len(train_recs)} train, {len(val_recs)} val)")
    train_cases = prepare_cases(train_recs, cfg, cache)
    val_cases = prepare_cases(val_recs, cfg, cache)

    out_dir = fold_dir(cfg, fold, repeat)
    latest, best = out_dir / "latest.pt", out_dir / "best.pt"
    snapshot = {"train": cfg.model_dump(mode="json"), "network": net_cfg.model_dump(mode="json"),
                "fold": fold, "repeat": repeat}
    chash = config_hash(cfg, net_cfg)

    torch.manual_seed(derived_seed(cfg.seed, fold, 1))
    net = build(net_cfg)
    if cfg.pretrained_weights:
        skipped = load_state(net, read_archive(cfg.pretrained_weights), strict=False)
        log.info("pretrained weights loaded, %d parameters re-initialized", len(skipped))
    net.to(device)
    optimizer = torch.optim.AdamW(net.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay)

    history: list[HistoryRow] = []
    start = 0
    best_dice = -1.0
    last_val = 0.0
    if resume and latest.exists():
        ckpt = load_checkpoint(latest)
        if ckpt.get("config_hash") != chash:
            raise TrainingError(f"{latest} was written with a different configuration")
        load_state(net, ckpt["weights"], strict=True)
        optimizer.load_state_dict(ckpt["optimizer"])
        history = [HistoryRow(**h) for h in ckpt["history"]]
        start = int(ckpt["epoch"])
        vals = [h.val_dice for h in history if h.val_dice is not None]
        best_dice = max(vals) if vals else -1.0
        last_val = vals[-1] if vals else 0.0
        log.info("fold %d: resumed at epoch %d", fold, start)

    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    accum = cfg.batch_size_global
    for epoch in range(start, end):
        t0 = time.time()
        lr = cosine_lr(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        net.train()
        order = sample_rng(cfg.seed, fold, epoch).permutation(len(train_cases))
        samples = [(int(i), c) for i in order for c in range(cfg.crops_per_case)]
        losses = []
        optimizer.zero_grad(set_to_none=True)
        for start_idx in range(0, len(samples), accum):
            group_samples = samples[start_idx:start_idx + accum]
            for i, c in group_samples:
                case = train_cases[i]
                img, mask = training_sample(case, cfg, sample_rng(cfg.seed, fold, epoch, i, c))
                x = torch.from_numpy(img)[None].to(device)
                y = torch.from_numpy(mask.astype(np.int64))[None].to(device)
                loss = deep_supervision_loss(net(x), y, cfg.loss)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch + 1}, case {case.case_id}")
                (loss / len(group_samples)).backward()
                losses.append(loss.item())
            optimizer.step()
            optimizer.zero_grad(set_to_none=True)

        row = HistoryRow(epoch + 1, lr, float(np.mean(losses)))
        if (epoch + 1) % cfg.val_interval == 0 or epoch + 1 == cfg.epochs:
            row.val_dice = validate(net, val_cases, window, overlap, device)
            last_val = row.val_dice
        history.append(row)

        save_checkpoint(latest, net, optimizer, epoch + 1, last_val, history, snapshot, chash)
        if row.val_dice is not None and row.val_dice > best_dice:
            best_dice = row.val_dice
            save_checkpoint(best, net, optimizer, epoch + 1, best_dice, history, snapshot, chash)
        write_history(out_dir / "history.csv", history)
        log.info("fold %d epoch %d/%d lr %.3g loss %.4f val %s (%.1fs)", fold, epoch + 1, cfg.epochs, lr,
                 row.train_loss, "-" if row.val_dice is None else f"{row.val_dice:.4f}", time.time() - t0)

    vals = [h.val_dice for h in history if h.val_dice is not None]
    return FoldResult(fold, repeat, max(vals) if vals else float("nan"), best, latest, history)


def run_crossval(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    net_cfg: NetworkConfig | None = None,
    repeats: int = 1,
    **kwargs,
) -> list[FoldResult]:
    """``repeats`` x ``folds`` models; repeat ``r`` uses seed ``cfg.seed ^ r``."""
    results = []
    cache: dict = kwargs.pop("cache", {})
    for r in range(repeats):
        rcfg = cfg.model_copy(update={"seed": cfg.seed ^ r})
        for fold in range(cfg.folds):
            results.append(train_fold(manifest, fold, rcfg, net_cfg, repeat=r, cache=cache, **kwargs))
    return results


def crossval_table(results: list[FoldResult]) -> tuple[list[str], list[list[float]], float]:
    """Rows of per-fold best Dice (one row per repeat) with a trailing row average."""
    folds = sorted({r.fold_index for r in results})
    repeats = sorted({r.repeat for r in results})
    header = [f"Fold {f + 1}" for f in folds] + ["Average"]
    rows = []
    for rep in repeats:
        by_fold = {r.fold_index: r.best_val_dice for r in results if r.repeat == rep}
        vals = [by_fold.get(f, float("nan")) for f in folds]
        rows.append(vals + [float(np.mean(vals))])
    overall = float(np.mean([r.best_val_dice for r in results]))
    return header, rows, overall


def write_crossval_summary(results: list[FoldResult], path: str | Path) -> float:
    header, rows, overall = crossval_table(results)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run"] + header)
        for rep, row in enumerate(rows):
            w.writerow([rep] + [f"{v:.4f}" for v in row])
        w.writerow(["mean"] + [""] * (len(header) - 1) + [f"{overall:.4f}"])
    return overall
