"""Voxel and lesion-wise segmentation metrics.

All metrics take aligned binary masks (``np.ndarray`` or ``SegmentationMask``).
Lesions are connected components of the foreground.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy import ndimage

from .volume_io import DatasetManifest, SegmentationMask, load_mask

log = logging.getLogger(__name__)

Connectivity = Literal[6, 18, 26]
Matching = Literal["any_overlap", "one_to_one"]
_RANK = {6: 1, 18: 2, 26: 3}

REPORT_COLUMNS = ("case_id", "dice", "lesion_f1", "avd_ml", "lesion_count_diff")


class MissingPredictionError(RuntimeError):
    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__(f"{len(missing)} case(s) without prediction: {', '.join(missing)}")


@dataclass
class LabeledComponents:
    component_map: np.ndarray
    n: int
    voxel_counts: np.ndarray
    connectivity: int


def _arr(m) -> np.ndarray:
    a = m.labels if isinstance(m, SegmentationMask) else np.asarray(m)
    return a > 0


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction grid {p.shape} does not match ground truth grid {g.shape}")
    if isinstance(pred, SegmentationMask) and isinstance(gt, SegmentationMask):
        if not (np.allclose(pred.spacing, gt.spacing, atol=1e-4) and np.allclose(pred.origin, gt.origin, atol=1e-3)):
            raise ValueError("prediction and ground truth geometries differ")
    return p, g


def structure(connectivity: int) -> np.ndarray:
    if connectivity not in _RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, _RANK[connectivity])


def connected_components(mask, connectivity: Connectivity = 26) -> LabeledComponents:
    """Label foreground components; ids follow first appearance in C-order raster scan."""
    fg = _arr(mask)
    cmap, n = ndimage.label(fg, structure=structure(connectivity))
    counts = np.bincount(cmap.ravel(), minlength=n + 1)[1:]
    return LabeledComponents(cmap.astype(np.int32), int(n), counts, connectivity)


def dice_score(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both are empty."""
    p, g = _pair(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def lesion_counts(pred, gt, connectivity: Connectivity = 26, matching: Matching = "any_overlap") -> tuple[int, int, int]:
    """(TP, FP, FN) at lesion level.

    ``any_overlap``: a GT lesion is detected if it touches any predicted voxel; a
    predicted lesion is false positive if it touches no GT voxel.
    ``one_to_one``: GT/predicted lesion pairs are matched greedily by overlap size,
    each lesion used at most once.
    """
    p, g = _pair(pred, gt)
    pc = connected_components(p, connectivity)
    gc = connected_components(g, connectivity)
    if matching == "any_overlap":
        tp = len(np.unique(gc.component_map[p & g]))
        fp = pc.n - len(np.unique(pc.component_map[p & g]))
        return tp, fp, gc.n - tp
    if matching != "one_to_one":
        raise ValueError(f"unknown matching mode {matching!r}")
    both = p & g
    if not both.any():
        return 0, pc.n, gc.n
    pairs = np.stack([gc.component_map[both], pc.component_map[both]], axis=1)
    uniq, overlap = np.unique(pairs, axis=0, return_counts=True)
    order = sorted(range(len(overlap)), key=lambda i: (-overlap[i], uniq[i][0], uniq[i][1]))
    used_g, used_p = set(), set()
    for i in order:
        gi, pi = int(uniq[i][0]), int(uniq[i][1])
        if gi not in used_g and pi not in used_p:
            used_g.add(gi)
            used_p.add(pi)
    tp = len(used_g)
    return tp, pc.n - tp, gc.n - tp


def lesion_f1(pred, gt, connectivity: Connectivity = 26, matching: Matching = "any_overlap") -> float:
    tp, fp, fn = lesion_counts(pred, gt, connectivity, matching)
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def abs_volume_difference(pred, gt, spacing=None) -> float:
    """|vol(P) - vol(G)| in millilitres."""
    p, g = _pair(pred, gt)
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, SegmentationMask) else (1.0, 1.0, 1.0)
    voxel_mm3 = float(np.prod(np.asarray(spacing, dtype=np.float64)))
    return abs(int(p.sum()) - int(g.sum())) * voxel_mm3 / 1000.0


def lesion_count_difference(pred, gt, connectivity: Connectivity = 26) -> int:
    p, g = _pair(pred, gt)
    return abs(connected_components(p, connectivity).n - connected_components(g, connectivity).n)


# --------------------------------------------------------------------------
# reports


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    lesion_f1: float
    avd_ml: float
    lesion_count_diff: int


@dataclass
class MetricsReport:
    rows: list[CaseMetrics] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    connectivity: int = 26
    matching: str = "any_overlap"

    def means(self) -> dict[str, float]:
        if not self.rows:
            return {k: math.nan for k in REPORT_COLUMNS[1:]}
        return {k: float(np.mean([getattr(r, k) for r in self.rows])) for k in REPORT_COLUMNS[1:]}

    def summary_line(self) -> str:
        m = self.means()
        return f"{m['dice']:.3f} {m['lesion_f1']:.3f} {m['avd_ml']:.3f} {m['lesion_count_diff']:.4g}"

    def write(self, out_dir: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        table = out_dir / f"{stem}.csv"
        with open(table, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r.case_id, repr(r.dice), repr(r.lesion_f1), repr(r.avd_ml), r.lesion_count_diff])
        summary = out_dir / f"{stem}.json"
        doc = {
            "n_cases": len(self.rows),
            "connectivity": self.connectivity,
            "matching": self.matching,
            "mean": self.means(),
            "missing": self.missing,
            "cases": [asdict(r) for r in self.rows],
        }
        summary.write_text(json.dumps(doc, indent=2) + "\n")
        return table, summary


def evaluate_case(case_id: str, pred: SegmentationMask, gt: SegmentationMask,
                  connectivity: Connectivity = 26, matching: Matching = "any_overlap") -> CaseMetrics:
    return CaseMetrics(
        case_id=case_id,
        dice=dice_score(pred, gt),
        lesion_f1=lesion_f1(pred, gt, connectivity, matching),
        avd_ml=abs_volume_difference(pred, gt, gt.spacing),
        lesion_count_diff=lesion_count_difference(pred, gt, connectivity),
    )


def prediction_path(pred_dir: str | Path, case_id: str) -> Path:
    return Path(pred_dir) / f"{case_id}.nii.gz"


def evaluate_cases(
    pred_dir: str | Path,
    manifest: DatasetManifest,
    connectivity: Connectivity = 26,
    matching: Matching = "any_overlap",
    allow_missing: bool = False,
) -> MetricsReport:
    """Score ``<pred_dir>/<case_id>.nii.gz`` against every labeled case, in native space."""
    report = MetricsReport(connectivity=connectivity, matching=matching)
    for case in sorted(manifest.labeled_cases(), key=lambda c: c.case_id):
        path = prediction_path(pred_dir, case.case_id)
        if not path.exists():
            report.missing.append(case.case_id)
            continue
        gt = load_mask(case.label)
        pred = load_mask(path)
        report.rows.append(evaluate_case(case.case_id, pred, gt, connectivity, matching))
    if report.missing:
        if not allow_missing:
            raise MissingPredictionError(report.missing)
        log.warning("missing predictions for %s", report.missing)
    return report
