"""Synthetic DWI/ADC cases with spherical lesions, for smoke tests and demos."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .volume_io import CaseRecord, DatasetManifest, ImageVolume, Modality, SegmentationMask, save_volume


def sphere_case(
    rng: np.random.Generator,
    shape=(64, 64, 64),
    n_lesions: int = 2,
    radius_range=(3.0, 7.0),
    noise: float = 0.05,
):
    """Return (dwi, adc, label) arrays for one case.

    A brain-like ellipsoid fills most of the field of view; lesions are bright
    on DWI and dark on ADC, as in acute infarcts.
    """
    shape = tuple(int(s) for s in shape)
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))
    center = (np.asarray(shape) - 1) / 2.0
    semi = np.asarray(shape) * 0.45
    brain = (((grid - center[:, None, None, None]) / semi[:, None, None, None]) ** 2).sum(0) <= 1.0

    label = np.zeros(shape, dtype=np.uint8)
    inside = np.argwhere(brain)
    for _ in range(n_lesions):
        r = rng.uniform(*radius_range)
        c = inside[rng.integers(len(inside))]
        d2 = ((grid - c[:, None, None, None]) ** 2).sum(0)
        label[(d2 <= r * r) & brain] = 1

    dwi = np.where(brain, 1.0, 0.0) + 1.5 * label
    adc = np.where(brain, 1.0, 0.0) - 0.6 * label
    dwi = dwi + noise * rng.standard_normal(shape) * brain
    adc = adc + noise * rng.standard_normal(shape) * brain
    return dwi.astype(np.float32), adc.astype(np.float32), label


def make_sphere_dataset(
    out_dir: str | Path,
    n_cases: int = 4,
    shape=(64, 64, 64),
    spacing=(1.0, 1.0, 1.0),
    seed: int = 0,
    n_lesions: int = 2,
    radius_range=(3.0, 7.0),
    prefix: str = "case",
) -> DatasetManifest:
    """Write ``n_cases`` cases as NIfTI under ``out_dir`` and return their manifest.

    ``radius_range`` is in voxels of the written grid.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_cases):
        cid = f"{prefix}{i:03d}"
        dwi, adc, label = sphere_case(rng, shape, n_lesions, radius_range)
        paths = {k: out_dir / f"{cid}_{k}.nii.gz" for k in ("dwi", "adc", "label")}
        save_volume(ImageVolume(dwi, spacing, modality=Modality.DWI), paths["dwi"])
        save_volume(ImageVolume(adc, spacing, modality=Modality.ADC), paths["adc"])
        save_volume(SegmentationMask(label, spacing), paths["label"])
        cases.append(CaseRecord(cid, paths["dwi"], paths["adc"], label=paths["label"]))
    return DatasetManifest(cases)
