"""NIfTI volume and dataset-manifest I/O.

Every volume is reoriented to the closest canonical (RAS) voxel ordering on
load, so downstream code can treat array axes as axis-aligned x, y, z.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import nibabel as nib
import numpy as np

log = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-6


class VolumeError(Exception):
    """Base class for volume loading/saving problems."""


class VolumeFormatError(VolumeError):
    pass


class UnsupportedShapeError(VolumeError):
    pass


class ManifestError(ValueError):
    pass


class Modality(str, enum.Enum):
    DWI = "DWI"
    ADC = "ADC"
    FLAIR = "FLAIR"
    OTHER = "OTHER"


def _as_vec3(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got {arr.shape}")
    return arr


def _check_geometry(shape, spacing, direction) -> None:
    if len(shape) != 3 or any(int(d) < 1 for d in shape):
        raise ValueError(f"volume must be 3D with all dims >= 1, got shape {tuple(shape)}")
    if np.any(spacing <= 0):
        raise ValueError(f"spacing must be positive, got {spacing.tolist()}")
    if direction.shape != (3, 3):
        raise ValueError("direction must be a 3x3 matrix")
    if not np.allclose(direction.T @ direction, np.eye(3), atol=ORTHONORMAL_TOL):
        raise ValueError("direction matrix is not orthonormal")


@dataclass
class ImageVolume:
    """One MRI modality on a regular grid.

    ``data`` is indexed ``[i, j, k]`` along the columns of ``direction``; the
    world position of voxel ``ijk`` is ``origin + direction @ (spacing * ijk)``.
    """

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))
    modality: Modality = Modality.OTHER

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        self.spacing = _as_vec3(self.spacing, "spacing")
        self.origin = _as_vec3(self.origin, "origin")
        self.direction = np.asarray(self.direction, dtype=np.float64)
        self.modality = Modality(self.modality)
        _check_geometry(self.data.shape, self.spacing, self.direction)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def affine(self) -> np.ndarray:
        return geometry_affine(self.spacing, self.origin, self.direction)


@dataclass
class SegmentationMask:
    """Integer label grid; geometry fields mirror :class:`ImageVolume`."""

    labels: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            if labels.dtype == bool:
                labels = labels.astype(np.uint8)
            else:
                raise TypeError(f"mask labels must be integers, got {labels.dtype}")
        if labels.size and labels.min() < 0:
            raise ValueError("mask labels must be non-negative")
        self.labels = labels
        self.spacing = _as_vec3(self.spacing, "spacing")
        self.origin = _as_vec3(self.origin, "origin")
        self.direction = np.asarray(self.direction, dtype=np.float64)
        _check_geometry(self.labels.shape, self.spacing, self.direction)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    @property
    def affine(self) -> np.ndarray:
        return geometry_affine(self.spacing, self.origin, self.direction)


Volume = Union[ImageVolume, SegmentationMask]


def geometry_affine(spacing, origin, direction) -> np.ndarray:
    aff = np.eye(4)
    aff[:3, :3] = np.asarray(direction) * np.asarray(spacing)[None, :]
    aff[:3, 3] = origin
    return aff


def decompose_affine(affine: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a 4x4 voxel-to-world affine into (spacing, origin, direction)."""
    m = np.asarray(affine, dtype=np.float64)[:3, :3]
    spacing = np.linalg.norm(m, axis=0)
    if np.any(spacing <= 0):
        raise VolumeFormatError("affine has a zero-length axis")
    direction = m / spacing[None, :]
    # Headers written in float32 carry ~1e-7 noise; re-orthonormalize via polar decomposition.
    u, _, vt = np.linalg.svd(direction)
    direction = u @ vt
    return spacing, np.asarray(affine, dtype=np.float64)[:3, 3].copy(), direction


def same_grid(a: Volume, b: Volume, tol: float = 1e-4) -> bool:
    return (
        a.shape == b.shape
        and np.allclose(a.spacing, b.spacing, atol=tol)
        and np.allclose(a.origin, b.origin, atol=tol)
        and np.allclose(a.direction, b.direction, atol=tol)
    )


def _read_canonical(path: str | Path) -> nib.Nifti1Image:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume not found: {path}")
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises several unrelated types
        raise VolumeFormatError(f"cannot read NIfTI header from {path}: {exc}") from exc
    if not isinstance(img, (nib.Nifti1Image, nib.Nifti2Image)):
        raise VolumeFormatError(f"{path} is not a NIfTI volume")
    shape = img.shape
    if len(shape) == 4 and shape[3] == 1:
        img = img.slicer[..., 0]
    elif len(shape) != 3:
        raise UnsupportedShapeError(f"{path}: expected a 3D volume, got shape {shape}")
    return nib.as_closest_canonical(img)


def _read_array(img: nib.Nifti1Image) -> np.ndarray:
    raw = np.asanyarray(img.dataobj)
    if np.issubdtype(raw.dtype, np.floating):
        return np.array(raw, copy=True)
    # float32 is exact for integers up to 16 bits.
    if raw.dtype.itemsize <= 2 and raw.dtype.kind in "iub":
        return raw.astype(np.float32)
    return raw.astype(np.float64)


def load_volume(path: str | Path, modality: Modality | str = Modality.OTHER) -> ImageVolume:
    img = _read_canonical(path)
    data = _read_array(img)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{path}: volume contains NaN or inf values")
    spacing, origin, direction = decompose_affine(img.affine)
    return ImageVolume(data, spacing, origin, direction, Modality(modality))


def load_mask(path: str | Path) -> SegmentationMask:
    """Load a label volume; any value > 0.5 becomes foreground (1)."""
    img = _read_canonical(path)
    data = np.asanyarray(img.dataobj)
    labels = (data > 0.5).astype(np.uint8)
    spacing, origin, direction = decompose_affine(img.affine)
    return SegmentationMask(labels, spacing, origin, direction)


def save_volume(vol: Volume, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(vol, SegmentationMask):
        arr = vol.labels
        if arr.max(initial=0) <= 255:
            arr = arr.astype(np.uint8)
    else:
        arr = vol.data
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
    img = nib.Nifti1Image(np.ascontiguousarray(arr), vol.affine)
    img.header.set_data_dtype(arr.dtype)
    img.header.set_xyzt_units("mm")
    img.set_qform(vol.affine, code=1)
    img.set_sform(vol.affine, code=1)
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise OSError(f"cannot write volume to {path}: {exc}") from exc


# --------------------------------------------------------------------------
# manifests


@dataclass
class CaseRecord:
    case_id: str
    dwi: Path
    adc: Path
    flair: Path | None = None
    label: Path | None = None

    @property
    def labeled(self) -> bool:
        return self.label is not None

    def check_paths(self) -> None:
        for name in ("dwi", "adc", "label"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"case {self.case_id}: {name} file not found: {p}")


@dataclass
class DatasetManifest:
    cases: list[CaseRecord] = field(default_factory=list)
    fold_of: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.validate()

    @property
    def case_ids(self) -> list[str]:
        return [c.case_id for c in self.cases]

    @property
    def num_folds(self) -> int:
        return max(self.fold_of.values()) + 1 if self.fold_of else 0

    def case(self, case_id: str) -> CaseRecord:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def labeled_cases(self) -> list[CaseRecord]:
        return [c for c in self.cases if c.labeled]

    def fold_cases(self, fold: int) -> list[CaseRecord]:
        return [c for c in self.cases if self.fold_of.get(c.case_id) == fold]

    def fold_sizes(self) -> dict[int, int]:
        sizes = {k: 0 for k in range(self.num_folds)}
        for f in self.fold_of.values():
            sizes[f] += 1
        return sizes

    def validate(self, num_folds: int | None = None) -> None:
        ids = self.case_ids
        seen: set[str] = set()
        for cid in ids:
            if cid in seen:
                raise ManifestError(f"duplicate case_id {cid!r}")
            seen.add(cid)
        if not self.fold_of:
            return
        k = num_folds if num_folds is not None else self.num_folds
        for cid, f in self.fold_of.items():
            if cid not in seen:
                raise ManifestError(f"fold assigned to unknown case {cid!r}")
            if not isinstance(f, int) or isinstance(f, bool) or not 0 <= f < k:
                raise ManifestError(f"fold index {f!r} of case {cid!r} outside [0, {k})")
        unassigned = [c.case_id for c in self.labeled_cases() if c.case_id not in self.fold_of]
        if unassigned:
            raise ManifestError(f"labeled cases without a fold: {unassigned}")
        sizes = [0] * k
        for f in self.fold_of.values():
            sizes[f] += 1
        if max(sizes) - min(sizes) > 1:
            raise ManifestError(f"fold sizes differ by more than one: {sizes}")


def _rel(p: Path | None, base: Path) -> str | None:
    if p is None:
        return None
    p = Path(p)
    try:
        return str(p.resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)


def manifest_to_dict(m: DatasetManifest, base: Path | None = None) -> dict:
    base = base or Path("/")
    cases = []
    for c in m.cases:
        entry = {"case_id": c.case_id, "dwi": _rel(c.dwi, base), "adc": _rel(c.adc, base)}
        if c.flair is not None:
            entry["flair"] = _rel(c.flair, base)
        if c.label is not None:
            entry["label"] = _rel(c.label, base)
        cases.append(entry)
    return {"cases": cases, "folds": {cid: m.fold_of[cid] for cid in m.case_ids if cid in m.fold_of}}


def manifest_from_dict(doc: dict, base: Path | None = None) -> DatasetManifest:
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a mapping with 'cases' and 'folds'")
    unknown = set(doc) - {"cases", "folds"}
    if unknown:
        raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
    base = base or Path(".")

    def resolve(v):
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else base / p

    cases = []
    for i, entry in enumerate(doc.get("cases") or []):
        missing = {"case_id", "dwi", "adc"} - set(entry)
        if missing:
            raise ManifestError(f"case #{i} missing fields {sorted(missing)}")
        extra = set(entry) - {"case_id", "dwi", "adc", "flair", "label"}
        if extra:
            raise ManifestError(f"case #{i} has unknown fields {sorted(extra)}")
        cases.append(
            CaseRecord(
                case_id=str(entry["case_id"]),
                dwi=resolve(entry["dwi"]),
                adc=resolve(entry["adc"]),
                flair=resolve(entry.get("flair")),
                label=resolve(entry.get("label")),
            )
        )
    folds = dict(doc.get("folds") or {})
    return DatasetManifest(cases, folds)


def load_manifest(path: str | Path, check_paths: bool = False) -> DatasetManifest:
    """Read a JSON manifest; relative file paths resolve against its directory."""
    path = Path(path)
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON: {exc}") from exc
    m = manifest_from_dict(doc, base=path.parent)
    if check_paths:
        for c in m.cases:
            c.check_paths()
    return m


def save_manifest(m: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = manifest_to_dict(m, base=path.parent)
    path.write_text(json.dumps(doc, indent=2) + "\n")
