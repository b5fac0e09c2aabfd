"""Resampling, channel stacking, normalization, padding and crop sampling."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import nibabel as nib
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage

from .volume_io import (
    CaseRecord,
    ImageVolume,
    Modality,
    SegmentationMask,
    Volume,
    _as_vec3,
    load_mask,
    load_volume,
    same_grid,
)

CHANNEL_ORDER = ("DWI", "ADC")
NORM_EPS = 1e-8


class AlignmentError(ValueError):
    """Volumes to be stacked do not share a grid; resample them first."""


@dataclass
class MultiChannelVolume:
    data: np.ndarray  # (C, X, Y, Z)
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise ValueError(f"expected (C, X, Y, Z) data, got shape {self.data.shape}")
        self.spacing = _as_vec3(self.spacing, "spacing")
        self.origin = _as_vec3(self.origin, "origin")
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.data.shape[0])]
        if len(self.channel_names) != self.data.shape[0]:
            raise ValueError("one channel name per channel required")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]


class CropSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    size: tuple[int, int, int] = (192, 192, 128)
    foreground_bias: float = Field(0.75, ge=0.0, le=1.0)

    @field_validator("size")
    @classmethod
    def _positive(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("crop size components must be > 0")
        return v


@dataclass(frozen=True)
class PadRecord:
    """Per-axis (low, high) padding applied by :func:`pad_to_min`."""

    pads: tuple[tuple[int, int], ...] = ((0, 0), (0, 0), (0, 0))

    @property
    def empty(self) -> bool:
        return all(lo == 0 and hi == 0 for lo, hi in self.pads)


@dataclass
class NativeGeometry:
    """Geometry needed to map a working-space prediction back to the DWI grid.

    ``shape``/``spacing``/``origin``/``direction`` describe the canonical
    (RAS-ordered) DWI grid; ``source_affine``/``source_shape`` describe the grid
    exactly as stored on disk.
    """

    shape: tuple[int, int, int]
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray
    working_spacing: np.ndarray
    working_shape: tuple[int, int, int]
    source_affine: np.ndarray | None = None
    source_shape: tuple[int, int, int] | None = None
    case_id: str | None = None


# --------------------------------------------------------------------------
# resampling


def resampled_shape(shape: Sequence[int], spacing, target_spacing) -> tuple[int, int, int]:
    """Output dims ``ceil(dim * spacing / target)`` with a guard against fp noise."""
    out = []
    for n, s, t in zip(shape, spacing, target_spacing):
        exact = n * float(s) / float(t)
        out.append(max(1, int(math.ceil(exact - 1e-9))))
    return tuple(out)


def _zoom_array(arr: np.ndarray, step, out_shape, order: int) -> np.ndarray:
    # Output voxel j samples input coordinate j * step (voxel 0 centres coincide).
    return ndimage.affine_transform(
        arr,
        np.diag(np.asarray(step, dtype=np.float64)),
        offset=0.0,
        output_shape=tuple(out_shape),
        order=order,
        mode="nearest",
        prefilter=False,
    )


def resample(
    vol: Volume,
    target_spacing=(1.0, 1.0, 1.0),
    mode: Literal["trilinear", "nearest"] = "trilinear",
) -> Volume:
    """Resample onto a grid with ``target_spacing`` that shares the origin voxel.

    Samples beyond the last input voxel centre take the edge value.
    """
    target = _as_vec3(target_spacing, "target_spacing")
    if np.any(target <= 0):
        raise ValueError(f"target spacing must be positive, got {target.tolist()}")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    is_mask = isinstance(vol, SegmentationMask)
    arr = vol.labels if is_mask else vol.data
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"cannot resample degenerate volume of shape {arr.shape}")

    if np.array_equal(vol.spacing, target):
        out = arr.copy()
    else:
        step = target / vol.spacing
        out_shape = resampled_shape(arr.shape, vol.spacing, target)
        if mode == "nearest":
            out = _zoom_array(arr, step, out_shape, order=0)
        else:
            src = arr if np.issubdtype(arr.dtype, np.floating) else arr.astype(np.float32)
            out = _zoom_array(src, step, out_shape, order=1)

    if is_mask:
        return dataclasses.replace(vol, labels=out, spacing=target.copy())
    return dataclasses.replace(vol, data=out, spacing=target.copy())


# --------------------------------------------------------------------------
# channels and intensities


def stack_channels(vols: Sequence[ImageVolume], tol: float = 1e-4) -> MultiChannelVolume:
    if not vols:
        raise ValueError("need at least one volume to stack")
    ref = vols[0]
    for i, v in enumerate(vols[1:], start=1):
        if not same_grid(ref, v, tol):
            raise AlignmentError(
                f"channel {i} grid {v.shape}@{v.spacing.tolist()} differs from channel 0 "
                f"grid {ref.shape}@{ref.spacing.tolist()}; resample first"
            )
    dtype = np.result_type(*[v.data.dtype for v in vols])
    data = np.stack([v.data.astype(dtype, copy=False) for v in vols])
    names = [v.modality.value for v in vols]
    if len(set(names)) != len(names):
        names = [f"{n}{i}" for i, n in enumerate(names)]
    return MultiChannelVolume(data, ref.spacing.copy(), ref.origin.copy(), ref.direction.copy(), names)


def normalize(
    vol: MultiChannelVolume, region: Literal["all", "nonzero"] = "all"
) -> MultiChannelVolume:
    """Per-channel zero-mean, unit-std scaling.

    ``region="nonzero"`` computes statistics over nonzero voxels and leaves the
    zero background untouched. Channels with std below ``NORM_EPS`` become zero.
    """
    if region not in ("all", "nonzero"):
        raise ValueError(f"unknown normalization region {region!r}")
    out_dtype = vol.data.dtype if np.issubdtype(vol.data.dtype, np.floating) else np.float32
    out = np.zeros(vol.data.shape, dtype=out_dtype)
    for c in range(vol.num_channels):
        x = vol.data[c].astype(np.float64)
        sel = x != 0 if region == "nonzero" else np.ones(x.shape, dtype=bool)
        if not sel.any():
            continue
        vals = x[sel]
        mean = vals.mean()
        std = vals.std()
        if std < NORM_EPS:
            continue
        y = np.zeros_like(x)
        y[sel] = (vals - mean) / std
        out[c] = y
    return dataclasses.replace(vol, data=out)


# --------------------------------------------------------------------------
# padding and cropping


def _pad_widths(shape, min_size) -> tuple[tuple[int, int], ...]:
    pads = []
    for n, m in zip(shape, min_size):
        total = max(0, int(m) - int(n))
        lo = total // 2
        pads.append((lo, total - lo))
    return tuple(pads)


def pad_array(arr: np.ndarray, min_size, fill: float = 0.0) -> tuple[np.ndarray, PadRecord]:
    """Pad the last three axes of ``arr`` symmetrically up to ``min_size``."""
    spatial = arr.shape[-3:]
    pads = _pad_widths(spatial, min_size)
    record = PadRecord(pads)
    if record.empty:
        return arr, record
    width = [(0, 0)] * (arr.ndim - 3) + list(pads)
    return np.pad(arr, width, mode="constant", constant_values=fill), record


def unpad_array(arr: np.ndarray, record: PadRecord) -> np.ndarray:
    if record.empty:
        return arr
    sl = tuple(slice(lo, arr.shape[arr.ndim - 3 + i] - hi) for i, (lo, hi) in enumerate(record.pads))
    return arr[(Ellipsis,) + sl]


def _shift_origin(vol, offset) -> np.ndarray:
    return vol.origin + vol.direction @ (vol.spacing * np.asarray(offset, dtype=np.float64))


def pad_to_min(vol, min_size, fill: float = 0.0):
    """Pad a volume (or bare array) so every spatial dim reaches ``min_size``.

    The extra voxel of an odd padding goes on the high side. Returns the padded
    object and a :class:`PadRecord` that :func:`crop_back` inverts.
    """
    if isinstance(vol, np.ndarray):
        return pad_array(vol, min_size, fill)
    attr = "labels" if isinstance(vol, SegmentationMask) else "data"
    arr, record = pad_array(getattr(vol, attr), min_size, fill)
    if record.empty:
        return vol, record
    origin = _shift_origin(vol, [-lo for lo, _ in record.pads])
    return dataclasses.replace(vol, **{attr: arr, "origin": origin}), record


def crop_back(vol, record: PadRecord):
    if isinstance(vol, np.ndarray):
        return unpad_array(vol, record)
    if record.empty:
        return vol
    attr = "labels" if isinstance(vol, SegmentationMask) else "data"
    arr = unpad_array(getattr(vol, attr), record)
    origin = _shift_origin(vol, [lo for lo, _ in record.pads])
    return dataclasses.replace(vol, **{attr: arr, "origin": origin})


def crop_offsets(
    shape: Sequence[int],
    size: Sequence[int],
    rng: np.random.Generator,
    foreground: np.ndarray | None = None,
    foreground_bias: float = 0.0,
) -> tuple[int, int, int]:
    """Choose the low corner of a ``size`` crop inside ``shape``.

    With probability ``foreground_bias`` (and a non-empty ``foreground``) the
    crop is centred on a random foreground voxel, clipped to stay in bounds, so
    it always contains that voxel.
    """
    shape = np.asarray(shape)
    size = np.asarray(size)
    if np.any(shape < size):
        raise ValueError(f"volume {tuple(shape)} smaller than crop {tuple(size)}; pad first")
    hi = shape - size
    biased = rng.random() < foreground_bias
    if biased and foreground is not None:
        idx = np.flatnonzero(foreground)
        if idx.size:
            center = np.array(np.unravel_index(idx[rng.integers(idx.size)], foreground.shape))
            return tuple(int(v) for v in np.clip(center - size // 2, 0, hi))
    return tuple(int(rng.integers(0, h + 1)) for h in hi)


def sample_crop(
    vol: MultiChannelVolume,
    mask: SegmentationMask | None,
    spec: CropSpec,
    rng: np.random.Generator,
) -> tuple[MultiChannelVolume, SegmentationMask | None]:
    if mask is not None and mask.shape != vol.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image shape {vol.shape}")
    fg = mask.labels > 0 if mask is not None else None
    off = crop_offsets(vol.shape, spec.size, rng, fg, spec.foreground_bias)
    sl = tuple(slice(o, o + s) for o, s in zip(off, spec.size))
    origin = _shift_origin(vol, off)
    img = dataclasses.replace(vol, data=vol.data[(slice(None),) + sl].copy(), origin=origin)
    out_mask = None
    if mask is not None:
        out_mask = dataclasses.replace(mask, labels=mask.labels[sl].copy(), origin=origin)
    return img, out_mask


# --------------------------------------------------------------------------
# composition


def preprocess_case(
    record: CaseRecord,
    target_spacing=(1.0, 1.0, 1.0),
    norm_region: Literal["all", "nonzero"] = "all",
    load_label: bool = True,
) -> tuple[MultiChannelVolume, SegmentationMask | None, NativeGeometry]:
    """load -> resample (trilinear images, nearest mask) -> stack [DWI, ADC] -> normalize."""

    dwi = load_volume(record.dwi, Modality.DWI)
    adc = load_volume(record.adc, Modality.ADC)
    src = nib.load(str(record.dwi))
    target = _as_vec3(target_spacing, "target_spacing")

    dwi_r = resample(dwi, target, "trilinear")
    adc_r = resample(adc, target, "trilinear")
    img = normalize(stack_channels([dwi_r, adc_r]), norm_region)

    mask = None
    if load_label and record.label is not None:
        mask = resample(load_mask(record.label), target, "nearest")
        if mask.shape != img.shape:
            raise ValueError(
                f"case {record.case_id}: label grid {mask.shape} does not match image grid {img.shape}"
            )

    native = NativeGeometry(
        shape=dwi.shape,
        spacing=dwi.spacing.copy(),
        origin=dwi.origin.copy(),
        direction=dwi.direction.copy(),
        working_spacing=target.copy(),
        working_shape=img.shape,
        source_affine=np.asarray(src.affine, dtype=np.float64),
        source_shape=tuple(int(s) for s in src.shape[:3]),
        case_id=record.case_id,
    )
    return img, mask, native
