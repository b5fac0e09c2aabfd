"""Sliding-window prediction, probability-mean ensembling, and native-space restoration."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import nibabel as nib
import numpy as np
import torch

from .preprocessing import MultiChannelVolume, NativeGeometry, _zoom_array, pad_array, resampled_shape, unpad_array
from .segresnet import NetworkConfig, SegResNetDS, WeightsError, build, load_state, read_archive
from .volume_io import SegmentationMask, geometry_affine

log = logging.getLogger(__name__)


@dataclass
class ProbabilityMap:
    probs: np.ndarray  # (classes, X, Y, Z)
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.probs.shape[1:])


@dataclass
class EnsembleSpec:
    checkpoint_paths: list[Path]
    config: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self) -> None:
        if not self.checkpoint_paths:
            raise ValueError("an ensemble needs at least one checkpoint")
        self.checkpoint_paths = [Path(p) for p in self.checkpoint_paths]


def tile_starts(dim: int, window: int, overlap: float) -> list[int]:
    """Window start offsets along one axis; the last window is flush with the end."""
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    if dim <= window:
        return [0]
    stride = max(1, int(window * (1 - overlap)))
    starts = list(range(0, dim - window + 1, stride))
    if starts[-1] != dim - window:
        starts.append(dim - window)
    return starts


def importance_map(window: Sequence[int], sigma_scale: float = 0.125, floor: float = 1e-3) -> np.ndarray:
    """Separable Gaussian weights peaked at the window centre, max 1."""
    w = np.ones(tuple(window), dtype=np.float64)
    for axis, n in enumerate(window):
        x = np.arange(n) - (n - 1) / 2.0
        g = np.exp(-0.5 * (x / max(sigma_scale * n, 1e-6)) ** 2)
        shape = [1, 1, 1]
        shape[axis] = n
        w = w * g.reshape(shape)
    w /= w.max()
    return np.maximum(w, floor).astype(np.float32)


def _predict_tile(predictor: Callable, x: np.ndarray, device) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None].to(device)
    out = predictor(t)
    if isinstance(out, (list, tuple)):
        out = out[0]
    return torch.softmax(out.float(), dim=1)[0].cpu().numpy()


def sliding_window_predict(
    net: Callable,
    vol: MultiChannelVolume | np.ndarray,
    window: Sequence[int] = (192, 192, 128),
    overlap: float = 0.5,
    sigma_scale: float = 0.125,
    device: str | torch.device = "cpu",
) -> ProbabilityMap:
    """Softmax probabilities over the whole volume from overlapping windows.

    The volume is zero-padded up to the window size where needed; tile outputs
    are blended with centre-peaked weights that are renormalized per voxel.
    """
    data = vol.data if isinstance(vol, MultiChannelVolume) else np.asarray(vol)
    window = tuple(int(w) for w in window)
    if isinstance(net, torch.nn.Module):
        net.eval()
    padded, record = pad_array(data, window, 0.0)
    spatial = padded.shape[1:]

    with torch.no_grad():
        if spatial == window:
            probs = _predict_tile(net, padded, device)
        else:
            starts = [tile_starts(n, w, overlap) for n, w in zip(spatial, window)]
            weight = importance_map(window, sigma_scale)
            acc = None
            norm = np.zeros(spatial, dtype=np.float32)
            for sx in starts[0]:
                for sy in starts[1]:
                    for sz in starts[2]:
                        sl = (slice(sx, sx + window[0]), slice(sy, sy + window[1]), slice(sz, sz + window[2]))
                        p = _predict_tile(net, padded[(slice(None),) + sl], device)
                        if acc is None:
                            acc = np.zeros((p.shape[0],) + spatial, dtype=np.float32)
                        acc[(slice(None),) + sl] += p * weight
                        norm[sl] += weight
            probs = acc / norm[None]
    probs = unpad_array(probs, record)
    if isinstance(vol, MultiChannelVolume):
        return ProbabilityMap(probs, vol.spacing.copy(), vol.origin.copy(), vol.direction.copy())
    return ProbabilityMap(probs)


def check_ensemble(spec: EnsembleSpec) -> None:
    """Strict-load every checkpoint before any inference runs."""
    net = build(spec.config)
    for path in spec.checkpoint_paths:
        try:
            load_state(net, read_archive(path), strict=True)
        except WeightsError as exc:
            raise WeightsError(f"{path}: {exc}") from exc


def ensemble_predict(
    spec: EnsembleSpec,
    vol: MultiChannelVolume,
    window: Sequence[int] = (192, 192, 128),
    overlap: float = 0.5,
    device: str | torch.device = "cpu",
    nets: Sequence[SegResNetDS] | None = None,
) -> ProbabilityMap:
    """Arithmetic mean of per-model probability maps, accumulated in float64 in list order.

    Pass ``nets`` (already loaded, same order as ``spec.checkpoint_paths``) to
    skip reloading weights for every volume.
    """
    if nets is None:
        check_ensemble(spec)
    acc = None
    template = None
    net = None
    for k, path in enumerate(spec.checkpoint_paths):
        if nets is not None:
            model = nets[k]
        else:
            net = net or build(spec.config)
            load_state(net, read_archive(path), strict=True)
            model = net
        model.to(device)
        pm = sliding_window_predict(model, vol, window, overlap, device=device)
        acc = pm.probs.astype(np.float64) if acc is None else acc + pm.probs
        template = pm
    mean = (acc / len(spec.checkpoint_paths)).astype(np.float32)
    return dataclasses.replace(template, probs=mean)


def load_ensemble(spec: EnsembleSpec, device="cpu") -> list[SegResNetDS]:
    nets = []
    for path in spec.checkpoint_paths:
        net = build(spec.config)
        load_state(net, read_archive(path), strict=True)
        nets.append(net.to(device).eval())
    return nets


def binarize(pm: ProbabilityMap) -> SegmentationMask:
    """Per-voxel argmax over classes; ties resolve to the lower class index (background)."""
    labels = np.argmax(pm.probs, axis=0).astype(np.uint8)
    return SegmentationMask(labels, pm.spacing.copy(), pm.origin.copy(), pm.direction.copy())


def restore_native(mask: SegmentationMask, native: NativeGeometry) -> SegmentationMask:
    """Nearest-neighbour resample a working-space mask onto the canonical DWI grid."""
    expected = resampled_shape(native.shape, native.spacing, native.working_spacing)
    if mask.shape != tuple(native.working_shape) or mask.shape != expected:
        raise ValueError(
            f"mask grid {mask.shape} inconsistent with native record "
            f"(working {tuple(native.working_shape)}, expected {expected})"
        )
    if np.array_equal(native.spacing, mask.spacing) and mask.shape == tuple(native.shape):
        labels = mask.labels.copy()
    else:
        step = native.spacing / mask.spacing
        labels = _zoom_array(mask.labels, step, native.shape, order=0)
    return SegmentationMask(labels, native.spacing.copy(), native.origin.copy(), native.direction.copy())


def to_source_image(mask: SegmentationMask, native: NativeGeometry) -> nib.Nifti1Image:
    """NIfTI image of ``mask`` in the DWI file's on-disk voxel order and header affine."""
    data = mask.labels.astype(np.uint8)
    affine = geometry_affine(mask.spacing, mask.origin, mask.direction)
    img = nib.Nifti1Image(data, affine)
    if native.source_affine is not None:
        src_ornt = nib.orientations.io_orientation(native.source_affine)
        cur_ornt = nib.orientations.io_orientation(affine)
        img = img.as_reoriented(nib.orientations.ornt_transform(cur_ornt, src_ornt))
        if not np.allclose(img.affine, native.source_affine, atol=1e-3):
            raise ValueError("restored mask does not line up with the source DWI header")
        img = nib.Nifti1Image(np.asarray(img.dataobj).astype(np.uint8), native.source_affine)
        if native.source_shape is not None and img.shape != tuple(native.source_shape):
            raise ValueError(f"restored mask shape {img.shape} != source shape {native.source_shape}")
    img.set_qform(img.affine, code=1)
    img.set_sform(img.affine, code=1)
    img.header.set_xyzt_units("mm")
    return img


def write_prediction(mask: SegmentationMask, native: NativeGeometry, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(to_source_image(mask, native), str(path))
    return path


def write_probability(pm: ProbabilityMap, path: str | Path, channel: int = 1) -> Path:
    """Export one class probability channel (working 1 mm grid) as float32 NIfTI."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    affine = geometry_affine(pm.spacing, pm.origin, pm.direction)
    nib.save(nib.Nifti1Image(pm.probs[channel].astype(np.float32), affine), str(path))
    return path
