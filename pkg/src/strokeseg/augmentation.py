"""Training-time spatial and intensity augmentation for (C, X, Y, Z) patches.

Every function takes an explicit ``numpy.random.Generator`` and draws from it
in a fixed order, so equal generator states give equal outputs.
"""

from __future__ import annotations

import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

Range = tuple[float, float]


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    flip_prob_per_axis: float = Field(0.5, ge=0, le=1)
    affine_prob: float = Field(0.5, ge=0, le=1)
    rot_range_deg: float = Field(15.0, ge=0)
    scale_range: float = Field(0.1, ge=0, lt=1)
    smooth_prob: float = Field(0.2, ge=0, le=1)
    smooth_sigma_range: Range = (0.5, 1.5)
    noise_prob: float = Field(0.2, ge=0, le=1)
    noise_std_range: Range = (0.01, 0.1)
    intensity_scale_prob: float = Field(0.3, ge=0, le=1)
    intensity_scale_range: Range = (0.9, 1.1)
    intensity_shift_prob: float = Field(0.3, ge=0, le=1)
    intensity_shift_range: Range = (-0.1, 0.1)

    @model_validator(mode="after")
    def _ordered(self):
        for name in ("smooth_sigma_range", "noise_std_range", "intensity_scale_range", "intensity_shift_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must satisfy min <= max, got ({lo}, {hi})")
        if self.smooth_sigma_range[0] < 0 or self.noise_std_range[0] < 0:
            raise ValueError("sigma and noise ranges must be non-negative")
        return self

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(
            flip_prob_per_axis=0.0,
            affine_prob=0.0,
            smooth_prob=0.0,
            noise_prob=0.0,
            intensity_scale_prob=0.0,
            intensity_shift_prob=0.0,
        )


# --------------------------------------------------------------------------
# flips


def flip(img: np.ndarray, mask: np.ndarray | None, axes) -> tuple[np.ndarray, np.ndarray | None]:
    """Reverse the given spatial axes (0..2) of a (C, X, Y, Z) image and (X, Y, Z) mask."""
    axes = tuple(int(a) for a in axes)
    if not axes:
        return img, mask
    img = np.flip(img, axis=tuple(a + 1 for a in axes)).copy()
    if mask is not None:
        mask = np.flip(mask, axis=axes).copy()
    return img, mask


def random_flip(img, mask, rng: np.random.Generator, prob: float = 0.5):
    draws = rng.random(3)
    return flip(img, mask, [a for a in range(3) if draws[a] < prob])


# --------------------------------------------------------------------------
# rotation + scaling


def _rot(axis: int, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    i, j = [a for a in range(3) if a != axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def affine_matrix(angles_deg=(0.0, 0.0, 0.0), scales=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Forward voxel-space transform ``R_z R_y R_x diag(scales)`` about the patch centre."""
    a = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    r = _rot(2, a[2]) @ _rot(1, a[1]) @ _rot(0, a[0])
    m = r @ np.diag(np.asarray(scales, dtype=np.float64))
    # Snap cos/sin noise so quarter turns are exact permutations.
    m[np.abs(m) < 1e-12] = 0.0
    return m


def apply_affine(img, mask, matrix: np.ndarray, order: int = 1):
    """Warp image (linear) and mask (nearest) with a forward transform about the centre.

    Output voxel ``y`` samples input at ``M^-1 (y - c) + c``; out-of-field voxels become 0.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if np.allclose(matrix, np.eye(3), atol=0, rtol=0):
        return img.copy(), None if mask is None else mask.copy()
    shape = np.asarray(img.shape[1:], dtype=np.float64)
    center = (shape - 1) / 2.0
    inv = np.linalg.inv(matrix)
    inv[np.abs(inv) < 1e-12] = 0.0
    offset = center - inv @ center

    def warp(arr, o):
        return ndimage.affine_transform(
            arr, inv, offset=offset, output_shape=arr.shape, order=o, mode="constant", cval=0.0, prefilter=False
        )

    out_img = np.stack([warp(ch, order) for ch in img]).astype(img.dtype, copy=False)
    out_mask = None if mask is None else warp(mask, 0).astype(mask.dtype, copy=False)
    return out_img, out_mask


def sample_affine(rng: np.random.Generator, rot_range_deg: float, scale_range: float) -> np.ndarray:
    angles = rng.uniform(-rot_range_deg, rot_range_deg, size=3)
    scales = 1.0 + rng.uniform(-scale_range, scale_range, size=3)
    return affine_matrix(angles, scales)


def random_affine(img, mask, rng: np.random.Generator, cfg: AugmentConfig | None = None):
    cfg = cfg or AugmentConfig()
    apply = rng.random() < cfg.affine_prob
    matrix = sample_affine(rng, cfg.rot_range_deg, cfg.scale_range)
    if not apply:
        return img, mask
    return apply_affine(img, mask, matrix)


# --------------------------------------------------------------------------
# intensity


def random_intensity(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> np.ndarray:
    """Smoothing, additive noise, multiplicative scale, additive shift, in that order."""
    cfg = cfg or AugmentConfig()
    out = img.astype(np.float32, copy=True) if not np.issubdtype(img.dtype, np.floating) else img.copy()

    if rng.random() < cfg.smooth_prob:
        sigma = rng.uniform(*cfg.smooth_sigma_range)
        if sigma > 0:
            for c in range(out.shape[0]):
                out[c] = ndimage.gaussian_filter(out[c], sigma=sigma, mode="nearest")
    if rng.random() < cfg.noise_prob:
        std = rng.uniform(*cfg.noise_std_range)
        if std > 0:
            out += rng.normal(0.0, std, size=out.shape).astype(out.dtype)
    if rng.random() < cfg.intensity_scale_prob:
        out *= out.dtype.type(rng.uniform(*cfg.intensity_scale_range))
    if rng.random() < cfg.intensity_shift_prob:
        out += out.dtype.type(rng.uniform(*cfg.intensity_shift_range))
    return out


def augment(img, mask, cfg: AugmentConfig, rng: np.random.Generator):
    """flip -> rotate/scale -> intensity, all drawn from one generator."""
    img, mask = random_flip(img, mask, rng, cfg.flip_prob_per_axis)
    img, mask = random_affine(img, mask, rng, cfg)
    img = random_intensity(img, rng, cfg)
    return img, mask


def sample_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for (seed, worker, epoch, sample, ...) style stream ids."""
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])
