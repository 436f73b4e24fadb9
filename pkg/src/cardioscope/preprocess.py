"""Heart-crop to network input: resample to 1 mm, clip HU, scale to [0, 1], pad to a cube.

Order is fixed as crop -> resample -> clip -> normalize -> pad. The unit
scale maps -160 HU to 0, so zero padding looks like clipped air/fat.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateVolume, OversizeInput, ValueOutOfClipRange
from .io import IntensitySpace, VoxelVolume

log = logging.getLogger(__name__)

HU_LO = -160.0
HU_HI = 840.0
HU_SCALE = HU_HI - HU_LO  # 1000 HU per unit


@dataclass
class PreprocessConfig:
    target_mm: float = 1.0
    clip_lo: float = HU_LO
    clip_hi: float = HU_HI
    cube_size: int = 128


def resampled_shape(shape, spacing, target_mm: float = 1.0) -> tuple[int, int, int]:
    # Python's round() is half-to-even
    return tuple(max(1, int(round(n * s / target_mm))) for n, s in zip(shape, spacing))


def resample_isotropic(v: VoxelVolume, target_mm: float = 1.0) -> VoxelVolume:
    """Trilinear resampling onto a ``target_mm`` isotropic grid with the same physical centre."""
    if not (np.isfinite(target_mm) and target_mm > 0):
        raise DegenerateVolume(f"target spacing must be positive, got {target_mm}")
    spacing = np.asarray(v.spacing)
    out_shape = resampled_shape(v.shape, v.spacing, target_mm)
    if min(out_shape) < 1:
        raise DegenerateVolume(f"resampled shape {out_shape} is empty")
    target = (float(target_mm),) * 3
    if out_shape == v.shape and np.all(spacing == target_mm):
        return v.replace(data=v.data.copy(), spacing=target)

    n_in = np.asarray(v.shape, dtype=float)
    n_out = np.asarray(out_shape, dtype=float)
    centre = np.asarray(v.origin) + (n_in - 1) / 2 * spacing
    out_origin = centre - (n_out - 1) / 2 * target_mm
    # output index j -> input index (out_origin + j*t - origin) / s
    scale = target_mm / spacing
    offset = (out_origin - np.asarray(v.origin)) / spacing
    data = np.asarray(v.data, dtype=np.float32 if v.data.dtype != np.float64 else np.float64)
    # interpolate deviations from one reference voxel: weights summing to 1 then
    # reproduce a constant field bit for bit instead of to within rounding
    ref = data.flat[0] if data.size else data.dtype.type(0)
    out = ndimage.affine_transform(data - ref, np.diag(scale), offset=offset, output_shape=out_shape,
                                   order=1, mode="nearest") + ref
    return VoxelVolume(out, target, tuple(out_origin), v.intensity_space)


def clip_hu(v: VoxelVolume, lo: float = HU_LO, hi: float = HU_HI) -> VoxelVolume:
    if v.intensity_space is not IntensitySpace.HU:
        raise ValueError("clip_hu expects an HU volume")
    if not lo < hi:
        raise ValueError(f"clip bounds must satisfy lo < hi, got {lo}, {hi}")
    return v.replace(data=np.clip(v.data, lo, hi))


def normalize_unit(v: VoxelVolume, lo: float = HU_LO, hi: float = HU_HI) -> VoxelVolume:
    """Affine map of [lo, hi] HU onto [0, 1]; inverse is :func:`denormalize_unit`."""
    data = v.data
    if data.size and (float(data.min()) < lo or float(data.max()) > hi):
        raise ValueOutOfClipRange(f"values span [{data.min()}, {data.max()}], outside [{lo}, {hi}]; clip first")
    unit = (data - data.dtype.type(lo)) / data.dtype.type(hi - lo) if data.dtype.kind == "f" \
        else (data.astype(np.float64) - lo) / (hi - lo)
    return VoxelVolume(np.clip(unit, 0.0, 1.0), v.spacing, v.origin, IntensitySpace.UNIT)


def denormalize_unit(v: VoxelVolume, lo: float = HU_LO, hi: float = HU_HI) -> VoxelVolume:
    return VoxelVolume(v.data * (hi - lo) + lo, v.spacing, v.origin, IntensitySpace.HU)


def center_crop(v: VoxelVolume, shape) -> VoxelVolume:
    starts = [(n - m) // 2 for n, m in zip(v.shape, shape)]
    if any(s < 0 for s in starts):
        raise ValueError(f"cannot crop {v.shape} to larger {tuple(shape)}")
    sl = tuple(slice(s, s + m) for s, m in zip(starts, shape))
    origin = tuple(o + s * sp for o, s, sp in zip(v.origin, starts, v.spacing))
    return VoxelVolume(v.data[sl].copy(), v.spacing, origin, v.intensity_space)


def pad_to_cube(v: VoxelVolume, size: int = 128, strict: bool = False) -> VoxelVolume:
    """Centre ``v`` in a ``size``³ cube of zeros.

    Axes longer than ``size`` are centre-cropped with a warning, or raise
    :class:`OversizeInput` when ``strict``.
    """
    if v.intensity_space is not IntensitySpace.UNIT:
        raise ValueError("pad_to_cube expects a UNIT volume")
    if max(v.shape) > size:
        if strict:
            raise OversizeInput(f"extent {v.shape} exceeds cube size {size}")
        log.warning("volume of shape %s exceeds %d; centre-cropping", v.shape, size)
        v = center_crop(v, tuple(min(n, size) for n in v.shape))
    left = [(size - n) // 2 for n in v.shape]
    pad = [(l, size - n - l) for l, n in zip(left, v.shape)]
    data = np.pad(v.data, pad, mode="constant", constant_values=0.0)
    origin = tuple(o - l * s for o, l, s in zip(v.origin, left, v.spacing))
    return VoxelVolume(data, v.spacing, origin, IntensitySpace.UNIT)


def preprocess_crop(v: VoxelVolume, cfg: PreprocessConfig | None = None) -> VoxelVolume:
    """Everything after the heart crop: resample, clip, normalize, pad."""
    cfg = cfg or PreprocessConfig()
    v = resample_isotropic(v, cfg.target_mm)
    v = clip_hu(v, cfg.clip_lo, cfg.clip_hi)
    v = normalize_unit(v, cfg.clip_lo, cfg.clip_hi)
    v = v.replace(data=v.data.astype(np.float32))
    return pad_to_cube(v, cfg.cube_size)
