"""Synthetic chest-CT phantoms with a known heart box and calcium-driven risk.

Each phantom is a chest section: air, an elliptic body cylinder, two lungs,
a heart ellipsoid wrapped in epicardial fat, an aortic tube rising from the
heart, and a random number of calcified blobs inside heart or aorta. The
label of a subject is drawn from ``logistic(a + b * calcium_volume_mm3)``.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import InvalidParams, UnwritablePath
from .io import (
    CohortManifest,
    IntensitySpace,
    Label,
    PhantomTruth,
    SubjectRecord,
    VoxelVolume,
    save_manifest,
    save_volume,
)
from .seeding import child_rng, child_seed

log = logging.getLogger(__name__)

CALCIUM_THRESHOLD_HU = 130.0


@dataclass
class PhantomParams:
    volume_shape: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: tuple[float, float, float] = (1.25, 1.25, 1.5)
    # (mean, subject-level stddev) of each tissue's HU
    air_hu: tuple[float, float] = (-1000.0, 0.0)
    lung_hu: tuple[float, float] = (-800.0, 30.0)
    soft_tissue_hu: tuple[float, float] = (40.0, 10.0)
    fat_hu: tuple[float, float] = (-100.0, 10.0)
    calcium_hu_range: tuple[float, float] = (300.0, 1000.0)
    body_semi_axes_mm: tuple[float, float] = (37.0, 32.0)
    lung_semi_axes_mm: tuple[float, float, float] = (14.0, 22.0, 44.0)
    heart_radius_mm: tuple[float, float] = (13.0, 18.0)
    heart_center_jitter_mm: float = 5.0
    fat_shell_mm: float = 2.5
    aorta_radius_mm: tuple[float, float] = (5.0, 7.0)
    # blob count is 0 with prob p_zero_calcium, else 1 + Poisson(mean_blobs - 1)
    p_zero_calcium: float = 0.35
    # few, millimetre-scale plaques rather than many specks, so a 64^3
    # autoencoder at 1 mm can still see them
    mean_blobs: float = 3.0
    blob_radius_mm: tuple[float, float] = (2.5, 5.0)
    aorta_blob_fraction: float = 0.25
    risk_intercept: float = -3.0
    risk_slope: float = 0.006
    noise_std_hu: float = 20.0

    def __post_init__(self):
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        for name in ("air_hu", "lung_hu", "soft_tissue_hu", "fat_hu", "calcium_hu_range",
                     "body_semi_axes_mm", "lung_semi_axes_mm", "heart_radius_mm",
                     "aorta_radius_mm", "blob_radius_mm"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))

    @property
    def fov_mm(self) -> np.ndarray:
        return np.asarray(self.volume_shape) * np.asarray(self.spacing_mm)

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing_mm))

    def validate(self) -> None:
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 8:
            raise InvalidParams(f"volume_shape must be three extents >= 8, got {self.volume_shape}")
        if min(self.spacing_mm) <= 0:
            raise InvalidParams("spacing must be positive")
        stds = [self.air_hu[1], self.lung_hu[1], self.soft_tissue_hu[1], self.fat_hu[1], self.noise_std_hu]
        if min(stds) < 0:
            raise InvalidParams("standard deviations must be >= 0")
        lo, hi = self.calcium_hu_range
        if lo < CALCIUM_THRESHOLD_HU or hi < lo:
            raise InvalidParams(f"calcium HU range must satisfy {CALCIUM_THRESHOLD_HU} <= lo <= hi")
        if self.soft_tissue_hu[0] + 4 * self.soft_tissue_hu[1] >= CALCIUM_THRESHOLD_HU:
            raise InvalidParams("soft tissue HU overlaps the calcium threshold")
        if not 0.0 <= self.p_zero_calcium <= 1.0 or self.mean_blobs < 1.0:
            raise InvalidParams("blob count distribution needs p_zero in [0,1] and mean_blobs >= 1")
        for rng_pair in (self.heart_radius_mm, self.aorta_radius_mm, self.blob_radius_mm):
            if rng_pair[0] <= 0 or rng_pair[1] < rng_pair[0]:
                raise InvalidParams(f"bad radius range {rng_pair}")
        outer = self.heart_radius_mm[1] + self.fat_shell_mm
        if outer >= min(self.body_semi_axes_mm):
            raise InvalidParams("heart larger than body")
        half_fov = self.fov_mm / 2
        reach = outer + self.heart_center_jitter_mm + 3.0 * self.spacing_mm[0]
        if np.any(reach + np.abs(HEART_OFFSET_MM) >= half_fov):
            raise InvalidParams("heart does not fit inside the field of view")
        if np.any(np.asarray(self.body_semi_axes_mm) >= half_fov[:2]):
            raise InvalidParams("body does not fit inside the field of view")

    def risk(self, calcium_volume_mm3):
        return expit(self.risk_intercept + self.risk_slope * np.asarray(calcium_volume_mm3, dtype=float))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# nominal heart centre relative to the volume centre: slightly left and anterior
HEART_OFFSET_MM = np.array([-4.0, -5.0, 0.0])
AORTA_OFFSET_MM = np.array([5.0, 7.0])


@dataclass
class PhantomLayout:
    """Geometry and tissue masks of one phantom before intensities are drawn."""

    heart: np.ndarray  # bool, myocardium + epicardial fat
    calcium: np.ndarray  # bool
    calcium_hu: np.ndarray  # float, valid where calcium
    region: np.ndarray  # heart ∪ aorta, where calcium may sit
    hu_clean: np.ndarray
    blobs: list = field(default_factory=list)


def _grid(params: PhantomParams):
    axes = [(np.arange(n) + 0.5) * s - n * s / 2 for n, s in zip(params.volume_shape, params.spacing_mm)]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def _ellipsoid(coords, center, semi):
    return sum(((c - c0) / r) ** 2 for c, c0, r in zip(coords, center, semi)) <= 1.0


def _tight_bbox(mask: np.ndarray):
    out = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.flatnonzero(mask.any(axis=other))
        out.append((int(hit[0]), int(hit[-1]) + 1))
    return tuple(out)


def _layout(params: PhantomParams, rng: np.random.Generator, n_blobs: int | None = None) -> PhantomLayout:
    x, y, z = _grid(params)
    shape = params.volume_shape

    def tissue(pair):
        return pair[0] + pair[1] * rng.standard_normal()

    air, lung, soft, fat = (tissue(p) for p in (params.air_hu, params.lung_hu,
                                                params.soft_tissue_hu, params.fat_hu))
    hu = np.full(shape, air, dtype=np.float64)

    bx, by = params.body_semi_axes_mm
    body = np.broadcast_to((x / bx) ** 2 + (y / by) ** 2 <= 1.0, shape)
    hu[body] = soft

    lx, ly, lz = params.lung_semi_axes_mm
    lung_dx = bx * 0.48
    for side in (-1.0, 1.0):
        m = np.broadcast_to(_ellipsoid((x, y, z), (side * lung_dx, 1.0, 0.0), (lx, ly, lz)), shape) & body
        hu[m] = lung

    center = HEART_OFFSET_MM + rng.uniform(-1, 1, 3) * params.heart_center_jitter_mm
    semi = rng.uniform(*params.heart_radius_mm, size=3)
    outer = np.broadcast_to(_ellipsoid((x, y, z), center, semi + params.fat_shell_mm), shape)
    inner = np.broadcast_to(_ellipsoid((x, y, z), center, semi), shape)
    hu[outer] = fat
    hu[inner] = soft

    a_r = rng.uniform(*params.aorta_radius_mm)
    a_c = center[:2] + AORTA_OFFSET_MM
    aorta = np.broadcast_to(((x - a_c[0]) ** 2 + (y - a_c[1]) ** 2 <= a_r ** 2) & (z >= center[2]), shape)
    hu[aorta] = soft

    region = outer | aorta
    if n_blobs is None:
        n_blobs = 0 if rng.random() < params.p_zero_calcium else 1 + int(rng.poisson(params.mean_blobs - 1.0))
    calcium = np.zeros(shape, dtype=bool)
    calcium_hu = np.zeros(shape, dtype=np.float64)
    blobs = []
    z_top = center[2] + semi[2]
    for _ in range(n_blobs):
        r = rng.uniform(*params.blob_radius_mm)
        if rng.random() < params.aorta_blob_fraction:
            # aortic wall, within the heart's axial extent
            phi = rng.uniform(0, 2 * np.pi)
            rad = a_r * rng.uniform(0.6, 1.0)
            c = np.array([a_c[0] + rad * np.cos(phi), a_c[1] + rad * np.sin(phi),
                          rng.uniform(center[2], z_top)])
        else:
            # coronary-like: near the myocardial surface
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            c = center + d * semi * rng.uniform(0.75, 1.0)
        hu_blob = rng.uniform(*params.calcium_hu_range)
        m = np.broadcast_to(_ellipsoid((x, y, z), c, (r, r, r)), shape) & region
        calcium_hu[m & ~calcium] = hu_blob
        calcium |= m
        blobs.append({"center_mm": c.tolist(), "radius_mm": float(r), "hu": float(hu_blob)})
    hu[calcium] = calcium_hu[calcium]
    return PhantomLayout(heart=np.ascontiguousarray(outer), calcium=calcium, calcium_hu=calcium_hu,
                         region=np.ascontiguousarray(region), hu_clean=hu, blobs=blobs)


def generate_phantom(params: PhantomParams, seed: int, n_blobs: int | None = None):
    """Build one phantom volume and its ground truth; deterministic in ``(params, seed)``.

    ``n_blobs`` overrides the random blob count.
    """
    params.validate()
    rng = np.random.default_rng(int(seed))
    lay = _layout(params, rng, n_blobs)
    hu = lay.hu_clean
    if params.noise_std_hu > 0:
        hu = hu + params.noise_std_hu * rng.standard_normal(hu.shape)
    calcium_mm3 = float(lay.calcium.sum()) * params.voxel_volume_mm3
    truth = PhantomTruth(
        heart_bbox=_tight_bbox(lay.heart),
        calcium_volume_mm3=calcium_mm3,
        risk_probability=float(params.risk(calcium_mm3)),
        generator_seed=int(seed),
    )
    origin = tuple((0.5 - n / 2) * s for n, s in zip(params.volume_shape, params.spacing_mm))  # voxel-0 centre
    vol = VoxelVolume(hu.astype(np.float32), params.spacing_mm, origin, IntensitySpace.HU)
    return vol, truth


def phantom_layout(params: PhantomParams, seed: int, n_blobs: int | None = None) -> PhantomLayout:
    """Noise-free geometry for ``(params, seed)``, matching :func:`generate_phantom`."""
    params.validate()
    return _layout(params, np.random.default_rng(int(seed)), n_blobs)


def _subject(args):
    i, params, seed, out_dir = args
    sid = f"phantom_{i:04d}"
    gen_seed = child_seed(seed, i)
    vol, truth = generate_phantom(params, gen_seed)
    rel = f"volumes/{sid}.nii"
    save_volume(vol, Path(out_dir) / rel)
    u = child_rng(seed, i, "label").random()
    label = Label.NON_SURVIVOR if u < truth.risk_probability else Label.SURVIVOR
    return SubjectRecord(sid, rel, label, truth)


def generate_cohort(n: int, params: PhantomParams, seed: int, out_dir, jobs: int = 1,
                    manifest_name: str = "manifest.csv") -> CohortManifest:
    """Write ``n`` phantoms under ``out_dir/volumes`` plus ``out_dir/manifest.csv``."""
    if n < 2:
        raise InvalidParams("a cohort needs at least 2 subjects")
    params.validate()
    out_dir = Path(out_dir)
    try:
        (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UnwritablePath(str(exc)) from exc
    tasks = [(i, params, int(seed), str(out_dir)) for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            subjects = list(pool.map(_subject, tasks, chunksize=8))
    else:
        subjects = [_subject(t) for t in tasks]
    metadata = {
        "generator": "cardioscope.phantom",
        "generator_seed": str(int(seed)),
        "n_subjects": str(n),
        "phantom_params": json.dumps(params.to_dict(), sort_keys=True),
    }
    m = CohortManifest(subjects, metadata, out_dir)
    save_manifest(m, out_dir / manifest_name)
    s, p = m.counts()
    log.info("generated %d phantoms (%d survivors, %d non-survivors)", n, s, p)
    return m


def oracle_scores(manifest: CohortManifest) -> np.ndarray:
    """True risk probability of each subject, in manifest order."""
    return np.array([t.risk_probability for t in manifest.require_truth()])
