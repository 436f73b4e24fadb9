"""Reconstruction losses: voxel MSE, feature perceptual loss over axial slices, HU-scale MAE."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .errors import ExtractorUnavailable, ShapeMismatch
from .io import IntensitySpace, VoxelVolume
from .preprocess import HU_SCALE

# indices into torchvision's vgg16().features of the ReLU after each conv
VGG16_TAPS = {
    "relu1_1": 1, "relu1_2": 3,
    "relu2_1": 6, "relu2_2": 8,
    "relu3_1": 11, "relu3_2": 13, "relu3_3": 15,
    "relu4_1": 18, "relu4_2": 20, "relu4_3": 22,
}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class SliceSampling(str, Enum):
    ALL = "ALL"
    UNIFORM_RANDOM = "UNIFORM_RANDOM"


@dataclass
class FplConfig:
    tap_layers: tuple[str, ...] = ("relu1_2", "relu2_2", "relu3_3")
    layer_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    slices_per_step: int = 16
    slice_sampling: SliceSampling = SliceSampling.UNIFORM_RANDOM

    def __post_init__(self):
        self.tap_layers = tuple(self.tap_layers)
        self.layer_weights = tuple(float(w) for w in self.layer_weights)
        self.slice_sampling = SliceSampling(self.slice_sampling)
        unknown = [t for t in self.tap_layers if t not in VGG16_TAPS]
        if unknown:
            raise ValueError(f"unknown tap layers {unknown}")
        if len(self.layer_weights) != len(self.tap_layers):
            raise ValueError("one weight per tap layer")
        if min(self.layer_weights) < 0 or max(self.layer_weights) == 0:
            raise ValueError("layer weights must be non-negative and not all zero")
        if self.slices_per_step < 1:
            raise ValueError("slices_per_step must be >= 1")


class PerceptualExtractor(nn.Module):
    """Frozen VGG16 trunk up to the deepest requested tap.

    Slices in [0, 1] are replicated to three channels and standardized with
    the ImageNet channel statistics before entering the network.
    """

    def __init__(self, tap_layers=("relu1_2", "relu2_2", "relu3_3"), provenance: str = "uninitialized"):
        super().__init__()
        self.tap_layers = tuple(tap_layers)
        self.tap_index = [VGG16_TAPS[t] for t in self.tap_layers]
        trunk = torchvision.models.vgg16(weights=None).features[: max(self.tap_index) + 1]
        for m in trunk:
            if isinstance(m, nn.ReLU):
                m.inplace = False
        self.features = trunk
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.provenance = provenance

    def freeze(self) -> "PerceptualExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    @classmethod
    def fallback(cls, seed: int = 0, tap_layers=("relu1_2", "relu2_2", "relu3_3")) -> "PerceptualExtractor":
        """Deterministic stand-in with seeded random weights (no download needed)."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(seed))
            ex = cls(tap_layers, provenance=f"fallback:seeded-random:{int(seed)}")
        return ex.freeze()

    @classmethod
    def pretrained(cls, path, tap_layers=("relu1_2", "relu2_2", "relu3_3")) -> "PerceptualExtractor":
        """Load ImageNet VGG16 weights from a local torchvision state-dict file."""
        path = Path(path) if path else None
        if path is None or not path.is_file():
            raise ExtractorUnavailable(f"pretrained VGG16 weights not found at {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        ex = cls(tap_layers, provenance=f"pretrained:{path.name}")
        own = ex.features.state_dict()
        picked = {}
        for k in own:
            for src in (f"features.{k}", k):
                if src in state:
                    picked[k] = state[src]
                    break
            else:
                raise ExtractorUnavailable(f"{path} lacks parameter {k!r}")
        ex.features.load_state_dict(picked)
        return ex.freeze()

    def prepare(self, slices: torch.Tensor) -> torch.Tensor:
        return (slices.expand(-1, 3, -1, -1) - self.mean) / self.std

    def forward(self, slices: torch.Tensor) -> list[torch.Tensor]:
        """(B, 1, H, W) unit-range slices -> feature maps at each tap."""
        h = self.prepare(slices)
        out, want = [], set(self.tap_index)
        for i, m in enumerate(self.features):
            h = m(h)
            if i in want:
                out.append(h)
        return out


def load_extractor(path=None, fallback_seed: int = 0, allow_fallback: bool = True,
                   tap_layers=("relu1_2", "relu2_2", "relu3_3")) -> PerceptualExtractor:
    try:
        return PerceptualExtractor.pretrained(path, tap_layers)
    except ExtractorUnavailable:
        if not allow_fallback:
            raise
        return PerceptualExtractor.fallback(fallback_seed, tap_layers)


def _as_tensor(v, dtype=None) -> torch.Tensor:
    if isinstance(v, VoxelVolume):
        v = v.data
    t = v if isinstance(v, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(v))
    if t.dim() == 3:
        t = t[None, None]
    return t if dtype is None else t.to(dtype)


def _check_shapes(x, y):
    if tuple(x.shape) != tuple(y.shape):
        raise ShapeMismatch(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def mse_loss(x, y) -> torch.Tensor:
    """Mean of squared voxel differences (0-dim tensor)."""
    x, y = _as_tensor(x), _as_tensor(y)
    _check_shapes(x, y)
    return torch.mean((x - y) ** 2)


def select_slices(depth: int, cfg: FplConfig, rng: np.random.Generator | None) -> np.ndarray:
    if cfg.slice_sampling is SliceSampling.ALL or cfg.slices_per_step >= depth:
        return np.arange(depth)
    rng = rng if rng is not None else np.random.default_rng(0)
    return np.sort(rng.choice(depth, size=cfg.slices_per_step, replace=False))


def _axial_stack(t: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    # (N, 1, X, Y, Z) -> (N*k, 1, X, Y) for the chosen z indices
    s = t.index_select(4, idx)
    return s.permute(0, 4, 1, 2, 3).reshape(-1, 1, t.shape[2], t.shape[3])


def feature_perceptual_loss(x, y, ex: PerceptualExtractor, cfg: FplConfig | None = None,
                            rng: np.random.Generator | None = None, slice_indices=None) -> torch.Tensor:
    """Weighted sum over taps of the feature-map MSE between axial slices of ``x`` and ``y``.

    The same slice indices are used for both volumes; ``slice_indices``
    overrides the sampling policy.
    """
    cfg = cfg or FplConfig()
    dtype = next(ex.parameters()).dtype
    x, y = _as_tensor(x, dtype), _as_tensor(y, dtype)
    _check_shapes(x, y)
    if slice_indices is None:
        slice_indices = select_slices(x.shape[-1], cfg, rng)
    idx = torch.as_tensor(np.asarray(slice_indices), dtype=torch.long)
    fx = ex(_axial_stack(x, idx))
    fy = ex(_axial_stack(y, idx))
    weights = dict(zip(cfg.tap_layers, cfg.layer_weights))
    total = x.new_zeros(())
    for name, a, b in zip(ex.tap_layers, fx, fy):
        w = weights.get(name, 0.0)
        if w:
            total = total + w * F.mse_loss(a, b)
    return total


def hu_mae(x, y) -> float:
    """Mean absolute difference of two unit-space volumes, in HU."""
    for v in (x, y):
        if isinstance(v, VoxelVolume) and v.intensity_space is not IntensitySpace.UNIT:
            raise ValueError("hu_mae expects UNIT-space volumes")
    a = x.data if isinstance(x, VoxelVolume) else x
    b = y.data if isinstance(y, VoxelVolume) else y
    a = a.detach().cpu().numpy() if isinstance(a, torch.Tensor) else np.asarray(a)
    b = b.detach().cpu().numpy() if isinstance(b, torch.Tensor) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a.astype(np.float64) - b.astype(np.float64)))) * HU_SCALE
