"""Heart bounding box from per-axis slice classification.

A small 2D CNN scores every slice along one axis for heart presence. The
three per-axis probability profiles are reduced to the longest run above a
threshold, widened by a margin and clamped to the volume.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AxisExtentZero, BBoxOutOfRange, EmptyCohort, MissingTruth, NoPositiveSlices
from .io import CohortManifest, IntensitySpace, VoxelVolume, load_volume

log = logging.getLogger(__name__)


class Axis(str, Enum):
    """Slice orientation; the value is the array axis the slices are stacked along."""

    AXIAL = "AXIAL"
    CORONAL = "CORONAL"
    SAGITTAL = "SAGITTAL"

    @property
    def dim(self) -> int:
        return {"SAGITTAL": 0, "CORONAL": 1, "AXIAL": 2}[self.value]


@dataclass(frozen=True)
class BBox3D:
    ranges: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]
    margin_vox: int = 0

    def __post_init__(self):
        ranges = tuple((int(a), int(b)) for a, b in self.ranges)
        if len(ranges) != 3 or any(b <= a for a, b in ranges):
            raise ValueError(f"bbox needs positive extent on every axis, got {ranges}")
        if self.margin_vox < 0:
            raise ValueError("margin must be non-negative")
        object.__setattr__(self, "ranges", ranges)

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in self.ranges)

    @property
    def volume(self) -> int:
        return int(np.prod(self.extent))

    def expand(self, margin: int, shape) -> "BBox3D":
        ranges = tuple((max(0, a - margin), min(n, b + margin)) for (a, b), n in zip(self.ranges, shape))
        return BBox3D(ranges, self.margin_vox + margin)

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in self.ranges)


def bbox_iou(a: BBox3D, b: BBox3D) -> float:
    inter = 1
    for (a0, a1), (b0, b1) in zip(a.ranges, b.ranges):
        inter *= max(0, min(a1, b1) - max(a0, b0))
    return inter / (a.volume + b.volume - inter)


def longest_run(p, threshold: float) -> tuple[int, int] | None:
    """Half-open range of the longest run with ``p >= threshold``; earliest wins ties."""
    best, start, best_len = None, None, 0
    for i, above in enumerate(np.asarray(p) >= threshold):
        if above and start is None:
            start = i
        if not above and start is not None:
            if i - start > best_len:
                best, best_len = (start, i), i - start
            start = None
    if start is not None and len(p) - start > best_len:
        best = (start, len(p))
    return best


def combine_to_bbox(p_ax, p_cor, p_sag, threshold: float = 0.5, margin_vox: int = 5) -> BBox3D:
    """Per-axis longest supra-threshold run, expanded by ``margin_vox`` and clamped."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    per_dim = {Axis.SAGITTAL: p_sag, Axis.CORONAL: p_cor, Axis.AXIAL: p_ax}
    ranges, shape = [], []
    for axis in (Axis.SAGITTAL, Axis.CORONAL, Axis.AXIAL):
        p = np.asarray(per_dim[axis], dtype=float)
        if p.size == 0:
            raise AxisExtentZero(f"empty probability sequence for {axis.value}")
        run = longest_run(p, threshold)
        if run is None:
            raise NoPositiveSlices(axis.value)
        ranges.append(run)
        shape.append(p.size)
    return BBox3D(tuple(ranges)).expand(int(margin_vox), shape)


def crop_heart(v: VoxelVolume, b: BBox3D) -> VoxelVolume:
    if any(a < 0 or e > n for (a, e), n in zip(b.ranges, v.shape)):
        raise BBoxOutOfRange(f"bbox {b.ranges} exceeds volume shape {v.shape}")
    origin = tuple(o + a * s for o, (a, _), s in zip(v.origin, b.ranges, v.spacing))
    return VoxelVolume(v.data[b.slices()].copy(), v.spacing, origin, v.intensity_space)


def center_fallback_bbox(shape) -> BBox3D:
    ranges = []
    for n in shape:
        half = max(1, n // 2)
        a = (n - half) // 2
        ranges.append((a, a + half))
    return BBox3D(tuple(ranges))


# --------------------------------------------------------------------------
# slice classifier

class SliceNet(nn.Module):
    def __init__(self, channels=(16, 32, 64)):
        super().__init__()
        layers, c = [], 1
        for o in channels:
            layers += [nn.Conv2d(c, o, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(o), nn.ReLU(inplace=True)]
            c = o
        self.features = nn.Sequential(*layers)
        self.out = nn.Linear(c, 1)

    def forward(self, x):
        return self.out(self.features(x).mean(dim=(2, 3))).squeeze(1)


def _to_slices(data: np.ndarray, axis: Axis, size: int) -> torch.Tensor:
    """(n_slices, 1, size, size) float tensor of HU/1000 clipped to [-1, 1]."""
    arr = np.moveaxis(np.asarray(data, dtype=np.float32), axis.dim, 0)
    t = torch.from_numpy(np.clip(arr, -1000.0, 1000.0) / 1000.0).unsqueeze(1)
    if t.shape[-2:] != (size, size):
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return t.contiguous()


@dataclass
class LocatorTrainConfig:
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    input_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64)
    seed: int = 0


@dataclass
class SliceClassifier:
    net: SliceNet
    axis: Axis
    input_size: int = 64
    meta: dict = field(default_factory=dict)

    @torch.no_grad()
    def predict(self, slices: torch.Tensor) -> np.ndarray:
        self.net.eval()
        return torch.sigmoid(self.net(slices)).double().numpy()

    def save(self, path) -> None:
        path = Path(path)
        torch.save(self.net.state_dict(), path)
        side = {"axis": self.axis.value, "input_size": self.input_size,
                "architecture": {"kind": "SliceNet", "channels": list(self.meta.get("channels", (16, 32, 64)))},
                **{k: v for k, v in self.meta.items() if k != "channels"}}
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SliceClassifier":
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        channels = tuple(side["architecture"]["channels"])
        net = SliceNet(channels)
        net.load_state_dict(torch.load(path, weights_only=True))
        meta = {k: v for k, v in side.items() if k not in ("axis", "input_size", "architecture")}
        meta["channels"] = channels
        return cls(net.eval(), Axis(side["axis"]), side["input_size"], meta)


def classify_slices(v: VoxelVolume, c: SliceClassifier) -> np.ndarray:
    """Heart-presence probability for every slice of ``v`` along ``c.axis``."""
    if v.intensity_space is not IntensitySpace.HU:
        raise ValueError("slice classification expects an HU volume")
    if v.shape[c.axis.dim] == 0:
        raise AxisExtentZero(c.axis.value)
    return c.predict(_to_slices(v.data, c.axis, c.input_size))


def _training_pairs(samples) -> tuple[list[np.ndarray], list]:
    if isinstance(samples, CohortManifest):
        truths = samples.require_truth()
        vols = [load_volume(samples.resolve(s)).data for s in samples.subjects]
        return vols, [t.heart_bbox for t in truths]
    vols, boxes = [], []
    for v, b in samples:
        if b is None:
            raise MissingTruth("training sample without heart bbox")
        vols.append(v.data if isinstance(v, VoxelVolume) else np.asarray(v))
        boxes.append(b.ranges if isinstance(b, BBox3D) else b)
    return vols, boxes


def _slice_set(vols, boxes, axis: Axis, size: int):
    xs, ys = [], []
    for data, box in zip(vols, boxes):
        s = _to_slices(data, axis, size)
        lo, hi = box[axis.dim]
        idx = torch.arange(s.shape[0])
        xs.append(s)
        ys.append(((idx >= lo) & (idx < hi)).float())
    return torch.cat(xs), torch.cat(ys)


def train_slice_classifier(samples: CohortManifest | Sequence, axis: Axis,
                           cfg: LocatorTrainConfig | None = None, validation=None) -> SliceClassifier:
    """Fit a heart-presence classifier for one axis.

    ``samples`` is a manifest with phantom truth or a sequence of
    ``(volume, bbox)`` pairs; slice labels come from the truth box.
    """
    cfg = cfg or LocatorTrainConfig()
    axis = Axis(axis)
    if len(samples) < 2:
        raise EmptyCohort("slice classifier training needs at least 2 subjects")
    vols, boxes = _training_pairs(samples)
    x, y = _slice_set(vols, boxes, axis, cfg.input_size)

    gen = torch.Generator().manual_seed(int(cfg.seed))
    with torch.random.fork_rng():
        torch.manual_seed(int(cfg.seed))
        net = SliceNet(tuple(cfg.channels))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    pos_frac = float(y.mean())
    pos_weight = torch.tensor((1.0 - pos_frac) / max(pos_frac, 1e-6))
    net.train()
    losses = []
    for _ in range(cfg.steps):
        idx = torch.randint(0, x.shape[0], (cfg.batch_size,), generator=gen)
        xb = x[idx]
        # mild intensity jitter keeps the net from keying on exact tissue HU
        xb = xb + 0.02 * torch.randn(xb.shape, generator=gen)
        loss = F.binary_cross_entropy_with_logits(net(xb), y[idx], pos_weight=pos_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    clf = SliceClassifier(net.eval(), axis, cfg.input_size,
                          {"channels": tuple(cfg.channels), "seed": int(cfg.seed), "steps": int(cfg.steps),
                           "final_loss": float(np.mean(losses[-50:])) if losses else None})
    if validation is not None:
        clf.meta["val_accuracy"] = slice_accuracy(clf, validation)
    return clf


def slice_accuracy(clf: SliceClassifier, samples) -> float:
    vols, boxes = _training_pairs(samples)
    x, y = _slice_set(vols, boxes, clf.axis, clf.input_size)
    p = clf.predict(x)
    return float(np.mean((p >= 0.5) == y.numpy().astype(bool)))


# --------------------------------------------------------------------------
# three-axis locator

@dataclass
class HeartLocator:
    axial: SliceClassifier
    coronal: SliceClassifier
    sagittal: SliceClassifier
    threshold: float = 0.5
    margin_vox: int = 5

    def probabilities(self, v: VoxelVolume):
        return (classify_slices(v, self.axial), classify_slices(v, self.coronal),
                classify_slices(v, self.sagittal))

    def locate(self, v: VoxelVolume, margin_vox: int | None = None) -> tuple[BBox3D, list[str]]:
        """Bounding box plus warnings; falls back to a centred half-size box."""
        margin = self.margin_vox if margin_vox is None else margin_vox
        try:
            return combine_to_bbox(*self.probabilities(v), self.threshold, margin), []
        except NoPositiveSlices as exc:
            log.warning("no heart slices found (%s); using centred fallback box", exc)
            return center_fallback_bbox(v.shape), [f"fallback bbox: {exc}"]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for clf in (self.axial, self.coronal, self.sagittal):
            clf.save(directory / f"slice_{clf.axis.value.lower()}.pt")
        (directory / "locator.json").write_text(json.dumps(
            {"threshold": self.threshold, "margin_vox": self.margin_vox}, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "HeartLocator":
        directory = Path(directory)
        side = json.loads((directory / "locator.json").read_text())
        clfs = {a: SliceClassifier.load(directory / f"slice_{a.value.lower()}.pt") for a in Axis}
        return cls(clfs[Axis.AXIAL], clfs[Axis.CORONAL], clfs[Axis.SAGITTAL],
                   side["threshold"], side["margin_vox"])


def train_locator(samples, cfg: LocatorTrainConfig | None = None, threshold: float = 0.5,
                  margin_vox: int = 5) -> HeartLocator:
    cfg = cfg or LocatorTrainConfig()
    pairs = samples
    if isinstance(samples, CohortManifest):
        vols, boxes = _training_pairs(samples)
        pairs = list(zip(vols, boxes))
    clfs = {}
    for i, axis in enumerate((Axis.AXIAL, Axis.CORONAL, Axis.SAGITTAL)):
        sub = LocatorTrainConfig(**{**asdict(cfg), "seed": cfg.seed + i})
        clfs[axis] = train_slice_classifier(pairs, axis, sub)
        log.info("trained %s slice classifier (final loss %.4f)", axis.value, clfs[axis].meta["final_loss"])
    return HeartLocator(clfs[Axis.AXIAL], clfs[Axis.CORONAL], clfs[Axis.SAGITTAL], threshold, margin_vox)
