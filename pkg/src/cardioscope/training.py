"""Autoencoder training loop, rotation augmentation and cohort encoding."""
from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import torch
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .cae import CaeModel, encode_batch, reconstruct_array, save_checkpoint
from .errors import EmptyCohort, NonFiniteLoss, ShapeMismatch
from .io import CohortManifest, IntensitySpace, VoxelVolume, load_volume
from .losses import FplConfig, PerceptualExtractor, feature_perceptual_loss, hu_mae, mse_loss

log = logging.getLogger(__name__)


class LossKind(str, Enum):
    MSE = "MSE"
    FPL = "FPL"


@dataclass
class CaeTrainConfig:
    iterations: int = 100_000
    batch_size: int = 2
    learning_rate: float = 1e-3
    loss: LossKind = LossKind.FPL
    rotation_sigma_deg: float = 10.0
    seed: int = 0
    checkpoint_every: int = 10_000
    validation_every: int = 1_000
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.loss = LossKind(self.loss)
        self.betas = tuple(float(b) for b in self.betas)
        for name in ("iterations", "batch_size", "checkpoint_every", "validation_every"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.rotation_sigma_deg < 0:
            raise ValueError("rotation_sigma_deg must be >= 0")


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotate about x, then y, then z (extrinsic, array axes 0, 1, 2)."""
    return Rotation.from_euler("xyz", angles_deg, degrees=True).as_matrix()


def rotate_volume(data: np.ndarray, angles_deg) -> np.ndarray:
    if not np.any(angles_deg):
        return data.copy()
    r = rotation_matrix(angles_deg)
    centre = (np.asarray(data.shape) - 1) / 2.0
    # affine_transform maps output coords to input coords: in = R^T (out - c) + c
    inv = r.T
    offset = centre - inv @ centre
    return ndimage.affine_transform(data, inv, offset=offset, order=1, mode="constant", cval=0.0)


def augment_rotate(v, rng: np.random.Generator, sigma_deg: float = 10.0):
    """Random rotation about the volume centre, angles ~ N(0, sigma²) per axis.

    Accepts a :class:`VoxelVolume` or a bare array and returns the same kind.
    """
    angles = rng.normal(0.0, sigma_deg, size=3) if sigma_deg > 0 else np.zeros(3)
    if isinstance(v, VoxelVolume):
        out = rotate_volume(v.data, angles)
        if v.intensity_space is IntensitySpace.UNIT:
            out = np.clip(out, 0.0, 1.0)
        return v.replace(data=out)
    return rotate_volume(np.asarray(v), angles)


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    val_hu_mae: dict[int, float] = field(default_factory=dict)

    def window_means(self, frac: float = 0.1) -> tuple[float, float]:
        k = max(1, int(len(self.loss) * frac))
        return float(np.mean(self.loss[:k])), float(np.mean(self.loss[-k:]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "val_hu_mae"])
            for i, l in enumerate(self.loss, start=1):
                val = self.val_hu_mae.get(i)
                w.writerow([i, repr(l), "" if val is None else repr(val)])

    def digest(self) -> dict:
        first, last = self.window_means() if self.loss else (None, None)
        return {"steps": len(self.loss), "first_window_loss": first, "last_window_loss": last,
                "val_hu_mae": {str(k): v for k, v in self.val_hu_mae.items()}}


def stack_volumes(volumes, size: int | None = None) -> np.ndarray:
    """Collect unit volumes from a manifest, a mapping or a sequence into one array."""
    if isinstance(volumes, CohortManifest):
        volumes = [load_volume(volumes.resolve(s)) for s in volumes.subjects]
    elif isinstance(volumes, Mapping):
        volumes = list(volumes.values())
    if isinstance(volumes, np.ndarray) and volumes.ndim == 4:
        arr = volumes.astype(np.float32, copy=False)
    else:
        arr = np.stack([np.asarray(v.data if isinstance(v, VoxelVolume) else v, dtype=np.float32)
                        for v in volumes]) if len(volumes) else np.empty((0, 0, 0, 0), np.float32)
    if size is not None and len(arr) and arr.shape[1:] != (size, size, size):
        raise ShapeMismatch(f"training volumes have shape {arr.shape[1:]}, model expects {size}^3")
    return arr


def validation_hu_mae(model: CaeModel, volumes: np.ndarray) -> float:
    recon = reconstruct_array(model, volumes)
    return float(np.mean([hu_mae(a, b) for a, b in zip(volumes, recon)]))


def train_cae(model: CaeModel, volumes, cfg: CaeTrainConfig, val_volumes=None,
              extractor: PerceptualExtractor | None = None, fpl_cfg: FplConfig | None = None,
              checkpoint_dir=None) -> tuple[CaeModel, TrainHistory]:
    """Adam on batches drawn uniformly with replacement, rotated on the fly.

    A non-finite loss restores the last good parameters and raises
    :class:`NonFiniteLoss`.
    """
    train = stack_volumes(volumes, model.cfg.input_size)
    if len(train) == 0:
        raise EmptyCohort("no training volumes")
    val = stack_volumes(val_volumes, model.cfg.input_size) if val_volumes is not None else None
    if cfg.loss is LossKind.FPL and extractor is None:
        raise ValueError("FPL training needs a perceptual extractor")
    fpl_cfg = fpl_cfg or FplConfig()

    rng = np.random.default_rng(int(cfg.seed))
    torch.manual_seed(int(cfg.seed))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    hist = TrainHistory()
    good_state = copy.deepcopy(model.state_dict())
    good_ckpt = None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    model.train()
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, len(train), size=cfg.batch_size)
        batch = np.stack([augment_rotate(train[i], rng, cfg.rotation_sigma_deg) for i in idx])
        x = torch.from_numpy(np.clip(batch, 0.0, 1.0).astype(np.float32))[:, None]
        recon = model(x)
        if cfg.loss is LossKind.MSE:
            loss = mse_loss(x, recon)
        else:
            loss = feature_perceptual_loss(x, recon, extractor, fpl_cfg, rng)
        if not torch.isfinite(loss):
            model.load_state_dict(good_state)
            raise NonFiniteLoss(it, good_ckpt)
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.step += 1
        hist.loss.append(loss.item())

        if val is not None and len(val) and it % cfg.validation_every == 0:
            hist.val_hu_mae[it] = validation_hu_mae(model, val)
            log.info("step %d loss %.5f val_hu_mae %.2f", it, hist.loss[-1], hist.val_hu_mae[it])
        if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
            good_state = copy.deepcopy(model.state_dict())
            if ckpt_dir:
                good_ckpt = save_checkpoint(model, ckpt_dir / f"cae_step{it:07d}.pt", cfg.seed,
                                            {"history": hist.digest()})
    model.eval()
    return model, hist


def encode_cohort(model: CaeModel, manifest: CohortManifest, volumes: Mapping[str, np.ndarray] | None = None,
                  batch_size: int = 8) -> pd.DataFrame:
    """Table with columns ``subject_id, label, e0..e{d-1}``, one row per subject.

    Subjects whose volume does not fit the model are logged and make the call fail.
    """
    n = model.cfg.input_size
    ids, arrays, skipped = [], [], []
    for s in manifest.subjects:
        if volumes is not None:
            data = np.asarray(volumes[s.subject_id], dtype=np.float32)
        else:
            data = load_volume(manifest.resolve(s)).data.astype(np.float32)
        if data.shape != (n, n, n):
            skipped.append(s.subject_id)
            log.error("subject %s has shape %s, expected %d^3", s.subject_id, data.shape, n)
            continue
        ids.append(s.subject_id)
        arrays.append(data)
    if skipped:
        raise ShapeMismatch(f"{len(skipped)} subject(s) could not be encoded: {skipped[:5]}")
    codes = []
    for i in range(0, len(arrays), batch_size):
        x = torch.from_numpy(np.stack(arrays[i:i + batch_size]))[:, None]
        codes.append(encode_batch(model, x).double().numpy())
    z = np.concatenate(codes) if codes else np.empty((0, model.cfg.encoding_dim))
    table = pd.DataFrame(z, columns=[f"e{k}" for k in range(z.shape[1])])
    by_id = manifest.by_id()
    table.insert(0, "label", [by_id[i].label.value for i in ids])
    table.insert(0, "subject_id", ids)
    table.attrs["model_fingerprint"] = model.fingerprint()
    return table


def save_encodings(table: pd.DataFrame, path) -> None:
    path = Path(path)
    table.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
    side = {"model_fingerprint": table.attrs.get("model_fingerprint", ""), "n_subjects": len(table),
            "encoding_dim": sum(c.startswith("e") and c[1:].isdigit() for c in table.columns)}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def load_encodings(path) -> pd.DataFrame:
    path = Path(path)
    table = pd.read_csv(path, dtype={"subject_id": str, "label": str})
    side_path = path.with_suffix(".json")
    if side_path.is_file():
        table.attrs["model_fingerprint"] = json.loads(side_path.read_text()).get("model_fingerprint", "")
    return table


def encoding_matrix(table: pd.DataFrame) -> tuple[np.ndarray, np.ndarray]:
    cols = [c for c in table.columns if c.startswith("e") and c[1:].isdigit()]
    y = (table["label"] == "NON_SURVIVOR").to_numpy().astype(np.int64)
    return table[cols].to_numpy(dtype=np.float64), y
