"""3D convolutional autoencoder with a 100-unit dense bottleneck.

Encoder: five 4x4x4 stride-2 convolutions, each followed by batch norm and
LeakyReLU, then flatten and a dense layer. Decoder: dense back to the
bottleneck grid, five (upsample x2, 3x3x3 conv, batch norm, LeakyReLU)
stages, and a 1x1x1 projection to one channel with a sigmoid.
"""
from __future__ import annotations

import hashlib
import io as _io
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfig, LengthMismatch, NonFiniteActivation, ShapeMismatch
from .io import IntensitySpace, VoxelVolume

N_STAGES = 5


class UpsampleMode(str, Enum):
    NEAREST = "NEAREST"
    TRILINEAR = "TRILINEAR"


class FinalActivation(str, Enum):
    SIGMOID = "SIGMOID"
    LINEAR = "LINEAR"


@dataclass
class CaeConfig:
    input_size: int = 128
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    encoding_dim: int = 100
    leaky_relu_alpha: float = 0.3
    decoder_channels: tuple[int, ...] | None = None  # None mirrors the encoder
    upsample_mode: UpsampleMode = UpsampleMode.NEAREST
    final_activation: FinalActivation = FinalActivation.SIGMOID
    bn_momentum: float = 0.01  # torch convention; running = 0.99 * running + 0.01 * batch

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if self.decoder_channels is None:
            self.decoder_channels = tuple(reversed(self.encoder_channels))
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.upsample_mode = UpsampleMode(self.upsample_mode)
        self.final_activation = FinalActivation(self.final_activation)

    def validate(self) -> None:
        if self.input_size < 2 ** N_STAGES or self.input_size % 2 ** N_STAGES:
            raise InvalidConfig(f"input_size must be a positive multiple of {2 ** N_STAGES}, got {self.input_size}")
        if len(self.encoder_channels) != N_STAGES or len(self.decoder_channels) != N_STAGES:
            raise InvalidConfig("encoder and decoder need exactly five channel widths each")
        if min(self.encoder_channels + self.decoder_channels) < 1:
            raise InvalidConfig("channel widths must be positive")
        if self.encoding_dim < 1:
            raise InvalidConfig("encoding_dim must be >= 1")
        if not 0.0 < self.leaky_relu_alpha < 1.0:
            raise InvalidConfig("leaky_relu_alpha must lie in (0, 1)")

    @property
    def bottleneck_grid(self) -> int:
        return self.input_size // 2 ** N_STAGES

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        d["upsample_mode"] = self.upsample_mode.value
        d["final_activation"] = self.final_activation.value
        return d


# Nearest x2 upsampling followed by a 3-tap "same" convolution equals a
# stride-2 transposed convolution with a 4-tap kernel [w+1, w0+w+1, w-1+w0, w-1]
# along each axis. Folding the 3x3x3 weight this way skips building the
# upsampled tensor.
_FOLD = torch.tensor([[0.0, 0.0, 1.0],
                      [0.0, 1.0, 1.0],
                      [1.0, 1.0, 0.0],
                      [1.0, 0.0, 0.0]])


def fold_upsample_kernel(weight: torch.Tensor) -> torch.Tensor:
    """(Co, Ci, 3, 3, 3) conv weight -> (Ci, Co, 4, 4, 4) transposed-conv weight."""
    f = _FOLD.to(weight)
    return torch.einsum("ai,bj,ck,oqijk->qoabc", f, f, f, weight)


class UpsampleConv3d(nn.Module):
    """Upsample x2 then 3x3x3 stride-1 convolution with same padding."""

    def __init__(self, in_channels, out_channels, mode=UpsampleMode.NEAREST, bias=False):
        super().__init__()
        conv = nn.Conv3d(in_channels, out_channels, 3, padding=1, bias=bias)
        self.weight = conv.weight
        self.bias = conv.bias
        self.mode = UpsampleMode(mode)

    def forward(self, x):
        if self.mode is UpsampleMode.NEAREST:
            return F.conv_transpose3d(x, fold_upsample_kernel(self.weight), self.bias, stride=2, padding=1)
        return self.reference(x)

    def reference(self, x):
        mode = "nearest" if self.mode is UpsampleMode.NEAREST else "trilinear"
        up = F.interpolate(x, scale_factor=2, mode=mode,
                           **({} if mode == "nearest" else {"align_corners": False}))
        return F.conv3d(up, self.weight, self.bias, padding=1)


class CaeModel(nn.Module):
    def __init__(self, cfg: CaeConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        alpha, mom = cfg.leaky_relu_alpha, cfg.bn_momentum
        layers, c = [], 1
        for o in cfg.encoder_channels:
            layers += [nn.Conv3d(c, o, 4, stride=2, padding=1, bias=False),
                       nn.BatchNorm3d(o, momentum=mom), nn.LeakyReLU(alpha)]
            c = o
        self.encoder = nn.Sequential(*layers)
        g = cfg.bottleneck_grid
        self._bottleneck_channels = c
        self.to_code = nn.Linear(c * g ** 3, cfg.encoding_dim)
        self.from_code = nn.Linear(cfg.encoding_dim, c * g ** 3)
        layers = []
        for o in cfg.decoder_channels:
            layers += [UpsampleConv3d(c, o, cfg.upsample_mode),
                       nn.BatchNorm3d(o, momentum=mom), nn.LeakyReLU(alpha)]
            c = o
        self.decoder = nn.Sequential(*layers)
        self.head = nn.Conv3d(c, 1, 1)
        self.register_buffer("step", torch.zeros((), dtype=torch.int64))

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        return self.to_code(self.encoder(x).flatten(1))

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        g = self.cfg.bottleneck_grid
        h = self.from_code(z).view(z.shape[0], self._bottleneck_channels, g, g, g)
        out = self.head(self.decoder(h))
        return torch.sigmoid(out) if self.cfg.final_activation is FinalActivation.SIGMOID else out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode_tensor(self.encode_tensor(x))

    def encoder_stage_shapes(self, x: torch.Tensor) -> list[tuple[int, ...]]:
        shapes = []
        for m in self.encoder:
            x = m(x)
            if isinstance(m, nn.LeakyReLU):
                shapes.append(tuple(x.shape[2:]))
        return shapes

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


@dataclass
class EncodingVector:
    values: np.ndarray
    subject_id: str = ""
    model_fingerprint: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)

    def __len__(self):
        return self.values.size


def build_cae(cfg: CaeConfig, seed: int = 0) -> CaeModel:
    """Seeded construction; same ``(cfg, seed)`` gives identical parameters."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        model = CaeModel(cfg)
    return model


def _check_input(m: CaeModel, v: VoxelVolume) -> torch.Tensor:
    n = m.cfg.input_size
    if v.shape != (n, n, n):
        raise ShapeMismatch(f"model expects {n}^3 input, got {v.shape}")
    if v.intensity_space is not IntensitySpace.UNIT:
        raise ShapeMismatch("model input must be a UNIT-space volume")
    return torch.from_numpy(np.ascontiguousarray(v.data, dtype=np.float32))[None, None]


@torch.no_grad()
def encode_batch(m: CaeModel, x: torch.Tensor) -> torch.Tensor:
    was_training = m.training
    m.eval()
    try:
        z = m.encode_tensor(x)
    finally:
        m.train(was_training)
    if not torch.isfinite(z).all():
        raise NonFiniteActivation("encoder produced non-finite values")
    return z


def encode(m: CaeModel, v: VoxelVolume, subject_id: str = "") -> EncodingVector:
    z = encode_batch(m, _check_input(m, v))
    return EncodingVector(z[0].double().numpy(), subject_id, m.fingerprint())


def _decode_values(m: CaeModel, z: torch.Tensor) -> torch.Tensor:
    was_training = m.training
    m.eval()
    try:
        with torch.no_grad():
            out = m.decode_tensor(z)
    finally:
        m.train(was_training)
    if not torch.isfinite(out).all():
        raise NonFiniteActivation("decoder produced non-finite values")
    return out


def decode(m: CaeModel, e: EncodingVector | np.ndarray) -> VoxelVolume:
    values = e.values if isinstance(e, EncodingVector) else np.asarray(e, dtype=np.float64).reshape(-1)
    if values.size != m.cfg.encoding_dim:
        raise LengthMismatch(f"encoding has {values.size} values, model expects {m.cfg.encoding_dim}")
    out = _decode_values(m, torch.from_numpy(values.astype(np.float32))[None])[0, 0].numpy()
    # a LINEAR head is unbounded; the volume type requires [0, 1]
    return VoxelVolume(np.clip(out, 0.0, 1.0), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), IntensitySpace.UNIT)


def reconstruct(m: CaeModel, v: VoxelVolume) -> VoxelVolume:
    z = encode_batch(m, _check_input(m, v))
    out = _decode_values(m, z)[0, 0].numpy()
    return VoxelVolume(np.clip(out, 0.0, 1.0), v.spacing, v.origin, IntensitySpace.UNIT)


@torch.no_grad()
def reconstruct_array(m: CaeModel, volumes: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Batched reconstruction of ``(n, S, S, S)`` unit arrays."""
    out = np.empty_like(volumes, dtype=np.float32)
    for i in range(0, len(volumes), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(volumes[i:i + batch_size], dtype=np.float32))[:, None]
        z = encode_batch(m, x)
        out[i:i + batch_size] = _decode_values(m, z)[:, 0].numpy()
    return out


# --------------------------------------------------------------------------
# checkpoints: state dict blob plus a JSON sidecar

def save_checkpoint(m: CaeModel, path, seed: int | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    buf = _io.BytesIO()
    torch.save(m.state_dict(), buf)
    path.write_bytes(buf.getvalue())
    side = {"config": m.cfg.to_dict(), "seed": seed, "step": int(m.step),
            "fingerprint": m.fingerprint(), "n_parameters": m.n_parameters, **(extra or {})}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> CaeModel:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    cfg = CaeConfig(**side["config"])
    m = CaeModel(cfg)
    m.load_state_dict(torch.load(path, weights_only=True))
    return m.eval()


def checkpoint_meta(path) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text())
