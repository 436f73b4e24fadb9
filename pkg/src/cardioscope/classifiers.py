"""Survivor / non-survivor classifiers on CAE encodings.

All three expose one score contract: a finite scalar per subject, larger
meaning more likely NON_SURVIVOR (label 1).
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import pickle
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.ensemble import RandomForestClassifier
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC

from .errors import EmptyGrid, NonFiniteLoss, SingleClassTraining, WidthMismatch

log = logging.getLogger(__name__)


class Kind(str, Enum):
    SVM = "SVM"
    RFC = "RFC"
    NN = "NN"


@dataclass
class SvmConfig:
    gamma: float = 1e-4
    c: float = 100.0
    kernel: str = "rbf"
    standardize: bool = True

    def __post_init__(self):
        if self.gamma <= 0 or self.c <= 0:
            raise ValueError("SVM gamma and c must be positive")


@dataclass
class RfcConfig:
    n_trees: int = 75
    max_depth: int | None = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")


@dataclass
class NnConfig:
    hidden_units: int = 6
    output_units: int = 2
    dropout_p: float = 0.5
    learning_rate: float = 1e-4
    iterations: int = 25_000
    batch_size: int = 100
    leaky_relu_alpha: float = 0.3
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even for exact class balance")


@dataclass
class TrainedClassifier:
    kind: Kind
    model: object
    config: object
    fingerprint: str
    width: int
    scaler: StandardScaler | None = None
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "wb") as fh:
            pickle.dump(self, fh)
        side = {"kind": self.kind.value, "config": asdict(self.config), "width": self.width,
                "training_fingerprint": self.fingerprint, **self.meta}
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True, default=str) + "\n")

    @staticmethod
    def load(path) -> "TrainedClassifier":
        with open(path, "rb") as fh:
            return pickle.load(fh)


def _fingerprint(x: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256(np.ascontiguousarray(x, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(y, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


def _check_xy(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError(f"expected (n, d) encodings with n labels, got {x.shape} and {y.shape}")
    if len(np.unique(y)) < 2:
        raise SingleClassTraining("training labels contain a single class")
    return x, y


def _scale(x, standardize):
    if not standardize:
        return x, None
    scaler = StandardScaler().fit(x)
    return scaler.transform(x), scaler


def train_svm(encodings, labels, cfg: SvmConfig | None = None) -> TrainedClassifier:
    cfg = cfg or SvmConfig()
    x, y = _check_xy(encodings, labels)
    xs, scaler = _scale(x, cfg.standardize)
    svc = SVC(kernel=cfg.kernel, gamma=cfg.gamma, C=cfg.c).fit(xs, y)
    return TrainedClassifier(Kind.SVM, svc, cfg, _fingerprint(x, y), x.shape[1], scaler)


def train_rfc(encodings, labels, cfg: RfcConfig | None = None) -> TrainedClassifier:
    cfg = cfg or RfcConfig()
    x, y = _check_xy(encodings, labels)
    rf = RandomForestClassifier(n_estimators=cfg.n_trees, max_depth=cfg.max_depth, criterion="gini",
                                bootstrap=cfg.bootstrap, random_state=cfg.seed, n_jobs=1).fit(x, y)
    return TrainedClassifier(Kind.RFC, rf, cfg, _fingerprint(x, y), x.shape[1])


class MortalityNet(nn.Module):
    def __init__(self, width: int, cfg: NnConfig):
        super().__init__()
        self.hidden = nn.Linear(width, cfg.hidden_units)
        self.act = nn.LeakyReLU(cfg.leaky_relu_alpha)
        self.drop = nn.Dropout(cfg.dropout_p)
        self.out = nn.Linear(cfg.hidden_units, cfg.output_units)

    def forward(self, x):
        return self.out(self.drop(self.act(self.hidden(x))))


class BalancedBatchSampler:
    """Index batches with exactly ``batch_size / 2`` members of each class.

    Each class is drawn without replacement when it has enough members and
    with replacement otherwise.
    """

    def __init__(self, labels, batch_size: int, rng: np.random.Generator):
        labels = np.asarray(labels)
        self.pos = np.flatnonzero(labels == 1)
        self.neg = np.flatnonzero(labels == 0)
        if not len(self.pos) or not len(self.neg):
            raise SingleClassTraining("balanced batches need both classes")
        self.half = batch_size // 2
        self.rng = rng

    def _draw(self, pool):
        return self.rng.choice(pool, size=self.half, replace=len(pool) < self.half)

    def __call__(self) -> np.ndarray:
        return np.concatenate([self._draw(self.neg), self._draw(self.pos)])


def train_nn(encodings, labels, cfg: NnConfig | None = None, on_batch=None) -> TrainedClassifier:
    """Two-layer softmax net trained with Adam on class-balanced batches.

    ``on_batch(indices)`` is called with every batch, for instrumentation.
    """
    cfg = cfg or NnConfig()
    x, y = _check_xy(encodings, labels)
    xs, scaler = _scale(x, cfg.standardize)
    rng = np.random.default_rng(cfg.seed)
    sampler = BalancedBatchSampler(y, cfg.batch_size, rng)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = MortalityNet(x.shape[1], cfg)
        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
        xt = torch.from_numpy(xs.astype(np.float32))
        yt = torch.from_numpy(y)
        net.train()
        for it in range(cfg.iterations):
            idx = sampler()
            if on_batch is not None:
                on_batch(idx)
            ti = torch.from_numpy(idx)
            loss = F.cross_entropy(net(xt[ti]), yt[ti])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(it + 1)
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    return TrainedClassifier(Kind.NN, net, cfg, _fingerprint(x, y), x.shape[1], scaler,
                             {"final_loss": loss.item() if cfg.iterations else None})


TRAINERS = {Kind.SVM: train_svm, Kind.RFC: train_rfc, Kind.NN: train_nn}


def nn_probabilities(model: TrainedClassifier, encodings) -> np.ndarray:
    x = _prepare(model, encodings)
    with torch.no_grad():
        return torch.softmax(model.model(torch.from_numpy(x.astype(np.float32))), dim=1).double().numpy()


def _prepare(model: TrainedClassifier, encodings) -> np.ndarray:
    x = np.asarray(encodings, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.shape[1] != model.width:
        raise WidthMismatch(f"model trained on width {model.width}, got {x.shape[1]}")
    return model.scaler.transform(x) if model.scaler is not None else x


def predict_scores(model: TrainedClassifier, encodings) -> np.ndarray:
    """One score per row; larger means more likely NON_SURVIVOR."""
    x = _prepare(model, encodings)
    if model.kind is Kind.SVM:
        return model.model.decision_function(x).astype(np.float64)
    if model.kind is Kind.RFC:
        # vote fraction; forest trees predict encoded class indices
        votes = np.stack([t.predict(x) for t in model.model.estimators_])
        return (votes == 1).mean(axis=0)
    model.model.eval()
    return nn_probabilities(model, encodings)[:, 1]


# --------------------------------------------------------------------------
# grid search

DEFAULT_SVM_GRID = {"gamma": [1e-5, 1e-4, 1e-3, 1e-2], "c": [1.0, 10.0, 100.0, 1000.0]}
DEFAULT_RFC_GRID = {"n_trees": [25, 50, 75, 100, 150]}


def _tie_key(kind: Kind, params: dict):
    if kind is Kind.SVM:
        return (params.get("c", 0.0), params.get("gamma", 0.0))
    depth = params.get("max_depth")
    return (params.get("n_trees", 0), float("inf") if depth is None else depth)


@dataclass
class GridResult:
    best: object
    best_auc: float
    evaluated: list[dict]
    skipped: list[dict]


def grid_search(train, validation, grid: dict, kind: Kind, base_config=None) -> GridResult:
    """Pick the grid point with the highest validation AUC.

    ``train`` and ``validation`` are ``(encodings, labels)`` pairs. Ties go to
    smaller c then smaller gamma (SVM) or fewer trees (RFC). Points whose
    training fails on a single class are skipped and reported.
    """
    from .evaluation import auc_mann_whitney

    kind = Kind(kind)
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise EmptyGrid("grid has no points")
    keys = sorted(grid)
    cfg_cls = {Kind.SVM: SvmConfig, Kind.RFC: RfcConfig, Kind.NN: NnConfig}[kind]
    base = asdict(base_config) if base_config is not None else {}
    xv, yv = np.asarray(validation[0]), np.asarray(validation[1])
    evaluated, skipped = [], []
    for values in itertools.product(*(grid[k] for k in keys)):
        params = dict(zip(keys, values))
        cfg = cfg_cls(**{**base, **params})
        try:
            model = TRAINERS[kind](train[0], train[1], cfg)
        except SingleClassTraining as exc:
            skipped.append({"params": params, "reason": str(exc)})
            continue
        auc = auc_mann_whitney(predict_scores(model, xv), yv)
        evaluated.append({"params": params, "auc": auc, "config": cfg})
    if not evaluated:
        raise EmptyGrid("every grid point failed")
    best = min(evaluated, key=lambda r: (-r["auc"], _tie_key(kind, r["params"])))
    return GridResult(best["config"], best["auc"],
                      [{"params": r["params"], "auc": r["auc"]} for r in evaluated], skipped)
