"""Cross-validation folds, ROC/AUC and per-fold aggregation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InsufficientClassMembers, SingleClassLabels
from .io import CohortManifest
from .seeding import child_rng

FPR_GRID = np.linspace(0.0, 1.0, 101)

# Published cross-validated AUCs (mean, std) and reconstruction MAE in HU on the
# original restricted-access screening cohort. Reported alongside results for
# context only; synthetic phantoms cannot reproduce them.
PUBLISHED_AUC = {"SVM": (0.72, 0.07), "NN": (0.71, 0.06), "RFC": (0.70, 0.06)}
PUBLISHED_MAE_HU = {"MSE": (19.0, 5.0), "FPL": (20.0, 6.0)}


# --------------------------------------------------------------------------
# fold planning

@dataclass
class FoldSpec:
    index: int
    test_ids: list[str]
    val_ids: list[str]
    train_ids: list[str]


@dataclass
class FoldPlan:
    folds: list[FoldSpec]
    seed: int
    counts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "counts": self.counts,
                           "folds": [f.__dict__ for f in self.folds]}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls([FoldSpec(**f) for f in d["folds"]], d["seed"], d["counts"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "FoldPlan":
        return cls.from_json(Path(path).read_text())

    def check(self, labels: Mapping[str, int]) -> None:
        """Assert every structural invariant; raises AssertionError with the first violation."""
        positives = {i for i, y in labels.items() if y == 1}
        seen_pos = []
        for f in self.folds:
            test, val, train = set(f.test_ids), set(f.val_ids), set(f.train_ids)
            assert len(test) == len(f.test_ids) and len(val) == len(f.val_ids), "duplicate id in a role"
            assert not test & val and not test & train and not val & train, f"fold {f.index}: roles overlap"
            assert test | val | train == set(labels), f"fold {f.index}: roles do not cover the cohort"
            n_tp = sum(labels[i] for i in test)
            assert 2 * n_tp == len(test), f"fold {f.index}: test set not balanced"
            assert 2 * sum(labels[i] for i in val) == len(val), f"fold {f.index}: val set not balanced"
            seen_pos += [i for i in f.test_ids if labels[i] == 1]
        assert len(seen_pos) == len(set(seen_pos)), "a non-survivor appears in two test sets"
        assert set(seen_pos) == positives, "not every non-survivor is tested"


def _ids_labels(cohort) -> tuple[list[str], np.ndarray]:
    if isinstance(cohort, CohortManifest):
        return cohort.ids, cohort.labels()
    ids, labels = cohort
    return list(ids), np.asarray(labels).astype(np.int64)


def partition_sizes(n: int, k: int) -> list[int]:
    base, extra = divmod(n, k)
    return [base + 1] * extra + [base] * (k - extra)


def plan_folds(cohort, n_folds: int = 8, test_size: int | None = 100, val_size: int = 50,
               seed: int = 0) -> FoldPlan:
    """Balanced test/validation sets with every non-survivor tested exactly once.

    Non-survivors are shuffled and split as evenly as possible over the
    folds; each test set gets as many randomly drawn survivors. ``cohort`` is
    a manifest or an ``(ids, labels)`` pair with label 1 = NON_SURVIVOR. With
    ``test_size=None`` the test size follows from the partition.
    """
    ids, y = _ids_labels(cohort)
    if val_size % 2 or (test_size is not None and test_size % 2):
        raise ValueError("test and validation sizes must be even")
    pos = [i for i, v in zip(ids, y) if v == 1]
    neg = [i for i, v in zip(ids, y) if v == 0]
    sizes = partition_sizes(len(pos), n_folds)
    k_max, half_val = max(sizes), val_size // 2
    if test_size is not None:
        if k_max < test_size // 2:
            raise InsufficientClassMembers(
                f"{len(pos)} non-survivors over {n_folds} folds cannot fill test sets of {test_size}")
        if k_max > test_size // 2:
            raise ValueError(f"{len(pos)} non-survivors over {n_folds} folds exceed test sets of {test_size}; "
                             "raise test_size or n_folds")
    if min(sizes) < 1:
        raise InsufficientClassMembers(f"{len(pos)} non-survivors cannot cover {n_folds} folds")
    if len(pos) - k_max < half_val + 1 or len(neg) < k_max + half_val + 1:
        raise InsufficientClassMembers(
            f"need at least {k_max + half_val + 1} of each class, have {len(pos)} non-survivors / {len(neg)} survivors")

    order = {i: n for n, i in enumerate(ids)}
    shuffled = list(child_rng(seed, "partition").permutation(pos))
    folds, start = [], 0
    for f, k in enumerate(sizes):
        rng = child_rng(seed, "fold", f)
        test_pos = shuffled[start:start + k]
        start += k
        test_neg = list(rng.choice(neg, size=k, replace=False))
        rest_pos = [i for i in pos if i not in set(test_pos)]
        rest_neg = [i for i in neg if i not in set(test_neg)]
        val = list(rng.choice(rest_pos, size=half_val, replace=False)) + \
            list(rng.choice(rest_neg, size=half_val, replace=False))
        taken = set(test_pos) | set(test_neg) | set(val)
        folds.append(FoldSpec(
            f,
            sorted(map(str, test_pos + test_neg), key=order.get),
            sorted(map(str, val), key=order.get),
            [i for i in ids if i not in taken],
        ))
    counts = {"n_subjects": len(ids), "n_non_survivors": len(pos), "n_survivors": len(neg),
              "test_non_survivors_per_fold": sizes, "val_size": val_size}
    return FoldPlan(folds, int(seed), counts)


# --------------------------------------------------------------------------
# ROC / AUC

@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if y.sum() == 0 or y.sum() == y.size:
        raise SingleClassLabels("ROC analysis needs both classes")
    return s, y


def roc_curve(scores, labels) -> RocCurve:
    """Empirical ROC with one vertex per distinct score and trapezoidal AUC."""
    s, y = _check_binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = (last_of_group + 1) - tps
    tpr = np.r_[0.0, tps / y.sum()]
    fpr = np.r_[0.0, fps / (y.size - y.sum())]
    thr = np.r_[np.inf, s[last_of_group]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thr, auc)


def auc_mann_whitney(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie) by enumerating every pair."""
    s, y = _check_binary(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


def tpr_at(curve: RocCurve, grid=FPR_GRID) -> np.ndarray:
    """Vertical sample of the ROC polyline; at a vertical jump the upper value is used."""
    fpr, tpr = curve.fpr, curve.tpr
    j = np.searchsorted(fpr, grid, side="right") - 1
    j = np.clip(j, 0, fpr.size - 1)
    nxt = np.minimum(j + 1, fpr.size - 1)
    span = fpr[nxt] - fpr[j]
    w = np.where(span > 0, (grid - fpr[j]) / np.where(span > 0, span, 1.0), 0.0)
    return tpr[j] + w * (tpr[nxt] - tpr[j])


# --------------------------------------------------------------------------
# aggregation

@dataclass
class CrossValReport:
    per_fold_auc: dict[str, list[float]]
    mean_auc: dict[str, float]
    std_auc: dict[str, float]
    mean_roc: dict[str, dict[str, list[float]]]
    provenance: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_fold_auc": self.per_fold_auc,
            "mean_auc": self.mean_auc,
            "std_auc": self.std_auc,
            "mean_roc": self.mean_roc,
            "provenance": self.provenance,
            "published_reference": {
                "note": "cross-validated AUC and reconstruction MAE on the original restricted "
                        "screening cohort; recorded for context, not reproducible here and never asserted",
                "auc_mean_std": {k: list(v) for k, v in PUBLISHED_AUC.items()},
                "mae_hu_mean_std": {k: list(v) for k, v in PUBLISHED_MAE_HU.items()},
            },
            **self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def aggregate_folds(curves: Mapping[str, Sequence[RocCurve]] | Sequence[RocCurve]) -> CrossValReport:
    """Mean and population std of per-fold AUCs plus a vertically averaged mean ROC."""
    if not isinstance(curves, Mapping):
        curves = {"ALL": list(curves)}
    per_fold, mean, std, mean_roc = {}, {}, {}, {}
    for kind, cs in curves.items():
        if not cs:
            raise ValueError(f"no folds for {kind}")
        aucs = [float(c.auc) for c in cs]
        per_fold[kind] = aucs
        mean[kind] = float(np.mean(aucs))
        std[kind] = float(np.std(aucs))
        sampled = np.stack([tpr_at(c) for c in cs])
        mean_roc[kind] = {"fpr": FPR_GRID.tolist(), "tpr_mean": sampled.mean(0).tolist(),
                          "tpr_std": sampled.std(0).tolist()}
    return CrossValReport(per_fold, mean, std, mean_roc)
