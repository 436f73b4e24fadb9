"""ROC figures and reconstruction / absolute-error panels (SVG)."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .cae import checkpoint_meta, load_checkpoint, reconstruct_array  # noqa: E402
from .errors import MissingUpstreamArtifact  # noqa: E402
from .evaluation import FoldPlan  # noqa: E402
from .io import load_manifest, load_volume  # noqa: E402
from .preprocess import HU_LO, HU_SCALE  # noqa: E402

# fixed ids and no date keep the SVG text stable between runs
plt.rcParams["svg.hashsalt"] = "cardioscope"
SVG_META = {"Date": None}
COLORS = {"SVM": "tab:blue", "NN": "tab:orange", "RFC": "tab:green", "ALL": "tab:gray"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)
    return path


def _fold_curves(ws, kind: str, n_folds: int):
    out = []
    for k in range(n_folds):
        p = ws.fold_dir(k) / f"roc_{kind}.csv"
        if p.is_file():
            out.append(pd.read_csv(p))
    return out


def plot_roc(ws, out_dir=None) -> list[Path]:
    """Mean ROC of every classifier, plus one figure per classifier with its fold curves."""
    report = ws.report_dir / "report.json"
    if not report.is_file():
        raise MissingUpstreamArtifact(f"no report at {report}; run evaluate first")
    r = json.loads(report.read_text())
    out_dir = Path(out_dir or ws.plot_dir)
    n_folds = max(len(v) for v in r["per_fold_auc"].values())
    paths = []

    fig, ax = plt.subplots(figsize=(5, 5))
    for kind, roc in sorted(r["mean_roc"].items()):
        ax.plot(roc["fpr"], roc["tpr_mean"], color=COLORS.get(kind), lw=2,
                label=f"{kind} (AUC {r['mean_auc'][kind]:.2f} ± {r['std_auc'][kind]:.2f})")
    ax.plot([0, 1], [0, 1], ls="--", color="0.6", lw=1)
    ax.set(xlabel="False positive rate", ylabel="True positive rate", xlim=(0, 1), ylim=(0, 1.01),
           title="Mean ROC over folds")
    ax.legend(loc="lower right", fontsize=8)
    paths.append(_save(fig, out_dir / "roc_mean.svg"))

    for kind, roc in sorted(r["mean_roc"].items()):
        fig, ax = plt.subplots(figsize=(5, 5))
        for t in _fold_curves(ws, kind, n_folds):
            ax.plot(t["fpr"], t["tpr"], color=COLORS.get(kind), alpha=0.25, lw=1)
        m, s = np.asarray(roc["tpr_mean"]), np.asarray(roc["tpr_std"])
        ax.fill_between(roc["fpr"], np.clip(m - s, 0, 1), np.clip(m + s, 0, 1), color=COLORS.get(kind), alpha=0.15)
        ax.plot(roc["fpr"], m, color=COLORS.get(kind), lw=2, label=f"mean, AUC {r['mean_auc'][kind]:.2f}")
        ax.plot([0, 1], [0, 1], ls="--", color="0.6", lw=1)
        ax.set(xlabel="False positive rate", ylabel="True positive rate", xlim=(0, 1), ylim=(0, 1.01),
               title=f"{kind}: per-fold ROC")
        ax.legend(loc="lower right", fontsize=8)
        paths.append(_save(fig, out_dir / f"roc_{kind}.svg"))
    return paths


def plot_reconstructions(ws, fold: int = 0, out_dir=None, subject_index: int = 0) -> Path:
    """Input, reconstruction and |error| (HU) on the middle axial slice for each CAE in a fold.

    Every ``cae*.pt`` in the fold directory contributes one row, labelled by
    the loss it was trained with.
    """
    d = ws.fold_dir(fold)
    ckpts = sorted(d.glob("cae*.pt"))
    if not ckpts:
        raise MissingUpstreamArtifact(f"no autoencoder checkpoints in {d}")
    manifest = load_manifest(ws.prep_manifest)
    plan = FoldPlan.load(ws.fold_plan)
    sid = plan.folds[fold].test_ids[subject_index]
    vol = load_volume(manifest.resolve(manifest.by_id()[sid])).data.astype(np.float32)
    z = vol.shape[2] // 2

    fig, axes = plt.subplots(len(ckpts), 3, figsize=(9, 3 * len(ckpts)), squeeze=False)
    for row, ck in zip(axes, ckpts):
        model = load_checkpoint(ck)
        rec = reconstruct_array(model, vol[None])[0]
        loss = checkpoint_meta(ck).get("loss", "?")
        err = np.abs(rec - vol) * HU_SCALE
        for ax, img, title, kw in (
            (row[0], vol[:, :, z] * HU_SCALE + HU_LO, "input (HU)", {"cmap": "gray", "vmin": HU_LO, "vmax": HU_LO + HU_SCALE}),
            (row[1], rec[:, :, z] * HU_SCALE + HU_LO, f"{loss} reconstruction", {"cmap": "gray", "vmin": HU_LO, "vmax": HU_LO + HU_SCALE}),
            (row[2], err[:, :, z], f"|error|, MAE {err.mean():.1f} HU", {"cmap": "magma", "vmin": 0, "vmax": 300}),
        ):
            im = ax.imshow(img.T, origin="lower", **kw)
            ax.set_title(title, fontsize=9)
            ax.axis("off")
        fig.colorbar(im, ax=row[2], fraction=0.046)
    fig.suptitle(f"fold {fold}, subject {sid}, axial slice {z}", fontsize=10)
    return _save(fig, Path(out_dir or ws.plot_dir) / f"reconstruction_fold{fold}.svg")
