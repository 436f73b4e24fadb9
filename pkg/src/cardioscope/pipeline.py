"""Stage runners over a work directory, and the cross-validated experiment.

Layout under ``work_dir``::

    cohort/            manifest.csv + volumes/ (HU phantoms)
    locator_cohort/    separate phantoms the heart locator is trained on
    locator/           slice classifiers
    locate/            bboxes.csv, summary.json
    preprocessed/      manifest.csv + volumes/ (UNIT cubes)
    folds/             fold_plan.json, fold_k/{cae.pt, history.csv, encodings.csv, ...}
    report/            report.json, auc_per_fold.csv, roc_*.csv
    plots/             SVG figures

Every stage writes a ``.stamp.json`` with hashes of its inputs and config
sections; a stage whose stamp matches is skipped.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import multiprocessing as mp
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd
import sklearn
import torch

from . import __version__
from .cae import build_cae, checkpoint_meta, load_checkpoint, save_checkpoint
from .classifiers import (Kind, RfcConfig, TrainedClassifier, grid_search, predict_scores, train_nn,
                          train_rfc, train_svm)
from .config import PipelineConfig
from .errors import MissingUpstreamArtifact, NoPositiveSlices
from .evaluation import (CrossValReport, FoldPlan, RocCurve, aggregate_folds, auc_mann_whitney,
                         plan_folds, roc_curve)
from .io import CohortManifest, SubjectRecord, load_manifest, load_volume, save_manifest, save_volume
from .locator import BBox3D, bbox_iou, center_fallback_bbox, combine_to_bbox, crop_heart, HeartLocator, \
    train_locator
from .losses import load_extractor
from .phantom import generate_cohort, oracle_scores
from .preprocess import preprocess_crop
from .training import LossKind, encode_cohort, encoding_matrix, load_encodings, save_encodings, train_cae

log = logging.getLogger(__name__)

BBOX_COLUMNS = ["x0", "x1", "y0", "y1", "z0", "z1"]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingUpstreamArtifact(f"{what} not found at {path}; run the upstream stage first")
    return path


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    cohort_dir = property(lambda s: s.root / "cohort")
    cohort_manifest = property(lambda s: s.cohort_dir / "manifest.csv")
    locator_cohort_dir = property(lambda s: s.root / "locator_cohort")
    locator_dir = property(lambda s: s.root / "locator")
    locate_dir = property(lambda s: s.root / "locate")
    bboxes = property(lambda s: s.locate_dir / "bboxes.csv")
    prep_dir = property(lambda s: s.root / "preprocessed")
    prep_manifest = property(lambda s: s.prep_dir / "manifest.csv")
    folds_dir = property(lambda s: s.root / "folds")
    fold_plan = property(lambda s: s.folds_dir / "fold_plan.json")
    report_dir = property(lambda s: s.root / "report")
    plot_dir = property(lambda s: s.root / "plots")

    def fold_dir(self, k: int) -> Path:
        return self.folds_dir / f"fold_{k}"

    @staticmethod
    def stamp_ok(directory, stamp: dict, name: str = "") -> bool:
        p = Path(directory) / f".{name}stamp.json"
        return p.is_file() and json.loads(p.read_text()) == stamp

    @staticmethod
    def write_stamp(directory, stamp: dict, name: str = "") -> None:
        Path(directory).mkdir(parents=True, exist_ok=True)
        _write_json(Path(directory) / f".{name}stamp.json", stamp)


# --------------------------------------------------------------------------
# cohort stages

def stage_generate(cfg: PipelineConfig, ws: Workspace, jobs: int = 1) -> CohortManifest:
    stamp = {"stage": "generate", "config": cfg.section_hash("phantom")}
    if ws.stamp_ok(ws.cohort_dir, stamp) and ws.cohort_manifest.is_file():
        log.info("cohort up to date")
        return load_manifest(ws.cohort_manifest)
    m = generate_cohort(cfg.data["phantom"]["n_subjects"], cfg.phantom_params(), cfg.seed("cohort"),
                        ws.cohort_dir, jobs=jobs)
    ws.write_stamp(ws.cohort_dir, stamp)
    return m


def _train_or_load_locator(cfg: PipelineConfig, ws: Workspace, jobs: int = 1) -> HeartLocator:
    stamp = {"stage": "locator", "config": cfg.section_hash("phantom", "locator")}
    if ws.stamp_ok(ws.locator_dir, stamp):
        return HeartLocator.load(ws.locator_dir)
    lc = cfg.data["locator"]
    train_set = generate_cohort(lc["n_train_subjects"], cfg.phantom_params(), cfg.seed("locator_cohort"),
                                ws.locator_cohort_dir, jobs=jobs)
    loc = train_locator(train_set, cfg.locator_train_config(cfg.seed("locator")), lc["threshold"],
                        lc["margin_vox"])
    loc.save(ws.locator_dir)
    ws.write_stamp(ws.locator_dir, stamp)
    return loc


def locate_subject(loc: HeartLocator, v) -> tuple[BBox3D, BBox3D, bool]:
    """(box with margin, box without margin, used_fallback)."""
    probs = loc.probabilities(v)
    try:
        return (combine_to_bbox(*probs, loc.threshold, loc.margin_vox),
                combine_to_bbox(*probs, loc.threshold, 0), False)
    except NoPositiveSlices as exc:
        log.warning("no heart slices found (%s); using centred fallback box", exc)
        box = center_fallback_bbox(v.shape)
        return box, box, True


def stage_locate(cfg: PipelineConfig, ws: Workspace, jobs: int = 1) -> Path:
    cohort = load_manifest(_require(ws.cohort_manifest, "cohort manifest"))
    stamp = {"stage": "locate", "cohort": file_hash(ws.cohort_manifest),
             "config": cfg.section_hash("phantom", "locator")}
    if ws.stamp_ok(ws.locate_dir, stamp) and ws.bboxes.is_file():
        log.info("bounding boxes up to date")
        return ws.bboxes
    loc = _train_or_load_locator(cfg, ws, jobs)
    ws.locate_dir.mkdir(parents=True, exist_ok=True)
    rows, ious, n_fallback = [], [], 0
    for s in cohort.subjects:
        v = load_volume(cohort.resolve(s))
        box, tight, fallback = locate_subject(loc, v)
        n_fallback += fallback
        iou = bbox_iou(tight, BBox3D(s.truth.heart_bbox)) if s.truth is not None else None
        if iou is not None:
            ious.append(iou)
        rows.append([s.subject_id, *[c for r in box.ranges for c in r], int(fallback),
                     "" if iou is None else repr(iou)])
    with open(ws.bboxes, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", *BBOX_COLUMNS, "fallback", "iou_vs_truth"])
        w.writerows(rows)
    summary = {"n_subjects": len(rows), "n_fallback": n_fallback, "margin_vox": loc.margin_vox,
               "mean_iou_vs_truth": float(np.mean(ious)) if ious else None,
               "min_iou_vs_truth": float(np.min(ious)) if ious else None}
    _write_json(ws.locate_dir / "summary.json", summary)
    ws.write_stamp(ws.locate_dir, stamp)
    return ws.bboxes


def read_bboxes(path) -> dict[str, BBox3D]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            c = [int(row[k]) for k in BBOX_COLUMNS]
            out[row["subject_id"]] = BBox3D(((c[0], c[1]), (c[2], c[3]), (c[4], c[5])))
    return out


def stage_preprocess(cfg: PipelineConfig, ws: Workspace) -> CohortManifest:
    cohort = load_manifest(_require(ws.cohort_manifest, "cohort manifest"))
    boxes = read_bboxes(_require(ws.bboxes, "bounding boxes"))
    stamp = {"stage": "preprocess", "cohort": file_hash(ws.cohort_manifest), "bboxes": file_hash(ws.bboxes),
             "config": cfg.section_hash("preprocess")}
    if ws.stamp_ok(ws.prep_dir, stamp) and ws.prep_manifest.is_file():
        log.info("preprocessed volumes up to date")
        return load_manifest(ws.prep_manifest)
    pcfg = cfg.preprocess_config()
    (ws.prep_dir / "volumes").mkdir(parents=True, exist_ok=True)
    subjects = []
    for s in cohort.subjects:
        if s.subject_id not in boxes:
            raise MissingUpstreamArtifact(f"no bounding box for {s.subject_id}")
        v = preprocess_crop(crop_heart(load_volume(cohort.resolve(s)), boxes[s.subject_id]), pcfg)
        rel = f"volumes/{s.subject_id}.nii"
        save_volume(v, ws.prep_dir / rel)
        subjects.append(SubjectRecord(s.subject_id, rel, s.label, s.truth))
    m = CohortManifest(subjects, {**cohort.metadata, "preprocessing": json.dumps(cfg.data["preprocess"],
                                                                                 sort_keys=True)}, ws.prep_dir)
    save_manifest(m, ws.prep_manifest)
    ws.write_stamp(ws.prep_dir, stamp)
    return m


def stage_plan(cfg: PipelineConfig, ws: Workspace) -> FoldPlan:
    manifest = load_manifest(_require(ws.prep_manifest, "preprocessed manifest"))
    ev = cfg.data["evaluation"]
    stamp = {"stage": "plan", "manifest": file_hash(ws.prep_manifest), "config": cfg.section_hash("evaluation")}
    if ws.stamp_ok(ws.folds_dir, stamp) and ws.fold_plan.is_file():
        return FoldPlan.load(ws.fold_plan)
    plan = plan_folds(manifest, ev["n_folds"], cfg.test_size, ev["val_size"], cfg.seed("folds"))
    ws.folds_dir.mkdir(parents=True, exist_ok=True)
    plan.save(ws.fold_plan)
    ws.write_stamp(ws.folds_dir, stamp)
    return plan


# --------------------------------------------------------------------------
# per-fold stages

def load_unit_volumes(manifest: CohortManifest) -> dict[str, np.ndarray]:
    return {s.subject_id: load_volume(manifest.resolve(s)).data.astype(np.float32) for s in manifest.subjects}


def _fold_inputs(ws: Workspace):
    manifest = load_manifest(_require(ws.prep_manifest, "preprocessed manifest"))
    plan = FoldPlan.load(_require(ws.fold_plan, "fold plan"))
    return manifest, plan


def train_fold_cae(cfg: PipelineConfig, ws: Workspace, k: int, volumes=None, loss: str | None = None,
                   out_name: str = "cae.pt") -> Path:
    """Train the fold-``k`` autoencoder on that fold's training subjects only."""
    manifest, plan = _fold_inputs(ws)
    fold = plan.folds[k]
    d = ws.fold_dir(k)
    tc = cfg.train_config(cfg.seed("fold", k, "cae_train"))
    if loss is not None:
        tc.loss = LossKind(loss)
    stamp = {"stage": "train-cae", "manifest": file_hash(ws.prep_manifest), "plan": file_hash(ws.fold_plan),
             "config": cfg.section_hash("cae", "training", "losses"), "loss": tc.loss.value}
    ckpt = d / out_name
    tag = Path(out_name).stem + "."
    if ws.stamp_ok(d, stamp, tag) and ckpt.is_file():
        log.info("fold %d: %s up to date", k, out_name)
        return ckpt
    volumes = volumes if volumes is not None else load_unit_volumes(manifest)
    model = build_cae(cfg.cae_config(), cfg.seed("fold", k, "cae_init"))
    extractor = None
    if tc.loss is LossKind.FPL:
        extractor = load_extractor(cfg.data["paths"]["pretrained_extractor"], cfg.seed("extractor"),
                                   cfg.data["losses"]["allow_fallback"], tuple(cfg.data["losses"]["tap_layers"]))
    log.info("fold %d: training CAE (%s, %d iterations) on %d subjects", k, tc.loss.value, tc.iterations,
             len(fold.train_ids))
    model, hist = train_cae(model, [volumes[i] for i in fold.train_ids], tc,
                            val_volumes=[volumes[i] for i in fold.val_ids], extractor=extractor,
                            fpl_cfg=cfg.fpl_config())
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt, tc.seed, {
        "loss": tc.loss.value, "fold": k, "history": hist.digest(),
        "extractor": extractor.provenance if extractor is not None else None,
    })
    hist.to_csv(d / (Path(out_name).stem + "_history.csv"))
    ws.write_stamp(d, stamp, tag)
    return ckpt


def encode_fold(cfg: PipelineConfig, ws: Workspace, k: int, volumes=None) -> Path:
    manifest, _ = _fold_inputs(ws)
    d = ws.fold_dir(k)
    ckpt = _require(d / "cae.pt", f"fold {k} autoencoder checkpoint")
    meta = checkpoint_meta(ckpt)
    out = d / "encodings.csv"
    stamp = {"stage": "encode", "checkpoint": meta["fingerprint"], "manifest": file_hash(ws.prep_manifest)}
    if ws.stamp_ok(d, stamp, "encode.") and out.is_file():
        return out
    model = load_checkpoint(ckpt)
    if model.fingerprint() != meta["fingerprint"]:
        raise MissingUpstreamArtifact(f"{ckpt} does not match its sidecar fingerprint")
    table = encode_cohort(model, manifest, volumes if volumes is not None else load_unit_volumes(manifest))
    save_encodings(table, out)
    ws.write_stamp(d, stamp, "encode.")
    return out


def _split(table: pd.DataFrame, ids) -> tuple[np.ndarray, np.ndarray]:
    x, y = encoding_matrix(table.set_index("subject_id").loc[list(ids)].reset_index())
    return x, y


def _load_fold_encodings(ws: Workspace, k: int) -> pd.DataFrame:
    d = ws.fold_dir(k)
    enc = _require(d / "encodings.csv", f"fold {k} encodings")
    table = load_encodings(enc)
    ckpt = _require(d / "cae.pt", f"fold {k} autoencoder checkpoint")
    if table.attrs.get("model_fingerprint") != checkpoint_meta(ckpt)["fingerprint"]:
        raise MissingUpstreamArtifact(f"fold {k} encodings are stale; re-run encode")
    return table


def train_fold_classifiers(cfg: PipelineConfig, ws: Workspace, k: int) -> dict:
    _, plan = _fold_inputs(ws)
    fold = plan.folds[k]
    d = ws.fold_dir(k)
    table = _load_fold_encodings(ws, k)
    stamp = {"stage": "train-classifiers", "encodings": file_hash(d / "encodings.csv"),
             "plan": file_hash(ws.fold_plan), "config": cfg.section_hash("classifiers")}
    cdir = d / "classifiers"
    if ws.stamp_ok(cdir, stamp):
        return json.loads((cdir / "summary.json").read_text())
    train, val = _split(table, fold.train_ids), _split(table, fold.val_ids)
    cc = cfg.data["classifiers"]
    cdir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for kind in map(Kind, cc["kinds"]):
        if kind is Kind.SVM:
            svm_cfg = cfg.svm_config()
            if cc["grid_search"]:
                g = grid_search(train, val, cc["svm_grid"], kind, svm_cfg)
                svm_cfg, summary["SVM_grid"] = g.best, {"best_auc": g.best_auc, "evaluated": g.evaluated,
                                                        "skipped": g.skipped}
            model = train_svm(*train, svm_cfg)
        elif kind is Kind.RFC:
            rfc_cfg = cfg.rfc_config(cfg.seed("fold", k, "rfc"))
            if cc["grid_search"]:
                g = grid_search(train, val, cc["rfc_grid"], kind, rfc_cfg)
                rfc_cfg, summary["RFC_grid"] = g.best, {"best_auc": g.best_auc, "evaluated": g.evaluated,
                                                        "skipped": g.skipped}
            model = train_rfc(*train, rfc_cfg)
        else:
            model = train_nn(*train, cfg.nn_config(cfg.seed("fold", k, "nn")))
        model.meta["validation_auc"] = auc_mann_whitney(predict_scores(model, val[0]), val[1])
        model.save(cdir / f"{kind.value.lower()}.pkl")
        summary[kind.value] = {"config": asdict(model.config), "validation_auc": model.meta["validation_auc"],
                               "training_fingerprint": model.fingerprint}
    _write_json(cdir / "summary.json", summary)
    ws.write_stamp(cdir, stamp)
    return summary


def evaluate_fold(cfg: PipelineConfig, ws: Workspace, k: int) -> dict[str, RocCurve]:
    manifest, plan = _fold_inputs(ws)
    fold = plan.folds[k]
    d = ws.fold_dir(k)
    table = _load_fold_encodings(ws, k)
    x, y = _split(table, fold.test_ids)
    scores = pd.DataFrame({"subject_id": fold.test_ids, "label": np.where(y == 1, "NON_SURVIVOR", "SURVIVOR")})
    curves = {}
    for kind in cfg.data["classifiers"]["kinds"]:
        path = _require(d / "classifiers" / f"{kind.lower()}.pkl", f"fold {k} {kind} classifier")
        model = TrainedClassifier.load(path)
        s = predict_scores(model, x)
        scores[kind] = s
        curves[kind] = roc_curve(s, y)
        with open(d / f"roc_{kind}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr", "threshold"])
            w.writerows([repr(a), repr(b), repr(c)] for a, b, c in curves[kind].points)
    scores.to_csv(d / "scores.csv", index=False, float_format="%.17g", lineterminator="\n")
    return curves


def fold_oracle_auc(manifest: CohortManifest, fold) -> float | None:
    if any(s.truth is None for s in manifest.subjects):
        return None
    sub = manifest.subset(fold.test_ids)
    return auc_mann_whitney(oracle_scores(sub), sub.labels())


def run_fold(cfg_data: dict, work_dir: str, k: int) -> dict:
    """Everything for one fold; top-level so it can run in a worker process."""
    torch.set_num_threads(1)
    cfg = PipelineConfig(cfg_data)
    ws = Workspace(work_dir)
    manifest, _ = _fold_inputs(ws)
    volumes = None
    if not (ws.fold_dir(k) / "encodings.csv").is_file() or not (ws.fold_dir(k) / "cae.pt").is_file():
        volumes = load_unit_volumes(manifest)
    train_fold_cae(cfg, ws, k, volumes)
    encode_fold(cfg, ws, k, volumes)
    train_fold_classifiers(cfg, ws, k)
    curves = evaluate_fold(cfg, ws, k)
    return {"fold": k, "auc": {kind: c.auc for kind, c in curves.items()}}


# --------------------------------------------------------------------------
# aggregation

def _read_roc(path) -> RocCurve:
    t = pd.read_csv(path)
    fpr, tpr = t["fpr"].to_numpy(float), t["tpr"].to_numpy(float)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, t["threshold"].to_numpy(float), auc)


def build_report(cfg: PipelineConfig, ws: Workspace) -> CrossValReport:
    manifest, plan = _fold_inputs(ws)
    kinds = cfg.data["classifiers"]["kinds"]
    curves = {kind: [_read_roc(_require(ws.fold_dir(k) / f"roc_{kind}.csv", f"fold {k} {kind} ROC"))
                     for k in range(len(plan.folds))] for kind in kinds}
    report = aggregate_folds(curves)

    folds = []
    for k, fold in enumerate(plan.folds):
        d = ws.fold_dir(k)
        meta = checkpoint_meta(d / "cae.pt")
        cls = json.loads((d / "classifiers" / "summary.json").read_text())
        val_mae = meta["history"]["val_hu_mae"]
        folds.append({
            "fold": k,
            "n_train": len(fold.train_ids), "n_val": len(fold.val_ids), "n_test": len(fold.test_ids),
            "cae_fingerprint": meta["fingerprint"], "cae_loss": meta["loss"],
            "extractor": meta["extractor"],
            "final_val_hu_mae": val_mae[max(val_mae, key=int)] if val_mae else None,
            "oracle_test_auc": fold_oracle_auc(manifest, fold),
            "selected": {kd: cls[kd]["config"] for kd in kinds},
            "validation_auc": {kd: cls[kd]["validation_auc"] for kd in kinds},
        })
    extras = {"folds": folds}
    if all(s.truth is not None for s in manifest.subjects):
        oracle = [f["oracle_test_auc"] for f in folds]
        extras["oracle"] = {
            "cohort_auc": auc_mann_whitney(oracle_scores(manifest), manifest.labels()),
            "mean_test_auc": float(np.mean(oracle)),
            "per_fold_test_auc": oracle,
        }
    locate_summary = ws.locate_dir / "summary.json"
    if locate_summary.is_file():
        extras["locator"] = json.loads(locate_summary.read_text())
    survivors, non_survivors = manifest.counts()
    report.provenance = {
        "master_seed": cfg.master_seed,
        "config_hash": cfg.hash(),
        "cohort_manifest_hash": file_hash(ws.cohort_manifest) if ws.cohort_manifest.is_file() else None,
        "preprocessed_manifest_hash": file_hash(ws.prep_manifest),
        "fold_plan_hash": file_hash(ws.fold_plan),
        "fold_plan_counts": plan.counts,
        "n_survivors": survivors, "n_non_survivors": non_survivors,
        "versions": {"cardioscope": __version__, "numpy": np.__version__, "torch": torch.__version__,
                     "scikit-learn": sklearn.__version__, "python": platform.python_version()},
    }
    report.extras = extras
    return report


def write_report(report: CrossValReport, ws: Workspace) -> Path:
    ws.report_dir.mkdir(parents=True, exist_ok=True)
    (ws.report_dir / "report.json").write_text(report.to_json())
    with open(ws.report_dir / "auc_per_fold.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "kind", "auc"])
        for kind, aucs in report.per_fold_auc.items():
            for k, a in enumerate(aucs):
                w.writerow([k, kind, repr(a)])
    for kind, roc in report.mean_roc.items():
        with open(ws.report_dir / f"roc_mean_{kind}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr_mean", "tpr_std"])
            w.writerows(map(lambda r: [repr(v) for v in r], zip(roc["fpr"], roc["tpr_mean"], roc["tpr_std"])))
    return ws.report_dir / "report.json"


def run_folds(cfg: PipelineConfig, ws: Workspace, folds=None, jobs: int = 1) -> list[dict]:
    plan = FoldPlan.load(_require(ws.fold_plan, "fold plan"))
    folds = list(range(len(plan.folds))) if folds is None else list(folds)
    results, failure = [], None
    if jobs > 1 and len(folds) > 1:
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(min(jobs, len(folds)), mp_context=ctx) as pool:
            futures = {k: pool.submit(run_fold, cfg.data, str(ws.root), k) for k in folds}
            for k, fut in futures.items():
                try:
                    results.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - recorded, then re-raised
                    failure = failure or (k, exc)
    else:
        for k in folds:
            try:
                results.append(run_fold(cfg.data, str(ws.root), k))
            except Exception as exc:  # noqa: BLE001
                failure = (k, exc)
                break
    if failure is not None:
        k, exc = failure
        ws.report_dir.mkdir(parents=True, exist_ok=True)
        _write_json(ws.report_dir / "partial.json", {"completed": results, "failed_fold": k,
                                                     "error": f"{type(exc).__name__}: {exc}"})
        raise exc
    return results


def run_experiment(cfg: PipelineConfig, work_dir=None, jobs: int = 1) -> CrossValReport:
    """Generate, locate, preprocess, plan folds, run every fold and write the report."""
    ws = Workspace(cfg.work_dir(work_dir))
    ws.root.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(ws.root)
    stage_generate(cfg, ws, jobs)
    stage_locate(cfg, ws, jobs)
    stage_preprocess(cfg, ws)
    stage_plan(cfg, ws)
    run_folds(cfg, ws, jobs=jobs)
    report = build_report(cfg, ws)
    write_report(report, ws)
    cfg.write_resolved(ws.report_dir)
    return report
