"""cardioscope command line: synthetic cohort to cross-validated ROC report.

Exit codes: 0 success, 1 stage failure, 2 configuration error, 3 missing
upstream artifact. ``--error-json PATH`` (or ``-`` for stderr) writes a
machine-readable description of any failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PipelineConfig
from .errors import CardioscopeError, ConfigError, MissingUpstreamArtifact

log = logging.getLogger("cardioscope")

COMMANDS = ("generate", "locate", "preprocess", "train-cae", "encode", "train-classifiers", "evaluate",
            "run-all", "plot")
FOLD_COMMANDS = ("train-cae", "encode", "train-classifiers", "evaluate")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="TOML config file, or the name of a built-in config (e.g. desk)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key by dotted path, e.g. training.iterations=500")
    common.add_argument("-w", "--work-dir", help="output directory (falls back to paths.work_dir, then "
                                                 "$CARDIOSCOPE_WORK_DIR)")
    common.add_argument("-j", "--jobs", type=int, default=1, help="worker processes for folds / cohort generation")
    common.add_argument("--error-json", metavar="PATH", help="write failures as JSON here ('-' for stderr)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="cardioscope", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in FOLD_COMMANDS or name == "plot":
            sp.add_argument("--fold", type=int, action="append", help="restrict to these fold indices")
        if name == "train-cae":
            sp.add_argument("--variant", choices=("MSE", "FPL"),
                            help="train an extra CAE with this loss as cae_<LOSS>.pt (for comparison plots); "
                                 "the pipeline's cae.pt is untouched")
    return p


def _load_config(args) -> PipelineConfig:
    src = args.config
    if src and not Path(src).is_file() and "/" not in src and not src.endswith(".toml"):
        return PipelineConfig.builtin(src, args.overrides)
    return PipelineConfig.load(src, args.overrides)


def _folds(args, plan) -> list[int]:
    n = len(plan.folds)
    chosen = args.fold if getattr(args, "fold", None) else list(range(n))
    bad = [k for k in chosen if not 0 <= k < n]
    if bad:
        raise ConfigError(f"fold indices {bad} outside 0..{n - 1}")
    return chosen


def run_command(args) -> int:
    from . import pipeline as pl
    from .evaluation import FoldPlan

    cfg = _load_config(args)
    ws = pl.Workspace(cfg.work_dir(args.work_dir))
    ws.root.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(ws.root)
    cmd = args.command

    if cmd == "generate":
        m = pl.stage_generate(cfg, ws, args.jobs)
        print(f"cohort: {len(m)} subjects ({m.counts()[1]} non-survivors) -> {ws.cohort_manifest}")
    elif cmd == "locate":
        print(f"bounding boxes -> {pl.stage_locate(cfg, ws, args.jobs)}")
    elif cmd == "preprocess":
        m = pl.stage_preprocess(cfg, ws)
        print(f"preprocessed {len(m)} volumes -> {ws.prep_manifest}")
    elif cmd == "train-cae":
        plan = pl.stage_plan(cfg, ws)
        for k in _folds(args, plan):
            if args.variant:
                path = pl.train_fold_cae(cfg, ws, k, loss=args.variant, out_name=f"cae_{args.variant}.pt")
            else:
                path = pl.train_fold_cae(cfg, ws, k)
            print(f"fold {k}: {path}")
    elif cmd in ("encode", "train-classifiers"):
        plan = FoldPlan.load(pl._require(ws.fold_plan, "fold plan"))
        step = pl.encode_fold if cmd == "encode" else pl.train_fold_classifiers
        for k in _folds(args, plan):
            step(cfg, ws, k)
            print(f"fold {k}: {cmd} done")
    elif cmd == "evaluate":
        plan = FoldPlan.load(pl._require(ws.fold_plan, "fold plan"))
        for k in _folds(args, plan):
            pl.evaluate_fold(cfg, ws, k)
        report = pl.build_report(cfg, ws)
        path = pl.write_report(report, ws)
        cfg.write_resolved(ws.report_dir)
        _summary(report)
        print(f"report -> {path}")
    elif cmd == "run-all":
        report = pl.run_experiment(cfg, ws.root, jobs=args.jobs)
        _summary(report)
        print(f"report -> {ws.report_dir / 'report.json'}")
    elif cmd == "plot":
        from .plotting import plot_reconstructions, plot_roc
        paths = plot_roc(ws)
        for k in (args.fold or [0]):
            if any(ws.fold_dir(k).glob("cae*.pt")):
                paths.append(plot_reconstructions(ws, k))
        for p in paths:
            print(p)
    return 0


def _summary(report) -> None:
    for kind in report.mean_auc:
        print(f"{kind}: AUC {report.mean_auc[kind]:.3f} ± {report.std_auc[kind]:.3f} "
              f"over {len(report.per_fold_auc[kind])} folds")


def _emit_error(dest, exc: BaseException, code: int, command: str | None) -> None:
    payload = json.dumps({"command": command, "error": type(exc).__name__, "message": str(exc),
                          "exit_code": code}, indent=2, sort_keys=True)
    if dest == "-":
        print(payload, file=sys.stderr)
    else:
        Path(dest).write_text(payload + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run_command(args)
    except (CardioscopeError, OSError, ValueError, RuntimeError) as e:
        exc = e
    code = 2 if isinstance(exc, ConfigError) else 3 if isinstance(exc, MissingUpstreamArtifact) else 1
    log.error("%s: %s", type(exc).__name__, exc)
    if args.error_json:
        _emit_error(args.error_json, exc, code, args.command)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
