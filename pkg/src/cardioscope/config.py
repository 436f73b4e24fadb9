"""Pipeline configuration: one TOML file, dotted ``--set`` overrides, strict keys.

Keys whose default is ``None`` (e.g. ``classifiers.rfc.max_depth``) may be
omitted from a file; TOML has no null, so absence means "unset".
"""
from __future__ import annotations

import copy
import hashlib
import os
import sys
from dataclasses import asdict
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
import tomli_w

from .cae import CaeConfig
from .classifiers import DEFAULT_RFC_GRID, DEFAULT_SVM_GRID, NnConfig, RfcConfig, SvmConfig
from .errors import ConfigError
from .locator import LocatorTrainConfig
from .losses import FplConfig
from .phantom import PhantomParams
from .preprocess import PreprocessConfig
from .seeding import child_seed
from .training import CaeTrainConfig

WORK_DIR_ENV = "CARDIOSCOPE_WORK_DIR"
RESOLVED_NAME = "resolved_config.toml"


def _plain(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, tuple):
            v = list(v)
        elif hasattr(v, "value"):  # enums
            v = v.value
        out[k] = v
    return out


def _drop(d: dict, *keys) -> dict:
    return {k: v for k, v in d.items() if k not in keys}


def default_config() -> dict:
    return {
        "master_seed": 0,
        "paths": {"work_dir": None, "pretrained_extractor": None},
        "phantom": {"n_subjects": 400, **PhantomParams().to_dict()},
        "locator": {"n_train_subjects": 100, "threshold": 0.5, "margin_vox": 5,
                    **_drop(_plain(asdict(LocatorTrainConfig())), "seed")},
        "preprocess": _plain(asdict(PreprocessConfig())),
        "cae": {**CaeConfig().to_dict(), "decoder_channels": None},
        "losses": {"allow_fallback": True, **_plain(asdict(FplConfig()))},
        "training": _drop(_plain(asdict(CaeTrainConfig())), "seed"),
        "classifiers": {
            "kinds": ["SVM", "RFC", "NN"],
            "grid_search": True,
            "svm": _plain(asdict(SvmConfig())),
            "rfc": _drop(_plain(asdict(RfcConfig())), "seed"),
            "nn": _drop(_plain(asdict(NnConfig())), "seed"),
            "svm_grid": copy.deepcopy(DEFAULT_SVM_GRID),
            "rfc_grid": copy.deepcopy(DEFAULT_RFC_GRID),
        },
        "evaluation": {"n_folds": 8, "test_size": 100, "val_size": 50},
    }


def _coerce(value, default, where: str):
    if default is None or (where.endswith("test_size") and value == "auto"):
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table, got {value!r}")
        return value
    return value


def _merge(base: dict, override: dict, prefix: str = "", open_keys: bool = False) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{prefix}{k}"
        if k not in base and not open_keys:
            raise ConfigError(f"unknown config key {where!r}")
        default = base.get(k)
        if isinstance(default, dict) and isinstance(v, dict):
            # grid tables take arbitrary parameter names
            out[k] = _merge(default, v, where + ".", open_keys=k.endswith("_grid"))
        else:
            out[k] = _coerce(v, default, where)
    return out


def parse_override(item: str) -> dict:
    """``"a.b.c=3"`` -> ``{"a": {"b": {"c": 3}}}``; values are parsed as TOML, else taken as strings."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    node: dict = {}
    root = node
    parts = key.split(".")
    for p in parts[:-1]:
        node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return root


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    return d


class PipelineConfig:
    """Resolved configuration plus typed accessors for each stage."""

    def __init__(self, data: dict | None = None):
        self.data = _merge(default_config(), data or {})
        self._validate()

    # ---- construction
    @classmethod
    def load(cls, path=None, overrides=()) -> "PipelineConfig":
        data: dict = {}
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file {path} not found")
            try:
                data = tomllib.loads(path.read_text())
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        merged = _merge(default_config(), data)
        for item in overrides:
            merged = _merge(merged, parse_override(item))
        return cls(merged)

    @classmethod
    def builtin(cls, name: str, overrides=()) -> "PipelineConfig":
        path = Path(__file__).parent / "configs" / f"{name}.toml"
        if not path.is_file():
            raise ConfigError(f"no built-in config named {name!r}")
        return cls.load(path, overrides)

    def _validate(self) -> None:
        d = self.data
        try:
            self.phantom_params().validate()
            self.locator_train_config()
            self.preprocess_config()
            self.cae_config().validate()
            self.fpl_config()
            self.train_config(0)
            self.svm_config()
            self.rfc_config(0)
            self.nn_config(0)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if d["preprocess"]["cube_size"] != d["cae"]["input_size"]:
            raise ConfigError(f"preprocess.cube_size ({d['preprocess']['cube_size']}) must equal "
                              f"cae.input_size ({d['cae']['input_size']})")
        unknown = set(d["classifiers"]["kinds"]) - {"SVM", "RFC", "NN"}
        if unknown or not d["classifiers"]["kinds"]:
            raise ConfigError(f"classifiers.kinds must be a non-empty subset of SVM, RFC, NN; got {d['classifiers']['kinds']}")
        ev = d["evaluation"]
        if ev["n_folds"] < 2:
            raise ConfigError("evaluation.n_folds must be >= 2")
        if ev["test_size"] is not None and not (isinstance(ev["test_size"], int) and ev["test_size"] > 0) \
                and ev["test_size"] != "auto":
            raise ConfigError("evaluation.test_size must be a positive integer or \"auto\"")
        if d["phantom"]["n_subjects"] < 2 or d["locator"]["n_train_subjects"] < 2:
            raise ConfigError("cohorts need at least 2 subjects")

    # ---- typed views
    def phantom_params(self) -> PhantomParams:
        return PhantomParams(**_drop(self.data["phantom"], "n_subjects"))

    def locator_train_config(self, seed: int = 0) -> LocatorTrainConfig:
        return LocatorTrainConfig(**_drop(self.data["locator"], "n_train_subjects", "threshold", "margin_vox"),
                                  seed=seed)

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(**self.data["preprocess"])

    def cae_config(self) -> CaeConfig:
        return CaeConfig(**self.data["cae"])

    def fpl_config(self) -> FplConfig:
        return FplConfig(**_drop(self.data["losses"], "allow_fallback"))

    def train_config(self, seed: int) -> CaeTrainConfig:
        return CaeTrainConfig(**self.data["training"], seed=seed)

    def svm_config(self) -> SvmConfig:
        return SvmConfig(**self.data["classifiers"]["svm"])

    def rfc_config(self, seed: int) -> RfcConfig:
        return RfcConfig(**self.data["classifiers"]["rfc"], seed=seed)

    def nn_config(self, seed: int) -> NnConfig:
        return NnConfig(**self.data["classifiers"]["nn"], seed=seed)

    @property
    def master_seed(self) -> int:
        return int(self.data["master_seed"])

    def seed(self, *keys) -> int:
        return child_seed(self.master_seed, *keys)

    @property
    def test_size(self) -> int | None:
        t = self.data["evaluation"]["test_size"]
        return None if t in (None, "auto") else int(t)

    def work_dir(self, override=None) -> Path:
        chosen = override or self.data["paths"]["work_dir"] or os.environ.get(WORK_DIR_ENV)
        if not chosen:
            raise ConfigError(f"no work directory: set paths.work_dir, --work-dir or ${WORK_DIR_ENV}")
        return Path(chosen)

    # ---- serialization
    def to_toml(self, include_paths: bool = True) -> str:
        d = _strip_none(self.data)
        if not include_paths:
            d.pop("paths", None)
        return tomli_w.dumps(d)

    def hash(self) -> str:
        """Content hash of everything except filesystem paths."""
        return hashlib.sha256(self.to_toml(include_paths=False).encode()).hexdigest()[:16]

    def section_hash(self, *names: str) -> str:
        h = hashlib.sha256(str(self.master_seed).encode())
        for n in names:
            h.update(tomli_w.dumps({n: _strip_none(self.data[n])}).encode())
        return h.hexdigest()[:16]

    def write_resolved(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RESOLVED_NAME
        path.write_text(self.to_toml(include_paths=False))
        return path
