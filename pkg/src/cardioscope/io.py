"""Volume and cohort data model, plus NIfTI / CSV persistence."""
from __future__ import annotations

import csv
import json
import os
import struct
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import nibabel as nib
from nibabel.openers import ImageOpener
import numpy as np

from .errors import (
    DuplicateSubjectId,
    MalformedHeader,
    MissingFile,
    MissingTruth,
    NonPositiveSpacing,
    UnknownLabel,
    UnwritablePath,
)

MANIFEST_SCHEMA_VERSION = "1"


class IntensitySpace(str, Enum):
    HU = "HU"
    UNIT = "UNIT"


class Label(str, Enum):
    SURVIVOR = "SURVIVOR"
    NON_SURVIVOR = "NON_SURVIVOR"

    @classmethod
    def parse(cls, token: str) -> "Label":
        # case-sensitive on purpose
        try:
            return cls(token)
        except ValueError:
            raise UnknownLabel(f"unknown label token {token!r}") from None

    @property
    def positive(self) -> bool:
        return self is Label.NON_SURVIVOR


def _as_triple(values, name) -> tuple[float, float, float]:
    t = tuple(float(v) for v in values)
    if len(t) != 3:
        raise ValueError(f"{name} needs three components, got {len(t)}")
    return t


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    """A 3D intensity grid indexed ``data[x, y, z]``; z is the axial (slice) axis."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    intensity_space: IntensitySpace = IntensitySpace.HU

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D with non-empty axes, got shape {data.shape}")
        spacing = _as_triple(self.spacing, "spacing")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise NonPositiveSpacing(f"spacing must be finite and > 0, got {spacing}")
        space = IntensitySpace(self.intensity_space)
        if space is IntensitySpace.UNIT and data.size:
            lo, hi = float(np.min(data)), float(np.max(data))
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"UNIT volume has values outside [0, 1]: [{lo}, {hi}]")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        object.__setattr__(self, "intensity_space", space)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def replace(self, **changes) -> "VoxelVolume":
        return replace(self, **changes)


@dataclass(frozen=True)
class PhantomTruth:
    heart_bbox: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]
    calcium_volume_mm3: float
    risk_probability: float
    generator_seed: int


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    volume_path: str
    label: Label
    truth: PhantomTruth | None = None


@dataclass
class CohortManifest:
    subjects: list[SubjectRecord]
    metadata: dict[str, str] = field(default_factory=dict)
    root: Path | None = None  # directory relative volume paths resolve against

    def __post_init__(self):
        seen = set()
        for s in self.subjects:
            if s.subject_id in seen:
                raise DuplicateSubjectId(f"duplicate subject_id {s.subject_id!r}")
            seen.add(s.subject_id)

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    @property
    def ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    def counts(self) -> tuple[int, int]:
        """(survivors, non-survivors)."""
        pos = sum(s.label is Label.NON_SURVIVOR for s in self.subjects)
        return len(self.subjects) - pos, pos

    def labels(self) -> np.ndarray:
        return np.array([int(s.label.positive) for s in self.subjects], dtype=np.int64)

    def by_id(self) -> dict[str, SubjectRecord]:
        return {s.subject_id: s for s in self.subjects}

    def subset(self, ids: Iterable[str]) -> "CohortManifest":
        table = self.by_id()
        return CohortManifest([table[i] for i in ids], dict(self.metadata), self.root)

    def resolve(self, record: SubjectRecord) -> Path:
        p = Path(record.volume_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def require_truth(self) -> list[PhantomTruth]:
        missing = [s.subject_id for s in self.subjects if s.truth is None]
        if missing:
            raise MissingTruth(f"{len(missing)} subject(s) lack phantom truth, e.g. {missing[0]!r}")
        return [s.truth for s in self.subjects]


# --------------------------------------------------------------------------
# NIfTI volumes

def _header_float(value) -> float:
    # NIfTI stores float32; recover the shortest decimal that maps to it
    return float(np.format_float_positional(np.float32(value), unique=True, trim="0"))


def save_volume(v: VoxelVolume, path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise UnwritablePath(f"parent directory does not exist: {path.parent}")
    if not os.access(path.parent, os.W_OK):
        raise UnwritablePath(f"directory is not writable: {path.parent}")
    data = v.data
    if data.dtype == np.bool_:
        data = data.astype(np.uint8)
    affine = np.diag([*v.spacing, 1.0])
    affine[:3, 3] = v.origin
    img = nib.Nifti1Image(data, affine)
    img.header.set_zooms(v.spacing)
    img.header.set_xyzt_units("mm")
    img.header["descrip"] = f"intensity_space={v.intensity_space.value}".encode()
    try:
        nib.save(img, str(path))
    except PermissionError as exc:
        raise UnwritablePath(str(exc)) from exc


def load_volume(path) -> VoxelVolume:
    """Read a NIfTI-1 volume (``.nii`` or ``.nii.gz``).

    Spacing and origin come from the header. The intensity space defaults
    to HU unless the header description was written by :func:`save_volume`
    for a normalized volume.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such volume: {path}")
    try:
        # nibabel "fixes" zero pixdim to 1 on load; read the header unchecked first
        with ImageOpener(str(path)) as fh:
            raw = nib.Nifti1Header.from_fileobj(fh, check=False)
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
        zooms = raw["pixdim"][1:4]
        affine = img.affine
        descrip = img.header["descrip"].tobytes().rstrip(b"\x00").decode("ascii", "replace")
    except (OSError, EOFError, ValueError, zlib.error, struct.error,
            nib.filebasedimages.ImageFileError, nib.wrapstruct.WrapStructError,
            nib.spatialimages.HeaderDataError) as exc:
        raise MalformedHeader(f"cannot read {path}: {exc}") from exc
    if data.ndim > 3:
        data = data.reshape(data.shape[:3]) if all(d == 1 for d in data.shape[3:]) else data
    if data.ndim != 3:
        raise MalformedHeader(f"{path} is not a 3D volume (shape {data.shape})")
    spacing = tuple(_header_float(z) for z in zooms[:3])
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise NonPositiveSpacing(f"{path} has spacing {spacing}")
    origin = tuple(_header_float(o) for o in affine[:3, 3])
    space = IntensitySpace.UNIT if descrip == "intensity_space=UNIT" else IntensitySpace.HU
    return VoxelVolume(np.array(data), spacing, origin, space)


# --------------------------------------------------------------------------
# manifests

BASE_COLUMNS = ["subject_id", "volume_path", "label"]
TRUTH_COLUMNS = [
    "bbox_x0", "bbox_x1", "bbox_y0", "bbox_y1", "bbox_z0", "bbox_z1",
    "calcium_volume_mm3", "risk_probability", "generator_seed",
]


def _truth_to_row(t: PhantomTruth) -> list[str]:
    (x0, x1), (y0, y1), (z0, z1) = t.heart_bbox
    return [str(x0), str(x1), str(y0), str(y1), str(z0), str(z1),
            repr(float(t.calcium_volume_mm3)), repr(float(t.risk_probability)),
            str(t.generator_seed)]


def _truth_from_row(row: dict) -> PhantomTruth | None:
    values = [row.get(c, "") for c in TRUTH_COLUMNS]
    if all(v in ("", None) for v in values):
        return None
    if any(v in ("", None) for v in values):
        raise MissingTruth(f"partial truth columns for subject {row['subject_id']!r}")
    b = [int(v) for v in values[:6]]
    return PhantomTruth(
        heart_bbox=((b[0], b[1]), (b[2], b[3]), (b[4], b[5])),
        calcium_volume_mm3=float(values[6]),
        risk_probability=float(values[7]),
        generator_seed=int(values[8]),
    )


def metadata_path(manifest_path) -> Path:
    manifest_path = Path(manifest_path)
    return manifest_path.with_name(manifest_path.name + ".meta.json")


def save_manifest(m: CohortManifest, path) -> None:
    path = Path(path)
    if not path.parent.is_dir() or not os.access(path.parent, os.W_OK):
        raise UnwritablePath(f"cannot write manifest into {path.parent}")
    with_truth = any(s.truth is not None for s in m.subjects)
    header = BASE_COLUMNS + (TRUTH_COLUMNS if with_truth else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in m.subjects:
            row = [s.subject_id, str(s.volume_path), s.label.value]
            if with_truth:
                row += _truth_to_row(s.truth) if s.truth is not None else [""] * len(TRUTH_COLUMNS)
            w.writerow(row)
    meta = {"schema_version": MANIFEST_SCHEMA_VERSION, **{k: str(v) for k, v in m.metadata.items()}}
    metadata_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path, check_paths: bool = False) -> CohortManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such manifest: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in BASE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MalformedHeader(f"manifest {path} lacks columns {missing}")
        subjects = [
            SubjectRecord(row["subject_id"], row["volume_path"], Label.parse(row["label"]),
                          _truth_from_row(row))
            for row in reader
        ]
    meta_file = metadata_path(path)
    metadata = json.loads(meta_file.read_text(encoding="utf-8")) if meta_file.is_file() else {}
    m = CohortManifest(subjects, metadata, path.parent)
    if check_paths:
        for s in m.subjects:
            if not m.resolve(s).is_file():
                raise MissingFile(f"volume for {s.subject_id!r} not found: {m.resolve(s)}")
    return m


def subjects_from_labels(ids: Sequence[str], labels: Sequence[int]) -> list[SubjectRecord]:
    """Convenience for building label-only manifests (tests, encoding tables)."""
    return [SubjectRecord(i, "", Label.NON_SURVIVOR if y else Label.SURVIVOR)
            for i, y in zip(ids, labels)]
