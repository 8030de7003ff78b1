"""Domain types, masked slice extraction and the on-disk dataset format.

A dataset directory holds::

    manifest.json
    volumes/<patient_id>_b<bvalue>.f32    one per b-value, little-endian float32, C order
    masks/<patient_id>.u8                 lesion mask, one byte per voxel
    truth/<patient_id>_<param>.f32        optional ground-truth parameter volumes
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .errors import (BadDataset, ConfigError, EmptySlice, FormatVersionError,
                     NonFiniteValues, ShapeMismatch)

FORMAT_NAME = "qspace-dataset"
FORMAT_VERSION = "1.0"
TRUTH_PARAMS = ("s0", "adc", "akc")

_ID_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class Label(str, Enum):
    BENIGN = "benign"
    MALIGNANT = "malignant"

    @property
    def target(self) -> int:
        return int(self is Label.MALIGNANT)


@dataclass(frozen=True)
class BValueSet:
    """Ordered diffusion weightings in s/mm^2, starting at 0."""

    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) < 3:
            raise ConfigError(f"need at least 3 b-values, got {len(vals)}")
        if vals[0] != 0.0:
            raise ConfigError("first b-value must be 0")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigError(f"b-values must be strictly increasing: {vals}")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def channel_name(self, index: int) -> str:
        b = self.values[index]
        return f"b{int(b)}" if b.is_integer() else f"b{b!r}"


DEFAULT_BVALUES = BValueSet((0, 100, 750, 1500))


@dataclass(frozen=True, eq=False)
class DwiStack:
    """Multi-b-value signal volume of one patient.

    ``channels`` has shape ``(n_bvalues, slices, rows, cols)`` and is stored as
    float32.
    """

    patient_id: str
    site_id: str
    channels: np.ndarray
    fat_reference: float
    voxel_size: tuple = (3.0, 1.25, 1.25)

    def __post_init__(self):
        ch = np.ascontiguousarray(self.channels, dtype=np.float32)
        if ch.ndim != 4:
            raise ShapeMismatch(f"channels must be 4-D (b, z, y, x), got {ch.shape}")
        if not np.all(np.isfinite(ch)):
            raise NonFiniteValues(f"non-finite intensities for {self.patient_id}")
        if np.any(ch < 0):
            raise ConfigError(f"negative intensities for {self.patient_id}")
        if not (math.isfinite(self.fat_reference) and self.fat_reference > 0):
            raise ConfigError(f"fat_reference must be finite and > 0, got {self.fat_reference}")
        ch.setflags(write=False)
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "fat_reference", float(self.fat_reference))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))

    @property
    def shape(self) -> tuple:
        return self.channels.shape[1:]

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, DwiStack):
            return NotImplemented
        return (self.patient_id == other.patient_id and self.site_id == other.site_id
                and self.fat_reference == other.fat_reference
                and self.voxel_size == other.voxel_size
                and np.array_equal(self.channels, other.channels))


@dataclass(frozen=True, eq=False)
class LesionRoi:
    """Binary lesion mask with its class label.

    A lesion flagged ``invisible`` may have an empty mask; it is always predicted
    benign.
    """

    mask: np.ndarray
    label: Label
    invisible: bool = False

    def __post_init__(self):
        m = np.ascontiguousarray(self.mask, dtype=bool)
        if m.ndim != 3:
            raise ShapeMismatch(f"mask must be 3-D, got {m.shape}")
        if not self.invisible and not m.any():
            raise ConfigError("empty mask on a lesion not flagged invisible")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "label", Label(self.label))

    @property
    def shape(self) -> tuple:
        return self.mask.shape

    @property
    def voxel_count(self) -> int:
        return int(self.mask.sum())

    def visible_slices(self) -> list:
        if self.invisible:
            return []
        return [int(z) for z in np.flatnonzero(self.mask.any(axis=(1, 2)))]

    def slice_bbox(self, slice_index: int) -> tuple:
        """Half-open ``(row0, row1, col0, col1)`` box of the mask in one slice."""
        m = self.mask[slice_index]
        rows = np.flatnonzero(m.any(axis=1))
        if rows.size == 0:
            raise EmptySlice(f"slice {slice_index} has an empty mask")
        cols = np.flatnonzero(m.any(axis=0))
        return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1

    @property
    def bbox(self) -> dict:
        return {z: self.slice_bbox(z) for z in self.visible_slices()}

    def __eq__(self, other):
        if not isinstance(other, LesionRoi):
            return NotImplemented
        return (self.label == other.label and self.invisible == other.invisible
                and np.array_equal(self.mask, other.mask))


@dataclass(frozen=True)
class Patient:
    stack: DwiStack
    roi: LesionRoi
    truth: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        if self.stack.shape != self.roi.shape:
            raise ShapeMismatch(
                f"{self.stack.patient_id}: roi shape {self.roi.shape} != stack shape {self.stack.shape}")

    @property
    def patient_id(self) -> str:
        return self.stack.patient_id

    @property
    def label(self) -> Label:
        return self.roi.label


@dataclass(frozen=True, eq=False)
class Dataset:
    patients: tuple
    bvalues: BValueSet = DEFAULT_BVALUES
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        patients = tuple(self.patients)
        seen = set()
        for p in patients:
            pid = p.patient_id
            if not _ID_RE.match(pid):
                raise ConfigError(f"patient id {pid!r} is not filesystem-safe")
            if pid in seen:
                raise ConfigError(f"duplicate patient id {pid!r}")
            seen.add(pid)
            if p.stack.n_channels != len(self.bvalues):
                raise ShapeMismatch(
                    f"{pid}: {p.stack.n_channels} channels for {len(self.bvalues)} b-values")
        object.__setattr__(self, "patients", patients)

    def __len__(self):
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    @property
    def patient_ids(self) -> list:
        return [p.patient_id for p in self.patients]

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label.target for p in self.patients], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.patients[i] for i in indices), self.bvalues, self.provenance)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.bvalues != other.bvalues or self.provenance != other.provenance
                or len(self) != len(other)):
            return False
        for a, b in zip(self.patients, other.patients):
            if a.stack != b.stack or a.roi != b.roi:
                return False
            if (a.truth is None) != (b.truth is None):
                return False
            if a.truth is not None and (
                    set(a.truth) != set(b.truth)
                    or not all(np.array_equal(a.truth[k], b.truth[k]) for k in a.truth)):
                return False
        return True


@dataclass(frozen=True)
class MaskedSlice:
    """One lesion slice cropped to its bounding box, zero outside the mask."""

    data: np.ndarray        # (channels, h, w) float32
    mask: np.ndarray        # (h, w) bool
    slice_index: int
    bbox: tuple

    @property
    def voxel_count(self) -> int:
        return int(self.mask.sum())

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]


def crop_channels(volume: np.ndarray, roi: LesionRoi, slice_index: int) -> MaskedSlice:
    """Crop a ``(channels, z, y, x)`` volume to one mask slice and zero the exterior."""
    r0, r1, c0, c1 = roi.slice_bbox(slice_index)
    m = roi.mask[slice_index, r0:r1, c0:c1]
    data = np.where(m, volume[:, slice_index, r0:r1, c0:c1], 0).astype(np.float32)
    return MaskedSlice(data, m.copy(), slice_index, (r0, r1, c0, c1))


def crop_to_roi(stack: DwiStack, roi: LesionRoi, slice_index: int) -> MaskedSlice:
    """Network input for one slice: the b-value channels plus the fat intensity map last."""
    if stack.shape != roi.shape:
        raise ShapeMismatch(f"roi shape {roi.shape} != stack shape {stack.shape}")
    r0, r1, c0, c1 = roi.slice_bbox(slice_index)
    n_b = stack.n_channels
    sub = np.empty((n_b + 1, r1 - r0, c1 - c0), dtype=np.float32)
    sub[:n_b] = stack.channels[:, slice_index, r0:r1, c0:c1]
    sub[n_b] = stack.fat_reference
    m = roi.mask[slice_index, r0:r1, c0:c1]
    sub *= m
    return MaskedSlice(sub, m.copy(), slice_index, (r0, r1, c0, c1))


# ---------------------------------------------------------------------------
# on-disk format


def _write_f32(path: Path, arr: np.ndarray):
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C"))


def _read_raw(path: Path, dtype: str, shape: tuple, what: str) -> np.ndarray:
    if not path.is_file():
        raise BadDataset(f"missing payload {path}")
    raw = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise ShapeMismatch(
            f"{what}: manifest shape {tuple(shape)} needs {expected} values, payload has {raw.size}")
    return raw.reshape(shape)


def write_dataset(ds: Dataset, directory) -> Path:
    """Write ``ds`` under ``directory`` and return the manifest path."""
    root = Path(directory)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    entries = []
    for p in ds.patients:
        pid = p.patient_id
        vols = []
        for i in range(len(ds.bvalues)):
            rel = f"volumes/{pid}_{ds.bvalues.channel_name(i)}.f32"
            _write_f32(root / rel, p.stack.channels[i])
            vols.append(rel)
        mask_rel = f"masks/{pid}.u8"
        (root / mask_rel).write_bytes(p.roi.mask.astype(np.uint8).tobytes(order="C"))
        entry = {
            "patient_id": pid,
            "site_id": p.stack.site_id,
            "shape": list(p.stack.shape),
            "voxel_size": list(p.stack.voxel_size),
            "fat_reference": p.stack.fat_reference,
            "label": p.label.value,
            "invisible": p.roi.invisible,
            "volumes": vols,
            "mask": mask_rel,
        }
        if p.truth is not None:
            (root / "truth").mkdir(exist_ok=True)
            entry["truth"] = {}
            for name in sorted(p.truth):
                rel = f"truth/{pid}_{name}.f32"
                _write_f32(root / rel, p.truth[name])
                entry["truth"][name] = rel
        entries.append(entry)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "bvalues": list(ds.bvalues.values),
        "provenance": ds.provenance,
        "patients": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(directory) -> Dataset:
    root = Path(directory)
    path = root / "manifest.json"
    if not path.is_file():
        raise BadDataset(f"no manifest.json in {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BadDataset(f"unreadable manifest: {exc}") from None
    if manifest.get("format") != FORMAT_NAME:
        raise BadDataset(f"not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"manifest version {manifest.get('version')!r}, expected {FORMAT_VERSION!r}")
    bvalues = BValueSet(tuple(manifest["bvalues"]))
    patients = []
    for e in manifest["patients"]:
        shape = tuple(e["shape"])
        if len(e["volumes"]) != len(bvalues):
            raise ShapeMismatch(f"{e['patient_id']}: {len(e['volumes'])} volumes for {len(bvalues)} b-values")
        chans = np.stack([_read_raw(root / rel, "<f4", shape, rel) for rel in e["volumes"]])
        if not np.all(np.isfinite(chans)):
            raise NonFiniteValues(f"non-finite payload for {e['patient_id']}")
        mask = _read_raw(root / e["mask"], "u1", shape, e["mask"])
        truth = None
        if "truth" in e:
            truth = {k: _read_raw(root / rel, "<f4", shape, rel).astype(np.float32)
                     for k, rel in e["truth"].items()}
        stack = DwiStack(e["patient_id"], e["site_id"], chans.astype(np.float32),
                         float(e["fat_reference"]), tuple(e["voxel_size"]))
        roi = LesionRoi(mask.astype(bool), Label(e["label"]), bool(e["invisible"]))
        patients.append(Patient(stack, roi, truth))
    return Dataset(tuple(patients), bvalues, manifest.get("provenance", {}))


def dataset_summary(ds: Dataset) -> dict[str, Any]:
    labels = ds.labels
    return {"patients": len(ds), "malignant": int(labels.sum()),
            "benign": int(len(labels) - labels.sum()), "bvalues": list(ds.bvalues.values)}
