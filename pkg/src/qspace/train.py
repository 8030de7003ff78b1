"""Cross-validation folds, slice batching, ensemble training and slice-weighted inference."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from sklearn.model_selection import StratifiedKFold

from .data import Dataset, Patient
from .errors import ClassExhausted, ConfigError, InsufficientData, TrainingDiverged
from .nn import Adam, Network, epoch_learning_rate
from .pipelines import (MIN_INPUT_SIZE, SIZE_MULTIPLE, ModelKind, NetworkConfig,
                        build_network, pad_batch, padded_size, slice_input)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batches_per_epoch: int = 100
    slices_per_class: int = 25
    lr0: float = 5e-4
    lr_epoch_decay: float = 0.985
    ensemble_size: int = 15
    folds: int = 10
    split: tuple = (0.8, 0.1, 0.1)
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        split = tuple(float(s) for s in self.split)
        object.__setattr__(self, "split", split)
        if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9 or min(split) <= 0:
            raise ConfigError(f"split must be three positive fractions summing to 1, got {split}")
        for name in ("epochs", "batches_per_epoch", "slices_per_class", "ensemble_size", "folds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.folds < 3:
            raise ConfigError("need at least 3 folds (train, validation, test)")
        if self.lr0 <= 0 or not 0 < self.lr_epoch_decay <= 1:
            raise ConfigError("lr0 must be > 0 and lr_epoch_decay in (0, 1]")

    @property
    def val_folds(self) -> int:
        return max(1, round(self.split[1] * self.folds))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "split" in d:
            d["split"] = tuple(d["split"])
        return cls(**d)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return epoch_learning_rate(cfg.lr0, cfg.lr_epoch_decay, epoch)


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class Fold:
    index: int
    train: tuple
    val: tuple
    test: tuple

    def to_dict(self) -> dict:
        return {"index": self.index, "train": list(self.train), "val": list(self.val),
                "test": list(self.test)}


def make_folds(labels: Sequence[int], cfg: TrainConfig) -> list:
    """Patient-level stratified folds; fold ``k`` validates on the next ``val_folds`` test folds.

    Takes the per-patient label vector (``Dataset.labels``); returns :class:`Fold`
    objects holding patient indices.
    """
    y = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(y, minlength=2)
    if counts.min() < cfg.folds:
        raise InsufficientData(f"{cfg.folds} folds need >= {cfg.folds} patients per class, "
                               f"have {counts.tolist()}")
    skf = StratifiedKFold(n_splits=cfg.folds, shuffle=True, random_state=cfg.seed % (2 ** 32))
    tests = [np.sort(idx) for _, idx in skf.split(np.zeros(len(y)), y)]
    folds = []
    for k in range(cfg.folds):
        val_ids = [(k + 1 + j) % cfg.folds for j in range(cfg.val_folds)]
        val = np.sort(np.concatenate([tests[j] for j in val_ids]))
        held = set(tests[k].tolist()) | set(val.tolist())
        train = np.array([i for i in range(len(y)) if i not in held], dtype=np.int64)
        folds.append(Fold(k, tuple(int(i) for i in train), tuple(int(i) for i in val),
                          tuple(int(i) for i in tests[k])))
    return folds


# ---------------------------------------------------------------------------
# slice pools and batches


@dataclass
class SlicePool:
    """Network input slices of a patient subset, grouped by class label."""

    kind: ModelKind
    slices: dict = field(default_factory=lambda: {0: [], 1: []})
    owners: dict = field(default_factory=lambda: {0: [], 1: []})

    def count(self, label: int) -> int:
        return len(self.slices[label])


def patient_slices(kind: ModelKind, net_cfg: NetworkConfig, patient: Patient,
                   maps: Optional[np.ndarray] = None) -> list:
    """All visible slices of one patient as network inputs (empty when invisible)."""
    return [slice_input(kind, net_cfg, patient.stack, patient.roi, z, maps)
            for z in patient.roi.visible_slices()]


def build_pool(kind: ModelKind, net_cfg: NetworkConfig, patients: Sequence[Patient],
               maps: Optional[dict] = None) -> SlicePool:
    pool = SlicePool(kind)
    for p in patients:
        m = maps.get(p.patient_id) if maps is not None else None
        for s in patient_slices(kind, net_cfg, p, m):
            pool.slices[p.label.target].append(s.data)
            pool.owners[p.label.target].append(p.patient_id)
    return pool


def augment_slice(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independently mirror left-right, mirror up-down and rotate by 90 degrees, each with p=0.5."""
    if rng.random() < 0.5:
        a = a[:, :, ::-1]
    if rng.random() < 0.5:
        a = a[:, ::-1, :]
    if rng.random() < 0.5:
        a = np.rot90(a, 1, axes=(1, 2))
    return a


def sample_batch(pool: SlicePool, cfg: TrainConfig, rng: np.random.Generator,
                 augment: Optional[bool] = None):
    """``slices_per_class`` slices per class, drawn with replacement, zero-padded into one batch."""
    augment = cfg.augment if augment is None else augment
    arrays, targets = [], []
    for label in (0, 1):
        if pool.count(label) == 0:
            raise ClassExhausted(f"no visible training slices for class {label}")
        for i in rng.integers(0, pool.count(label), cfg.slices_per_class):
            a = pool.slices[label][i]
            arrays.append(augment_slice(a, rng) if augment else a)
            targets.append(label)
    return pad_batch(arrays), np.asarray(targets, dtype=np.int64)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainedModel:
    kind: ModelKind
    members: list
    history: list           # per member: dict of epoch losses and selected epoch

    def __len__(self):
        return len(self.members)


def _grouped_batches(arrays: Sequence[np.ndarray], max_batch: int = 64):
    """Group slices by padded size so that inference batches need no extra padding."""
    groups: dict = {}
    for i, a in enumerate(arrays):
        groups.setdefault(padded_size(a.shape[1], a.shape[2]), []).append(i)
    for key in sorted(groups):
        idx = groups[key]
        for start in range(0, len(idx), max_batch):
            chunk = idx[start:start + max_batch]
            yield chunk, pad_batch([arrays[i] for i in chunk])


def slice_probabilities(net: Network, arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Malignant-class probability of every slice, each padded to its own size."""
    out = np.empty(len(arrays), dtype=np.float64)
    for chunk, batch in _grouped_batches(arrays):
        out[chunk] = net.predict_proba(batch)[:, 1]
    return out


def validation_loss(net: Network, pool: SlicePool) -> float:
    arrays = pool.slices[0] + pool.slices[1]
    if not arrays:
        return math.nan
    targets = np.array([0] * pool.count(0) + [1] * pool.count(1))
    p = np.clip(slice_probabilities(net, arrays), 1e-12, 1 - 1e-12)
    return float(-np.mean(np.where(targets == 1, np.log(p), np.log1p(-p))))


def member_seeds(base_seed: int, kind: ModelKind, fold: int, member: int, attempt: int = 0):
    ss = np.random.SeedSequence([base_seed, list(ModelKind).index(kind), fold, member, attempt])
    init, batch, drop = ss.generate_state(3, dtype=np.uint64)
    return int(init), int(batch), int(drop)


def train_member(kind: ModelKind, train_pool: SlicePool, val_pool: SlicePool,
                 cfg: TrainConfig, net_cfg: NetworkConfig, in_channels: int,
                 seeds: tuple) -> tuple:
    init_seed, batch_seed, drop_seed = seeds
    net = build_network(kind, net_cfg, in_channels, seed=init_seed)
    opt = Adam(net.parameters())
    batch_rng = np.random.Generator(np.random.PCG64(batch_seed))
    drop_rng = np.random.Generator(np.random.PCG64(drop_seed))
    best_loss, best_flat, best_epoch = math.inf, net.get_flat().copy(), -1
    train_losses, val_losses = [], []
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        total = 0.0
        for _ in range(cfg.batches_per_epoch):
            x, y = sample_batch(train_pool, cfg, batch_rng)
            loss = net.loss(x, y, train=True, rng=drop_rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            net.backward(loss)
            opt.step(lr)
            opt.zero_grad()
            total += value
        train_losses.append(total / cfg.batches_per_epoch)
        vl = validation_loss(net, val_pool)
        val_losses.append(vl)
        if math.isnan(vl) or vl < best_loss:
            best_loss, best_flat, best_epoch = vl, net.get_flat().copy(), epoch
    net.set_flat(best_flat)
    history = {"train_loss": train_losses, "val_loss": val_losses, "selected_epoch": best_epoch}
    return net, history


def train_model(kind: ModelKind, train_pool: SlicePool, val_pool: SlicePool, cfg: TrainConfig,
                net_cfg: NetworkConfig, in_channels: int = 5, fold: int = 0) -> TrainedModel:
    """Train ``ensemble_size`` independently seeded members.

    Each member keeps the parameters of its best validation-loss epoch. A member
    whose loss turns non-finite is retrained once with fresh seeds.
    """
    if not kind.is_network:
        raise ConfigError(f"{kind.value} has no trainable network")
    members, history = [], []
    for m in range(cfg.ensemble_size):
        for attempt in range(2):
            seeds = member_seeds(cfg.seed, kind, fold, m, attempt)
            try:
                net, h = train_member(kind, train_pool, val_pool, cfg, net_cfg, in_channels, seeds)
                break
            except TrainingDiverged as exc:
                log.warning("%s fold %d member %d diverged (%s)", kind.value, fold, m, exc)
                if attempt == 1:
                    raise
        h["attempt"] = attempt
        members.append(net)
        history.append(h)
    return TrainedModel(kind, members, history)


# ---------------------------------------------------------------------------
# inference


@dataclass(frozen=True)
class PatientPrediction:
    patient_id: str
    p_malignant: float
    per_slice: tuple        # ((p_ij, v_ij), ...)
    total_voxels: int

    def to_dict(self) -> dict:
        return {"patient_id": self.patient_id, "p_malignant": self.p_malignant,
                "per_slice": [list(s) for s in self.per_slice], "total_voxels": self.total_voxels}


def aggregate_slices(probs: Sequence[float], voxels: Sequence[int]) -> float:
    """Voxel-weighted mean ``(1/v) sum_j p_j v_j`` evaluated exactly, then rounded once."""
    v = sum(int(n) for n in voxels)
    if v == 0:
        return 0.0
    total = sum((Fraction(float(p)) * int(n) for p, n in zip(probs, voxels)), Fraction(0))
    return float(total / v)


def ensemble_slice_probabilities(members: Sequence[Network], arrays: Sequence[np.ndarray]) -> np.ndarray:
    per_member = np.stack([slice_probabilities(net, arrays) for net in members])
    return np.array([math.fsum(col) / len(members) for col in per_member.T])


def predict_patient(members: Sequence[Network], kind: ModelKind, net_cfg: NetworkConfig,
                    patient: Patient, maps: Optional[np.ndarray] = None) -> PatientPrediction:
    """Ensemble-averaged slice probabilities combined by voxel count; invisible lesions get 0."""
    if not members:
        raise ConfigError("empty ensemble")
    slices = patient_slices(kind, net_cfg, patient, maps)
    if not slices:
        return PatientPrediction(patient.patient_id, 0.0, (), 0)
    probs = ensemble_slice_probabilities(members, [s.data for s in slices])
    voxels = [s.voxel_count for s in slices]
    per_slice = tuple((float(p), int(v)) for p, v in zip(probs, voxels))
    return PatientPrediction(patient.patient_id, aggregate_slices(probs, voxels), per_slice,
                             int(sum(voxels)))
