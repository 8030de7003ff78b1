"""Synthetic multi-b-value lesion phantoms with known kurtosis parameters.

Each patient gets one ellipsoidal lesion inside a volume of uniform breast
tissue with a fat slab along the top rows. Lesion voxels carry parameters drawn
from their class distribution; ``texture_mode`` controls how the parameters vary
inside the lesion:

``uniform``        every voxel takes the lesion-level parameters
``smooth_field``   Gaussian random fields with a shared smoothing length
``class_texture``  as ``smooth_field`` but the smoothing length is per class
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .data import (DEFAULT_BVALUES, BValueSet, Dataset, DwiStack, Label, LesionRoi,
                   Patient)
from .errors import ConfigError
from .signal import forward_signal

RNG_ALGORITHM = "numpy.PCG64/SeedSequence([seed, patient_index])"
TEXTURE_MODES = ("uniform", "smooth_field", "class_texture")

# generated parameters stay strictly inside the fit's admissible box
ADC_LIMITS = (0.05, 3.4)
AKC_LIMITS = (0.02, 2.9)

# (s0, adc, akc) of the non-lesion regions
TISSUE_PARAMS = (600.0, 2.1, 0.4)
FAT_PARAMS = (350.0, 0.08, 0.2)


@dataclass(frozen=True)
class ClassDistribution:
    """Parameter distribution of one lesion class.

    ``*_mean``/``*_sd`` describe the lesion-level (between-patient) normal
    distribution. The ``voxel_*`` amplitudes set the within-lesion variation,
    with ``voxel_s0_cv`` relative to the lesion S0. ``s0_adc_corr`` couples the
    S0 and ADC voxel fields.
    """

    adc_mean: float
    adc_sd: float
    akc_mean: float
    akc_sd: float
    s0_mean: float = 1000.0
    s0_sd: float = 100.0
    voxel_adc_sd: float = 0.1
    voxel_akc_sd: float = 0.05
    voxel_s0_cv: float = 0.05
    texture_sigma: float = 2.0
    s0_adc_corr: float = 0.0

    def validate(self, name: str):
        for lo, hi, mean, what in ((*ADC_LIMITS, self.adc_mean, "adc_mean"),
                                   (*AKC_LIMITS, self.akc_mean, "akc_mean")):
            if not lo <= mean <= hi:
                raise ConfigError(f"{name}.{what}={mean} outside [{lo}, {hi}]")
        if self.s0_mean <= 0:
            raise ConfigError(f"{name}.s0_mean must be > 0")
        if min(self.adc_sd, self.akc_sd, self.s0_sd, self.voxel_adc_sd,
               self.voxel_akc_sd, self.voxel_s0_cv, self.texture_sigma) < 0:
            raise ConfigError(f"{name}: spreads and texture_sigma must be >= 0")
        if not -1.0 <= self.s0_adc_corr <= 1.0:
            raise ConfigError(f"{name}.s0_adc_corr must lie in [-1, 1]")


def _default_dists():
    return {
        "benign": ClassDistribution(adc_mean=1.8, adc_sd=0.25, akc_mean=0.6, akc_sd=0.12),
        "malignant": ClassDistribution(adc_mean=1.1, adc_sd=0.2, akc_mean=1.0, akc_sd=0.15),
    }


@dataclass(frozen=True)
class PhantomConfig:
    n_patients_per_class: int = 50
    bvalues: tuple = DEFAULT_BVALUES.values
    volume_shape: tuple = (12, 64, 64)
    voxel_size: tuple = (3.0, 1.25, 1.25)
    lesion_size_range: tuple = (4, 24)
    class_param_dists: dict = field(default_factory=_default_dists)
    texture_mode: str = "smooth_field"
    texture_sigma: float = 2.0
    snr: float = math.inf
    site_mix: float = 0.0
    invisible_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        BValueSet(tuple(self.bvalues))
        if self.n_patients_per_class < 1:
            raise ConfigError("n_patients_per_class must be >= 1")
        if self.texture_mode not in TEXTURE_MODES:
            raise ConfigError(f"texture_mode must be one of {TEXTURE_MODES}")
        if not (self.snr > 0):
            raise ConfigError("snr must be > 0 (inf for noiseless)")
        if not 0.0 <= self.site_mix <= 1.0 or not 0.0 <= self.invisible_fraction <= 1.0:
            raise ConfigError("site_mix and invisible_fraction must lie in [0, 1]")
        if set(self.class_param_dists) != {"benign", "malignant"}:
            raise ConfigError("class_param_dists needs exactly 'benign' and 'malignant'")
        for name, d in self.class_param_dists.items():
            d.validate(name)
        lo, hi = self.lesion_size_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad lesion_size_range {self.lesion_size_range}")
        z, y, x = self.volume_shape
        if hi > y - _fat_rows(y) or hi > x or _z_extent(hi, self.voxel_size) > z:
            raise ConfigError(
                f"lesions up to {hi} voxels do not fit a {self.volume_shape} volume")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr"] = "inf" if math.isinf(self.snr) else self.snr
        for k in ("bvalues", "volume_shape", "voxel_size", "lesion_size_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown phantom config keys: {sorted(unknown)}")
        if "snr" in d:
            d["snr"] = math.inf if d["snr"] in (None, "inf", "Infinity") else float(d["snr"])
        if "class_param_dists" in d:
            dists = {}
            for name, spec in d["class_param_dists"].items():
                try:
                    dists[name] = ClassDistribution(**spec)
                except TypeError as exc:
                    raise ConfigError(f"class_param_dists.{name}: {exc}") from None
            d["class_param_dists"] = dists
        for k in ("bvalues", "volume_shape", "voxel_size", "lesion_size_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PhantomConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read phantom config {path}: {exc}") from None


def _fat_rows(rows: int) -> int:
    return max(2, rows // 8)


def _z_extent(inplane: int, voxel_size) -> int:
    dz, dy, _ = voxel_size
    return max(1, int(round(inplane * dy / dz)))


def rician_corrupt(clean, sigma, rng: np.random.Generator):
    """Magnitude of ``clean`` plus complex Gaussian noise of scale ``sigma``."""
    clean = np.asarray(clean, dtype=np.float64)
    g1 = rng.standard_normal(clean.shape)
    g2 = rng.standard_normal(clean.shape)
    return np.sqrt((clean + g1 * sigma) ** 2 + (g2 * sigma) ** 2)


def patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _unit_field(shape, sigma_zyx, rng):
    """White noise smoothed separably and rescaled to unit marginal variance."""
    f = rng.standard_normal(shape)
    norm = 1.0
    for axis, s in enumerate(sigma_zyx):
        if s <= 0:
            continue
        f = gaussian_filter1d(f, s, axis=axis, mode="wrap", truncate=4.0)
        delta = np.zeros(shape[axis])
        delta[0] = 1.0
        k = gaussian_filter1d(delta, s, mode="wrap", truncate=4.0)
        norm *= float(np.sum(k * k))
    return f / math.sqrt(norm)


def _ellipsoid(shape, voxel_size, size_range, fat_rows, rng):
    z, y, x = shape
    lo, hi = size_range
    dy, dx = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
    dz = min(z, _z_extent((dy + dx) // 2, voxel_size))
    start = (int(rng.integers(0, z - dz + 1)),
             int(rng.integers(fat_rows, y - dy + 1)),
             int(rng.integers(0, x - dx + 1)))
    grids = np.ogrid[:z, :y, :x]
    r2 = np.zeros(shape)
    for g, s, d in zip(grids, start, (dz, dy, dx)):
        centre = s + (d - 1) / 2.0
        r2 = r2 + ((g - centre) / (d / 2.0)) ** 2
    return r2 <= 1.0


def generate_patient(config: PhantomConfig, index: int) -> Patient:
    n = config.n_patients_per_class
    label = Label.BENIGN if index < n else Label.MALIGNANT
    dist = config.class_param_dists[label.value]
    rng = patient_rng(config.seed, index)
    shape = tuple(config.volume_shape)
    fat_rows = _fat_rows(shape[1])

    mask = _ellipsoid(shape, config.voxel_size, config.lesion_size_range, fat_rows, rng)
    s0_l = max(rng.normal(dist.s0_mean, dist.s0_sd), 0.05 * dist.s0_mean)
    adc_l = float(np.clip(rng.normal(dist.adc_mean, dist.adc_sd), *ADC_LIMITS))
    akc_l = float(np.clip(rng.normal(dist.akc_mean, dist.akc_sd), *AKC_LIMITS))

    s0 = np.full(shape, TISSUE_PARAMS[0])
    adc = np.full(shape, TISSUE_PARAMS[1])
    akc = np.full(shape, TISSUE_PARAMS[2])
    s0[:, :fat_rows], adc[:, :fat_rows], akc[:, :fat_rows] = FAT_PARAMS

    if config.texture_mode == "uniform":
        v_s0, v_adc, v_akc = s0_l, adc_l, akc_l
    else:
        sig = dist.texture_sigma if config.texture_mode == "class_texture" else config.texture_sigma
        dz, dy, dx = config.voxel_size
        sigmas = (sig * dy / dz, sig, sig * dy / dx)
        z_adc = _unit_field(shape, sigmas, rng)
        z_akc = _unit_field(shape, sigmas, rng)
        z_s0 = _unit_field(shape, sigmas, rng)
        rho = dist.s0_adc_corr
        z_s0 = rho * z_adc + math.sqrt(1.0 - rho * rho) * z_s0
        v_adc = np.clip(adc_l + dist.voxel_adc_sd * z_adc, *ADC_LIMITS)[mask]
        v_akc = np.clip(akc_l + dist.voxel_akc_sd * z_akc, *AKC_LIMITS)[mask]
        v_s0 = np.maximum(s0_l * (1.0 + dist.voxel_s0_cv * z_s0), 0.05 * s0_l)[mask]
    s0[mask], adc[mask], akc[mask] = v_s0, v_adc, v_akc

    b = np.asarray(config.bvalues, dtype=np.float64).reshape(-1, 1, 1, 1)
    clean = forward_signal(s0[None], adc[None], akc[None], b)
    if math.isinf(config.snr):
        noisy = clean
    else:
        noisy = rician_corrupt(clean, s0_l / config.snr, rng)

    site_id, scale = "A", 1.0
    if rng.random() < config.site_mix:
        site_id, scale = "B", float(rng.uniform(0.5, 2.0))
    channels = (noisy * scale).astype(np.float32)
    fat_reference = float(np.mean(channels[0][:, :fat_rows], dtype=np.float64))

    invisible = bool(rng.random() < config.invisible_fraction)
    roi = LesionRoi(np.zeros(shape, bool) if invisible else mask, label, invisible)
    pid = f"p{index:04d}"
    stack = DwiStack(pid, site_id, channels, fat_reference, tuple(config.voxel_size))
    truth = {"s0": s0.astype(np.float32), "adc": adc.astype(np.float32),
             "akc": akc.astype(np.float32)}
    return Patient(stack, roi, truth)


def generate(config: PhantomConfig, jobs: int = 1) -> Dataset:
    """Build a dataset of ``2 * n_patients_per_class`` patients, benign first.

    Each patient draws from its own stream derived from ``(seed, index)``, so the
    result does not depend on ``jobs``.
    """
    indices = range(2 * config.n_patients_per_class)
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(jobs) as pool:
            patients = list(pool.map(lambda i: generate_patient(config, i), indices))
    else:
        patients = [generate_patient(config, i) for i in indices]
    provenance = {"generator": "qspace.phantom", "rng": RNG_ALGORITHM,
                  "seed": int(config.seed), "config": config.to_dict()}
    return Dataset(tuple(patients), BValueSet(tuple(config.bvalues)), provenance)


# ---------------------------------------------------------------------------
# presets used by the experiments and the acceptance suite


def separable_config(**overrides) -> PhantomConfig:
    """Classes differ in mean ADC (1.0 vs 1.8 um^2/ms)."""
    dists = {
        "benign": ClassDistribution(adc_mean=1.8, adc_sd=0.12, akc_mean=0.8, akc_sd=0.1),
        "malignant": ClassDistribution(adc_mean=1.0, adc_sd=0.12, akc_mean=0.8, akc_sd=0.1),
    }
    base = dict(n_patients_per_class=60, class_param_dists=dists,
                texture_mode="smooth_field", snr=50.0)
    base.update(overrides)
    return PhantomConfig(**base)


def texture_config(**overrides) -> PhantomConfig:
    """Equal class means; malignant lesions are spatially rough, benign ones smooth."""
    common = dict(adc_mean=1.4, adc_sd=0.2, akc_mean=0.8, akc_sd=0.12,
                  voxel_adc_sd=0.35, voxel_akc_sd=0.15, voxel_s0_cv=0.1)
    dists = {
        "benign": ClassDistribution(texture_sigma=2.5, **common),
        "malignant": ClassDistribution(texture_sigma=0.0, **common),
    }
    base = dict(n_patients_per_class=60, class_param_dists=dists,
                texture_mode="class_texture", snr=100.0)
    base.update(overrides)
    return PhantomConfig(**base)


def joint_config(**overrides) -> PhantomConfig:
    """Equal class means; the voxel-wise S0/ADC coupling flips sign between classes."""
    common = dict(adc_mean=1.4, adc_sd=0.2, akc_mean=0.8, akc_sd=0.12, s0_sd=50.0,
                  voxel_adc_sd=0.35, voxel_akc_sd=0.05, voxel_s0_cv=0.3, texture_sigma=0.0)
    dists = {
        "benign": ClassDistribution(s0_adc_corr=0.9, **common),
        "malignant": ClassDistribution(s0_adc_corr=-0.9, **common),
    }
    base = dict(n_patients_per_class=60, class_param_dists=dists,
                texture_mode="smooth_field", texture_sigma=0.0, snr=100.0)
    base.update(overrides)
    return PhantomConfig(**base)


PRESETS = {"default": PhantomConfig, "separable": separable_config,
           "texture": texture_config, "joint": joint_config}


def preset(name: str, **overrides) -> PhantomConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown phantom preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name](**overrides)
