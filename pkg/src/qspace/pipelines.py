"""The five competing classifiers: E2E, F2E, DDC and the scalar ADC/AKC baselines."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .data import DwiStack, LesionRoi, MaskedSlice, crop_channels, crop_to_roi
from .dki import LesionCoefficients
from .errors import ConfigError, ShapeMismatch
from .nn import LayerSpec, Network

MIN_INPUT_SIZE = 8
SIZE_MULTIPLE = 4
BENIGN_SENTINEL = -math.inf


class ModelKind(str, Enum):
    E2E = "E2E"
    F2E = "F2E"
    DDC = "DDC"
    ADC_SCALAR = "ADC"
    AKC_SCALAR = "AKC"

    @property
    def is_network(self) -> bool:
        return self in (ModelKind.E2E, ModelKind.F2E, ModelKind.DDC)

    @property
    def uses_maps(self) -> bool:
        return self is ModelKind.F2E

    @classmethod
    def parse(cls, name: str) -> "ModelKind":
        key = name.strip().upper()
        for kind in cls:
            if key in (kind.value, kind.name, kind.name.split("_")[0]):
                return kind
        raise ConfigError(f"unknown model kind {name!r}")


TABLE_ORDER = (ModelKind.E2E, ModelKind.F2E, ModelKind.DDC, ModelKind.ADC_SCALAR, ModelKind.AKC_SCALAR)


@dataclass(frozen=True)
class NetworkConfig:
    signal_widths: tuple = (128, 256, 512)
    rep_width: int = 64
    dropout_p: float = 0.5
    ddc_channels: int = 512
    # fixed multiplier on the raw a.u. signal and fat channels before the first layer
    input_scale: float = 1e-3
    n_classes: int = 2

    def __post_init__(self):
        widths = tuple(int(w) for w in self.signal_widths)
        object.__setattr__(self, "signal_widths", widths)
        if len(widths) != 3 or min(widths) < 1:
            raise ConfigError("signal_widths needs three positive widths")
        if widths[-1] != self.ddc_channels:
            raise ConfigError(
                f"last signal width {widths[-1]} must equal ddc_channels {self.ddc_channels}")
        if self.rep_width < 1 or not 0.0 <= self.dropout_p < 1.0 or self.input_scale <= 0:
            raise ConfigError("invalid rep_width, dropout_p or input_scale")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["signal_widths"] = list(self.signal_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        d = dict(d)
        if "signal_widths" in d:
            d["signal_widths"] = tuple(d["signal_widths"])
        return cls(**d)


def _conv(kind, cin, cout, p):
    out = [LayerSpec(kind, cin, cout), LayerSpec("relu")]
    if p > 0:
        out.append(LayerSpec("dropout", dropout_p=p))
    return out


def _signal_module(cfg: NetworkConfig, in_channels: int) -> list:
    specs, c = [], in_channels
    for w in cfg.signal_widths:
        specs += _conv("conv1x1", c, w, cfg.dropout_p)
        c = w
    return specs


def _representation_module(cfg: NetworkConfig, in_channels: int) -> list:
    specs, c = [], in_channels
    for block in range(2):
        for _ in range(3):
            specs += _conv("conv3x3", c, cfg.rep_width, cfg.dropout_p)
            c = cfg.rep_width
        if block == 0:
            specs.append(LayerSpec("maxpool2x2"))
    return specs


def _head(cfg: NetworkConfig, in_channels: int) -> list:
    # 1x1 conv on the pooled 1x1 maps: a linear read-out without a dense layer
    return [LayerSpec("global_avg_pool"),
            LayerSpec("conv1x1", in_channels, cfg.n_classes, relu_init=False),
            LayerSpec("softmax")]


def e2e_specs(cfg: NetworkConfig, in_channels: int = 5) -> list:
    return (_signal_module(cfg, in_channels) + _representation_module(cfg, cfg.ddc_channels)
            + _head(cfg, cfg.rep_width))


def f2e_specs(cfg: NetworkConfig) -> list:
    return _representation_module(cfg, 2) + _head(cfg, cfg.rep_width)


def ddc_specs(cfg: NetworkConfig, in_channels: int = 5) -> list:
    return _signal_module(cfg, in_channels) + _head(cfg, cfg.ddc_channels)


def build_e2e(cfg: NetworkConfig, in_channels: int = 5, seed: int = 0) -> Network:
    return Network(e2e_specs(cfg, in_channels), seed=seed, tag=ModelKind.E2E.value)


def build_f2e(cfg: NetworkConfig, seed: int = 0) -> Network:
    return Network(f2e_specs(cfg), seed=seed, tag=ModelKind.F2E.value)


def build_ddc_classifier(cfg: NetworkConfig, in_channels: int = 5, seed: int = 0) -> Network:
    return Network(ddc_specs(cfg, in_channels), seed=seed, tag=ModelKind.DDC.value)


def build_network(kind: ModelKind, cfg: NetworkConfig, in_channels: int = 5, seed: int = 0) -> Network:
    if kind is ModelKind.E2E:
        return build_e2e(cfg, in_channels, seed)
    if kind is ModelKind.F2E:
        return build_f2e(cfg, seed)
    if kind is ModelKind.DDC:
        return build_ddc_classifier(cfg, in_channels, seed)
    raise ConfigError(f"{kind.value} is not a network model")


def scalar_baseline(kind: ModelKind, lesion: Optional[LesionCoefficients]) -> float:
    """Malignancy score: lower ADC or higher AKC ranks as more malignant."""
    if lesion is None or not lesion.defined:
        return BENIGN_SENTINEL
    if kind is ModelKind.ADC_SCALAR:
        return -lesion.mean_adc
    if kind is ModelKind.AKC_SCALAR:
        return lesion.mean_akc
    raise ConfigError(f"{kind.value} is not a scalar baseline")


def score_to_coefficient(kind: ModelKind, threshold: float) -> str:
    """Render a score threshold in coefficient units, e.g. ``ADC <= 1.83``."""
    if not math.isfinite(threshold):
        return "none"
    if kind is ModelKind.ADC_SCALAR:
        return f"ADC <= {-threshold:.4g}"
    if kind is ModelKind.AKC_SCALAR:
        return f"AKC >= {threshold:.4g}"
    return f">= {threshold:.4g}"


# ---------------------------------------------------------------------------
# network inputs


def slice_input(kind: ModelKind, cfg: NetworkConfig, stack: DwiStack, roi: LesionRoi,
                slice_index: int, maps: Optional[np.ndarray] = None) -> MaskedSlice:
    if kind.uses_maps:
        if maps is None:
            raise ConfigError("F2E inputs need parametric maps")
        return crop_channels(maps, roi, slice_index)
    s = crop_to_roi(stack, roi, slice_index)
    return MaskedSlice((s.data * np.float32(cfg.input_scale)).astype(np.float32), s.mask,
                       s.slice_index, s.bbox)


def padded_size(h: int, w: int, minimum: int = MIN_INPUT_SIZE, multiple: int = SIZE_MULTIPLE) -> tuple:
    def up(n):
        return max(minimum, -(-n // multiple) * multiple)
    return up(h), up(w)


def pad_batch(arrays: Sequence[np.ndarray], minimum: int = MIN_INPUT_SIZE,
              multiple: int = SIZE_MULTIPLE) -> np.ndarray:
    """Stack ``(C, h, w)`` arrays into one zero-padded ``(N, C, H, W)`` batch.

    Each array sits in the top-left corner; ``H, W`` cover the largest array and
    are rounded up to ``multiple`` with a floor of ``minimum``.
    """
    if not arrays:
        raise ShapeMismatch("empty batch")
    c = arrays[0].shape[0]
    if any(a.shape[0] != c for a in arrays):
        raise ShapeMismatch("mixed channel counts in one batch")
    h, w = padded_size(max(a.shape[1] for a in arrays), max(a.shape[2] for a in arrays),
                       minimum, multiple)
    out = np.zeros((len(arrays), c, h, w), dtype=np.float32)
    for i, a in enumerate(arrays):
        out[i, :, :a.shape[1], :a.shape[2]] = a
    return out
