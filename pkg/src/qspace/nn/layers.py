"""Layer objects and a sequential network built from :class:`LayerSpec` lists."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

from ..errors import ConfigError, ShapeMismatch, UsageError
from . import tensor as T
from .tensor import Tensor

LAYER_KINDS = ("conv1x1", "conv3x3", "relu", "maxpool2x2", "global_avg_pool", "dropout", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    dropout_p: float = 0.0
    # He initialisation assumes a following ReLU; the classifier head sets this False
    relu_init: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind.startswith("conv") and (self.in_channels < 1 or self.out_channels < 1):
            raise ConfigError(f"{self.kind} needs positive channel counts")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @property
    def kernel(self) -> int:
        return {"conv1x1": 1, "conv3x3": 3}.get(self.kind, 0)

    def to_dict(self) -> dict:
        return asdict(self)


class Layer:
    spec: LayerSpec

    def parameters(self) -> list:
        return []

    def forward(self, x: Tensor, train: bool, rng) -> Tensor:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, spec: LayerSpec, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        self.spec = spec
        k = spec.kernel
        fan_in = spec.in_channels * k * k
        gain = 2.0 if spec.relu_init else 1.0
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.standard_normal((spec.out_channels, spec.in_channels, k, k)) * np.sqrt(gain / fan_in)
        self.weight = T.parameter(w.astype(dtype))
        self.bias = T.parameter(np.zeros(spec.out_channels, dtype=dtype))

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, train, rng):
        return T.conv2d(x, self.weight, self.bias)


class ReLU(Layer):
    def __init__(self, spec):
        self.spec = spec

    def forward(self, x, train, rng):
        return T.relu(x)


class MaxPool2x2(Layer):
    def __init__(self, spec):
        self.spec = spec

    def forward(self, x, train, rng):
        return T.maxpool2x2(x)


class GlobalAvgPool(Layer):
    def __init__(self, spec):
        self.spec = spec

    def forward(self, x, train, rng):
        return T.global_avg_pool(x)


class Dropout(Layer):
    def __init__(self, spec):
        self.spec = spec

    def forward(self, x, train, rng):
        return T.dropout(x, self.spec.dropout_p, train, rng)


class Softmax(Layer):
    def __init__(self, spec):
        self.spec = spec

    def forward(self, x, train, rng):
        return T.softmax(x)


_BUILDERS = {"relu": ReLU, "maxpool2x2": MaxPool2x2, "global_avg_pool": GlobalAvgPool,
             "dropout": Dropout, "softmax": Softmax}


def build_layer(spec: LayerSpec, rng=None, dtype=np.float32) -> Layer:
    if spec.kind.startswith("conv"):
        return Conv2d(spec, rng, dtype)
    return _BUILDERS[spec.kind](spec)


class Network:
    """Sequential stack of layers producing class logits of shape ``(N, K)``.

    A trailing ``softmax`` spec is not applied by :meth:`forward`; the loss works on
    logits and :meth:`predict_proba` applies the softmax.
    """

    def __init__(self, specs: Iterable[LayerSpec], seed: int = 0, dtype=np.float32, tag: str = ""):
        self.specs = tuple(specs)
        if not self.specs or not self.specs[0].kind.startswith("conv"):
            raise ConfigError("a network starts with a convolution")
        rng = np.random.default_rng(seed)
        self.layers = [build_layer(s, rng, dtype) for s in self.specs]
        self.tag = tag
        self._forwarded = False

    @property
    def in_channels(self) -> int:
        return self.specs[0].in_channels

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> list:
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                out += [(f"{i}.weight", layer.weight), (f"{i}.bias", layer.bias)]
        return out

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def forward(self, x, train: bool = False, rng=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"network expects (N, {self.in_channels}, H, W), got {x.shape}")
        for layer in self.layers:
            if layer.spec.kind == "softmax":
                continue
            x = layer.forward(x, train, rng)
        self._forwarded = True
        return x.reshape((x.shape[0], -1))

    def loss(self, x, targets, train: bool = False, rng=None) -> Tensor:
        return T.softmax_cross_entropy(self.forward(x, train, rng), targets)

    def predict_proba(self, x) -> np.ndarray:
        logits = self.forward(x, train=False).data.astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def backward(self, loss: Tensor):
        if not self._forwarded:
            raise UsageError("backward before any forward pass")
        loss.backward()

    def astype(self, dtype) -> "Network":
        clone = Network.__new__(Network)
        clone.specs, clone.tag, clone._forwarded = self.specs, self.tag, False
        clone.layers = []
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                c = Conv2d.__new__(Conv2d)
                c.spec = layer.spec
                c.weight = T.parameter(layer.weight.data.astype(dtype))
                c.bias = T.parameter(layer.bias.data.astype(dtype))
                clone.layers.append(c)
            else:
                clone.layers.append(build_layer(layer.spec))
        return clone

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray):
        flat = np.asarray(flat)
        if flat.size != self.n_parameters():
            raise ShapeMismatch(f"{flat.size} values for {self.n_parameters()} parameters")
        pos = 0
        for p in self.parameters():
            n = p.data.size
            p.data = flat[pos:pos + n].reshape(p.data.shape).astype(p.data.dtype)
            pos += n
