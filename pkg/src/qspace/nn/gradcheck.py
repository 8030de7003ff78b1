"""Central finite-difference gradient checks for the autodiff engine.

Probes whose +eps and -eps evaluations see different ReLU or pooling patterns
straddle a non-differentiable point and are redrawn.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, record_patterns


@dataclass
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    probes: list
    rejected: int

    @property
    def relative_error(self) -> float:
        """``|a - n| / (|a| + |n|)`` over the probed entries (0 when both vanish)."""
        diff = np.linalg.norm(self.analytic - self.numeric)
        scale = np.linalg.norm(self.analytic) + np.linalg.norm(self.numeric)
        return float(diff / scale) if scale > 0 else 0.0


def _same(pa: list, pb: list) -> bool:
    return len(pa) == len(pb) and all(np.array_equal(a, b) for a, b in zip(pa, pb))


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    n_probes: Optional[int] = None, eps: float = 1e-3,
                    rng: Optional[np.random.Generator] = None,
                    max_rejects: int = 1000) -> GradCheckResult:
    """Compare reverse-mode gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must be deterministic (re-seed any dropout rng inside it). With
    ``n_probes=None`` every entry of every tensor is probed.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    if n_probes is None:
        candidates = [(i, j) for i, t in enumerate(tensors) for j in range(t.data.size)]
    else:
        sizes = np.array([t.data.size for t in tensors])
        candidates = None

    def draw():
        ti = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
        return ti, int(rng.integers(tensors[ti].data.size))

    probes, analytic, numeric = [], [], []
    rejected = 0
    queue = list(candidates) if candidates is not None else []
    target = len(queue) if candidates is not None else n_probes
    while len(probes) < target:
        if candidates is not None:
            if not queue:
                break
            ti, j = queue.pop(0)
        else:
            ti, j = draw()
        flat = tensors[ti].data.reshape(-1)
        orig = flat[j].copy()
        flat[j] = orig + eps
        with record_patterns() as p_plus:
            f_plus = float(loss_fn().data)
        flat[j] = orig - eps
        with record_patterns() as p_minus:
            f_minus = float(loss_fn().data)
        flat[j] = orig
        if not _same(p_plus, p_minus):
            rejected += 1
            if rejected > max_rejects:
                raise RuntimeError("too many probes straddle non-differentiable points")
            continue
        probes.append((ti, j))
        analytic.append(grads[ti].reshape(-1)[j])
        numeric.append((f_plus - f_minus) / (2 * eps))
    return GradCheckResult(np.array(analytic, dtype=np.float64), np.array(numeric), probes, rejected)
