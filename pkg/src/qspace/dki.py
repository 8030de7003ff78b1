"""Voxel-wise kurtosis fits and lesion-level coefficients.

The fit is an unconstrained Levenberg-Marquardt solve of the three-parameter
model ``S0 exp(-b ADC + b^2 ADC^2 AKC / 6)`` with an analytic Jacobian. The
admissible box ``0 < ADC < 3.5``, ``0 < AKC < 3`` is applied afterwards as a
validity test; invalid voxels are excluded from lesion averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np

from .data import BValueSet, DwiStack, LesionRoi
from .errors import EmptyRoi, ShapeMismatch
from .signal import BD_SCALE

ADC_BOUNDS = (0.0, 3.5)
AKC_BOUNDS = (0.0, 3.0)
BOUND_TOL = 1e-9

MAX_ITER = 200
REL_TOL = 1e-10
# cost below this fraction of sum(S^2) counts as an exact fit
ABS_COST_FLOOR = 1e-24
LAMBDA_INIT = 1e-3
LAMBDA_MAX = 1e16


class FitStatus(IntEnum):
    OK = 0
    OUT_OF_BOUNDS = 1
    NOT_CONVERGED = 2
    DEGENERATE = 3


@dataclass(frozen=True)
class KurtosisParams:
    s0: float
    adc: float
    akc: float
    valid: bool
    status: FitStatus = FitStatus.OK

    @property
    def degenerate(self) -> bool:
        return self.status is FitStatus.DEGENERATE


@dataclass(frozen=True)
class FitResult:
    """Vectorised fit output; every field has one entry per voxel."""

    s0: np.ndarray
    adc: np.ndarray
    akc: np.ndarray
    valid: np.ndarray
    status: np.ndarray
    iterations: np.ndarray

    def __len__(self):
        return len(self.s0)

    def params(self, i: int) -> KurtosisParams:
        return KurtosisParams(float(self.s0[i]), float(self.adc[i]), float(self.akc[i]),
                              bool(self.valid[i]), FitStatus(int(self.status[i])))


def admissible(adc, akc) -> np.ndarray:
    """Open-box validity test with a small tolerance at the endpoints."""
    adc = np.asarray(adc, dtype=np.float64)
    akc = np.asarray(akc, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return ((adc > ADC_BOUNDS[0] + BOUND_TOL) & (adc < ADC_BOUNDS[1] - BOUND_TOL)
                & (akc > AKC_BOUNDS[0] + BOUND_TOL) & (akc < AKC_BOUNDS[1] - BOUND_TOL))


def _model_and_jacobian(p, beta):
    s0, d, k = p[:, 0:1], p[:, 1:2], p[:, 2:3]
    x = beta * d
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.exp(-x + x * x * k / 6.0)
        m = s0 * e
        jac = np.stack([e, m * (-beta + beta * beta * d * k / 3.0),
                        m * beta * beta * d * d / 6.0], axis=-1)
    return m, jac


def initial_guess(y: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Weighted log-linear fit of ``ln S`` as a quadratic in b, clamped into the box.

    S0 starts at the measured b=0 intensity.
    """
    pos = y > 0
    logy = np.log(np.where(pos, y, 1.0))
    w = np.where(pos, y * y, 0.0)
    design = np.stack([np.ones_like(beta), beta, beta * beta], axis=-1)    # (B, 3)
    xtwx = np.einsum("nb,bi,bj->nij", w, design, design)
    xtwy = np.einsum("nb,bi,nb->ni", w, design, logy)
    scale = np.maximum(np.trace(xtwx, axis1=1, axis2=2), 1e-300)
    xtwx = xtwx + (1e-14 * scale)[:, None, None] * np.eye(3)
    coef = np.linalg.solve(xtwx, xtwy[..., None])[..., 0]
    d0 = -coef[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        k0 = np.where(d0 > 0, 6.0 * coef[:, 2] / (d0 * d0), 0.0)
    d0 = np.clip(np.nan_to_num(d0), 0.01, ADC_BOUNDS[1] - 0.01)
    k0 = np.clip(np.nan_to_num(k0), 0.01, AKC_BOUNDS[1] - 0.01)
    s0 = np.where(y[:, 0] > 0, y[:, 0], np.exp(np.clip(coef[:, 0], -700, 700)))
    return np.stack([s0, d0, k0], axis=-1)


def fit_voxels(signals, bvalues) -> FitResult:
    """Fit every row of ``signals`` (shape ``(n_voxels, n_bvalues)``) independently."""
    y = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    b = np.asarray(tuple(bvalues), dtype=np.float64)
    if y.shape[-1] != b.size:
        raise ShapeMismatch(f"{y.shape[-1]} signals for {b.size} b-values")
    n = y.shape[0]
    beta = b * BD_SCALE

    status = np.full(n, FitStatus.NOT_CONVERGED, dtype=np.int8)
    iterations = np.zeros(n, dtype=np.int32)
    degenerate = ~np.any(y > 0, axis=1)
    status[degenerate] = FitStatus.DEGENERATE

    p = np.zeros((n, 3))
    ok_rows = ~degenerate
    if ok_rows.any():
        p[ok_rows] = initial_guess(y[ok_rows], beta)
    p[degenerate] = (0.0, np.nan, np.nan)

    lam = np.full(n, LAMBDA_INIT)
    floor = ABS_COST_FLOOR * np.sum(y * y, axis=1)
    m, jac = _model_and_jacobian(p, beta)
    cost = np.sum((m - y) ** 2, axis=1)
    active = ok_rows & np.isfinite(cost)
    done = active & (cost <= floor)
    status[done] = FitStatus.OK
    active &= ~done

    for it in range(1, MAX_ITER + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        iterations[idx] = it
        pa, ya, ja = p[idx], y[idx], jac[idx]
        r = m[idx] - ya
        a = np.einsum("nbi,nbj->nij", ja, ja)
        g = np.einsum("nbi,nb->ni", ja, r)
        diag = np.diagonal(a, axis1=1, axis2=2)
        diag = np.maximum(diag, 1e-12 * np.max(diag, axis=1, keepdims=True) + 1e-300)
        lhs = a + (lam[idx, None] * diag)[:, :, None] * np.eye(3)
        with np.errstate(invalid="ignore", over="ignore"):
            try:
                step = np.linalg.solve(lhs, -g[..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = np.stack([_safe_solve(l, -v) for l, v in zip(lhs, g)])
        trial = pa + step
        with np.errstate(over="ignore", invalid="ignore"):
            m_new, j_new = _model_and_jacobian(trial, beta)
            cost_new = np.sum((m_new - ya) ** 2, axis=1)
        old = cost[idx]
        accept = np.isfinite(cost_new) & (cost_new < old)

        acc = idx[accept]
        rel = (old[accept] - cost_new[accept]) / old[accept]
        p[acc], m[acc], jac[acc], cost[acc] = trial[accept], m_new[accept], j_new[accept], cost_new[accept]
        lam[acc] = np.maximum(lam[acc] / 10.0, 1e-15)
        conv = (rel < REL_TOL) | (cost_new[accept] <= floor[acc])
        status[acc[conv]] = FitStatus.OK
        active[acc[conv]] = False

        rej = idx[~accept]
        lam[rej] *= 10.0
        # no damping reduces the cost any further: a stationary point in floating point
        stuck = rej[lam[rej] > LAMBDA_MAX]
        status[stuck] = FitStatus.OK
        active[stuck] = False

    s0, adc, akc = (np.where(np.isfinite(p[:, i]), p[:, i], np.nan) for i in range(3))
    converged = status == FitStatus.OK
    inside = admissible(adc, akc) & np.isfinite(s0)
    status[converged & ~inside] = FitStatus.OUT_OF_BOUNDS
    valid = converged & inside
    return FitResult(s0, adc, akc, valid, status, iterations)


def _safe_solve(lhs, rhs):
    try:
        return np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(lhs, rhs, rcond=None)[0]


def fit_voxel(signals, bvalues) -> KurtosisParams:
    """Least-squares kurtosis fit of one voxel's signal curve."""
    y = np.asarray(signals, dtype=np.float64)
    if y.ndim != 1:
        raise ShapeMismatch("fit_voxel expects a 1-D signal list; use fit_voxels for batches")
    return fit_voxels(y[None], bvalues).params(0)


@dataclass(frozen=True)
class LesionCoefficients:
    mean_adc: float
    mean_akc: float
    n_fitted: int
    n_excluded: int
    per_voxel: Optional[FitResult] = None

    @property
    def defined(self) -> bool:
        return self.n_fitted > 0

    def to_dict(self) -> dict:
        return {"mean_adc": None if not self.defined else self.mean_adc,
                "mean_akc": None if not self.defined else self.mean_akc,
                "n_fitted": self.n_fitted, "n_excluded": self.n_excluded,
                "defined": self.defined}


def _lesion_signals(stack: DwiStack, roi: LesionRoi) -> np.ndarray:
    if stack.shape != roi.shape:
        raise ShapeMismatch(f"roi shape {roi.shape} != stack shape {stack.shape}")
    if roi.invisible or not roi.mask.any():
        raise EmptyRoi(f"{stack.patient_id}: empty lesion mask")
    return stack.channels[:, roi.mask].T.astype(np.float64)


def coefficients_from_fit(fit: FitResult, keep_voxels: bool = True) -> LesionCoefficients:
    valid = fit.valid
    n_fit = int(valid.sum())
    if n_fit:
        # fsum makes the means independent of voxel order
        mean_adc = math.fsum(fit.adc[valid]) / n_fit
        mean_akc = math.fsum(fit.akc[valid]) / n_fit
    else:
        mean_adc = mean_akc = math.nan
    return LesionCoefficients(mean_adc, mean_akc, n_fit, len(fit) - n_fit,
                              fit if keep_voxels else None)


def fit_lesion(stack: DwiStack, roi: LesionRoi, bvalues: BValueSet,
               keep_voxels: bool = True) -> LesionCoefficients:
    """Fit all in-mask voxels and average ADC/AKC over the valid ones.

    ``per_voxel`` follows the C order of ``roi.mask`` when kept.
    """
    fit = fit_voxels(_lesion_signals(stack, roi), bvalues)
    return coefficients_from_fit(fit, keep_voxels)


def parametric_maps(stack: DwiStack, roi: LesionRoi, bvalues: BValueSet,
                    coefficients: Optional[LesionCoefficients] = None) -> np.ndarray:
    """ADC and AKC maps of shape ``(2, z, y, x)``; zero outside the mask and at invalid fits."""
    if coefficients is None or coefficients.per_voxel is None:
        coefficients = fit_lesion(stack, roi, bvalues)
    fit = coefficients.per_voxel
    if len(fit) != roi.voxel_count:
        raise ShapeMismatch("coefficients do not belong to this roi")
    maps = np.zeros((2,) + roi.shape, dtype=np.float32)
    maps[0][roi.mask] = np.where(fit.valid, fit.adc, 0.0)
    maps[1][roi.mask] = np.where(fit.valid, fit.akc, 0.0)
    return maps
