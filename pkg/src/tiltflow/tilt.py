"""Gaussian-tilt functionals of a measure.

For a measure mu and parameters (b, c) the tilt reweights mu by
exp(c x - b x^2 / 2).  This module evaluates the normalizer V, the tilted
mean a, variance A and third central moment m3, inverts c -> a at fixed b,
and returns the partial derivatives of the mean map and of its inverse.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special

from . import _kernels as K
from .errors import (DegenerateTilt, NoConvergence, QuadratureFailure,
                     TargetOutsideHull, TiltNotIntegrable)
from .measure import Laplace, Measure

SOLVE_MAXIT = 200


@dataclass(frozen=True)
class TiltParams:
    b: float = 0.0
    c: float = 0.0

    def __post_init__(self):
        if not (self.b >= 0.0) or not math.isfinite(self.b):
            raise ValueError(f"b must be finite and >= 0, got {self.b}")
        if not math.isfinite(self.c):
            raise ValueError(f"c must be finite, got {self.c}")

    def __add__(self, other: "TiltParams") -> "TiltParams":
        return TiltParams(self.b + other.b, self.c + other.c)


@dataclass(frozen=True)
class TiltedMoments:
    V: float
    log_V: float
    a: float
    A: float
    m3: float
    m4: float = 0.0


@dataclass(frozen=True)
class TiltDerivatives:
    """Partials of a(b, c) and of its inverse c(a, b)."""

    a1: float
    a2: float
    c1: float
    c2: float
    c11: float


@dataclass(frozen=True)
class TiltedMeasure:
    """A measure reweighted by a fixed tilt, kept as (base, accumulated params)."""

    base: Measure
    params: TiltParams

    def compose(self, p: TiltParams) -> "TiltedMeasure":
        return TiltedMeasure(self.base, self.params + p)

    def support_hull(self):
        return self.base.support_hull()


MeasureLike = Union[Measure, TiltedMeasure]

_STATUS_ERRORS = {
    K.NOT_INTEGRABLE: TiltNotIntegrable,
    K.QUAD_FAIL: QuadratureFailure,
    K.NO_CONV: NoConvergence,
    K.OUTSIDE_HULL: TargetOutsideHull,
    K.DEGENERATE: DegenerateTilt,
}


def _raise_for(status: int, what: str):
    if status != K.OK:
        raise _STATUS_ERRORS.get(status, DegenerateTilt)(what)


def _unwrap(mu: MeasureLike) -> tuple[Measure, TiltParams]:
    if isinstance(mu, TiltedMeasure):
        return mu.base, mu.params
    return mu, TiltParams(0.0, 0.0)


def _check_integrable(base: Measure, b: float, c: float):
    if isinstance(base, Laplace) and b == 0.0 and abs(c) >= 1.0 / base.scale:
        raise TiltNotIntegrable(
            f"|c| = {abs(c)} >= 1/scale with b = 0: tilt is not integrable")


def _raw(base: Measure, b: float, c: float, quadrature: bool = False):
    _check_integrable(base, b, c)
    kind, tab = base.kernel_table(quadrature)
    st, logv, a, var, m3, m4 = K.tilt_eval(kind, tab, float(b), float(c))
    _raise_for(st, f"tilt evaluation failed at b={b}, c={c}")
    return logv, a, var, m3, m4


def tilted_moments(mu: MeasureLike, p: TiltParams, method: str = "auto") -> TiltedMoments:
    """V, a, A and m3 of ``mu`` tilted by ``p``.

    ``method="quadrature"`` forces the numerical path even where a closed
    form exists (Gaussian); atoms are always summed exactly.
    """
    if method not in ("auto", "quadrature"):
        raise ValueError(f"unknown method {method!r}")
    base, acc = _unwrap(mu)
    tot = acc + p
    logv, a, var, m3, m4 = _raw(base, tot.b, tot.c, method == "quadrature")
    if acc.b or acc.c:
        logv -= _raw(base, acc.b, acc.c, method == "quadrature")[0]
    V = math.exp(logv) if logv < 709.0 else math.inf
    return TiltedMoments(V, logv, a, var, m3, m4)


def tilted_density(mu: MeasureLike, p: TiltParams, x):
    """F(x) = exp(c x - b x^2 / 2) / V, evaluated in log space."""
    log_v = tilted_moments(mu, p).log_V
    x = np.asarray(x, dtype=float)
    out = np.exp(p.c * x - 0.5 * p.b * x * x - log_v)
    return out if out.ndim else float(out)


def _restricted(kind: int, tab: np.ndarray, lo: float, hi: float):
    """The kernel table of the measure restricted to [lo, hi] (None if empty)."""
    if kind == K.KIND_ATOMS:
        keep = (tab[:, 0] >= lo) & (tab[:, 0] <= hi)
    else:
        tab = tab.copy()
        tab[:, 0] = np.maximum(tab[:, 0], lo)
        tab[:, 1] = np.minimum(tab[:, 1], hi)
        keep = tab[:, 1] > tab[:, 0]
    return tab[keep] if keep.any() else None


def window_masses(mu: MeasureLike, p: TiltParams, windows) -> np.ndarray:
    """Tilted mass of each closed interval (lo, hi) in ``windows``."""
    base, acc = _unwrap(mu)
    tot = acc + p
    logv, a, var = _raw(base, tot.b, tot.c)[:3]
    kind, tab = base.kernel_table()
    if kind == K.KIND_GAUSS:
        sd = math.sqrt(var)
        w = np.asarray(windows, dtype=float).reshape(-1, 2)
        return special.ndtr((w[:, 1] - a) / sd) - special.ndtr((w[:, 0] - a) / sd)
    out = np.zeros(len(windows))
    for k, (lo, hi) in enumerate(windows):
        sub = _restricted(kind, tab, lo, hi)
        if sub is None:
            continue
        st, logv_e = K.tilt_eval(kind, sub, float(tot.b), float(tot.c))[:2]
        if st == K.DEGENERATE:
            continue
        _raise_for(st, f"window mass failed on [{lo}, {hi}]")
        out[k] = min(1.0, math.exp(logv_e - logv))
    return out


def tilted_mass(mu: MeasureLike, p: TiltParams, lo: float, hi: float) -> float:
    """Mass of [lo, hi] under ``mu`` tilted by ``p``."""
    return float(window_masses(mu, p, [(lo, hi)])[0])


def tilted_measure(mu: MeasureLike, p: TiltParams) -> TiltedMeasure:
    base, acc = _unwrap(mu)
    tot = acc + p
    _raw(base, tot.b, tot.c)
    return TiltedMeasure(base, tot)


def solve_c(mu: MeasureLike, a_target: float, b: float, *, tol: float | None = None,
            c0: float | None = None) -> float:
    """The c at which the tilted mean equals ``a_target`` (b held fixed).

    Raises TargetOutsideHull when ``a_target`` is not strictly inside the
    support hull.  The default tolerance is 1e-10 (1 + |a_target|).
    """
    if b < 0 or not math.isfinite(b):
        raise ValueError(f"b must be finite and >= 0, got {b}")
    base, acc = _unwrap(mu)
    lo, hi = base.support_hull()
    if not (lo < a_target < hi):
        raise TargetOutsideHull(f"target {a_target} not inside ({lo}, {hi})")
    if base.is_dirac:
        raise TargetOutsideHull("a point mass has an empty hull interior")
    if tol is None:
        tol = 1e-10 * (1.0 + abs(a_target))
    kind, tab = base.kernel_table()
    b_tot = acc.b + b
    start = acc.c if c0 is None else acc.c + c0
    if isinstance(base, Laplace) and b_tot == 0.0:
        lim = 1.0 / base.scale
        start = max(-0.5 * lim, min(0.5 * lim, start))
    res = K.solve_c(kind, tab, float(a_target), float(b_tot), float(start), float(tol),
                    SOLVE_MAXIT)
    _raise_for(res[0], f"solve_c failed for a={a_target}, b={b}")
    return res[1] - acc.c


def tilt_derivatives(mu: MeasureLike, p: TiltParams) -> TiltDerivatives:
    """Analytic partials via moment identities.

    d a / d c = A,  d a / d b = -Cov(x, x^2) / 2 = -(m3 + 2 a A) / 2,
    d^2 a / d c^2 = m3, and the inverse map follows by implicit
    differentiation: c1 = 1/A, c2 = -a1/A, c11 = -m3/A^3.
    """
    m = tilted_moments(mu, p)
    if not (m.A > 1e-300):
        raise DegenerateTilt(f"tilted variance {m.A} is not positive")
    a1 = -0.5 * (m.m3 + 2.0 * m.a * m.A)
    a2 = m.A
    return TiltDerivatives(a1=a1, a2=a2, c1=1.0 / a2, c2=-a1 / a2, c11=-m.m3 / a2 ** 3)
