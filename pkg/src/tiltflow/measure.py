"""Centered one-dimensional probability measures.

Five concrete families are supported.  Every measure is an immutable value
that knows its moments, CDF, support hull, an inverse-CDF sampler, and how to
present itself to the compiled kernels (``kernel_table``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping

import numpy as np
from scipy import special

from . import _kernels as K
from .errors import MalformedSpec, MassNotOne, NotCentered

TOL_MASS = 1e-10
TOL_CENTER = 1e-9


@dataclass(frozen=True)
class Moments:
    mean: float
    var: float


@dataclass(frozen=True)
class Measure:
    """Common interface.  Concrete families are the subclasses below."""

    logconcave_hint: bool = field(default=False, kw_only=True)

    kind_name = "abstract"

    # -- moments / distribution ------------------------------------------------
    @property
    def mean(self) -> float:
        raise NotImplementedError

    @property
    def var(self) -> float:
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def ppf(self, u):
        raise NotImplementedError

    def support_hull(self) -> tuple[float, float]:
        raise NotImplementedError

    # -- bound inputs ----------------------------------------------------------
    @property
    def is_dirac(self) -> bool:
        return False

    @property
    def half_width(self) -> float:
        """L: smallest L with the support inside [-L, L] (inf if unbounded)."""
        lo, hi = self.support_hull()
        return max(abs(lo), abs(hi))

    @property
    def density_bounds(self) -> tuple[float, float] | None:
        """(alpha, beta) bounding the density on the support, if it has one."""
        return None

    def kernel_table(self, quadrature: bool = False) -> tuple[int, np.ndarray]:
        raise NotImplementedError

    def to_spec(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Gaussian(Measure):
    sigma: float = 1.0
    kind_name = "gaussian"

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise MalformedSpec(f"sigma must be positive, got {self.sigma}")

    @property
    def mean(self):
        return 0.0

    @property
    def var(self):
        return self.sigma ** 2

    def cdf(self, x):
        return special.ndtr(np.asarray(x, dtype=float) / self.sigma)

    def ppf(self, u):
        return self.sigma * special.ndtri(np.asarray(u, dtype=float))

    def support_hull(self):
        return (-math.inf, math.inf)

    def kernel_table(self, quadrature=False):
        s = self.sigma
        if quadrature:
            row = [-math.inf, math.inf, -0.5 * math.log(2 * math.pi * s * s), 0.0,
                   -0.5 / (s * s), 1.0, 0.0]
            return K.KIND_PIECES, np.array([row])
        return K.KIND_GAUSS, np.array([[s]])

    def to_spec(self):
        return {"type": "gaussian", "sigma": self.sigma}


@dataclass(frozen=True)
class Laplace(Measure):
    """Density exp(-|x| / scale) / (2 scale)."""

    scale: float = 1.0
    kind_name = "laplace"

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise MalformedSpec(f"scale must be positive, got {self.scale}")

    @property
    def mean(self):
        return 0.0

    @property
    def var(self):
        return 2.0 * self.scale ** 2

    def cdf(self, x):
        x = np.asarray(x, dtype=float) / self.scale
        return np.where(x < 0, 0.5 * np.exp(np.minimum(x, 0)),
                        1.0 - 0.5 * np.exp(-np.maximum(x, 0)))

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        return self.scale * np.where(u < 0.5, np.log(2 * np.minimum(u, 0.5)),
                                     -np.log(2 * (1 - np.maximum(u, 0.5))))

    def support_hull(self):
        return (-math.inf, math.inf)

    def kernel_table(self, quadrature=False):
        s = self.scale
        e0 = -math.log(2 * s)
        rows = [[-math.inf, 0.0, e0, 1.0 / s, 0.0, 1.0, 0.0],
                [0.0, math.inf, e0, -1.0 / s, 0.0, 1.0, 0.0]]
        return K.KIND_PIECES, np.array(rows)

    def to_spec(self):
        return {"type": "laplace", "scale": self.scale}


@dataclass(frozen=True)
class Uniform(Measure):
    lo: float = -1.0
    hi: float = 1.0
    kind_name = "uniform"

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo < self.hi):
            raise MalformedSpec(f"need finite lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def mean(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def var(self):
        return (self.hi - self.lo) ** 2 / 12.0

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.clip((x - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def ppf(self, u):
        return self.lo + (self.hi - self.lo) * np.asarray(u, dtype=float)

    def support_hull(self):
        return (self.lo, self.hi)

    @property
    def density_bounds(self):
        d = 1.0 / (self.hi - self.lo)
        return (d, d)

    def kernel_table(self, quadrature=False):
        row = [self.lo, self.hi, -math.log(self.hi - self.lo), 0.0, 0.0, 1.0, 0.0]
        return K.KIND_PIECES, np.array([row])

    def to_spec(self):
        return {"type": "uniform", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class Atoms(Measure):
    points: tuple = (0.0,)
    weights: tuple = (1.0,)
    kind_name = "atoms"

    def __post_init__(self):
        pts = tuple(float(p) for p in self.points)
        wts = tuple(float(w) for w in self.weights)
        if len(pts) == 0 or len(pts) != len(wts):
            raise MalformedSpec("atoms need equally many points and weights (>= 1)")
        if any(not math.isfinite(p) for p in pts):
            raise MalformedSpec("atom locations must be finite")
        if any(not (w > 0 and math.isfinite(w)) for w in wts):
            raise MalformedSpec("atom weights must be positive")
        order = sorted(range(len(pts)), key=pts.__getitem__)
        pts = [pts[i] for i in order]
        wts = [wts[i] for i in order]
        # merge repeated locations
        merged_p, merged_w = [], []
        for p, w in zip(pts, wts):
            if merged_p and p == merged_p[-1]:
                merged_w[-1] += w
            else:
                merged_p.append(p)
                merged_w.append(w)
        object.__setattr__(self, "points", tuple(merged_p))
        object.__setattr__(self, "weights", tuple(merged_w))

    @cached_property
    def _p(self):
        return np.array(self.points)

    @cached_property
    def _w(self):
        return np.array(self.weights)

    @cached_property
    def _cw(self):
        return np.cumsum(self._w)

    @property
    def mass(self):
        return float(math.fsum(self.weights))

    @property
    def mean(self):
        return math.fsum(p * w for p, w in zip(self.points, self.weights))

    @property
    def var(self):
        m = self.mean
        return math.fsum(w * (p - m) ** 2 for p, w in zip(self.points, self.weights))

    @property
    def is_dirac(self):
        return len(self.points) == 1

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self._p, x, side="right")
        cw = np.concatenate(([0.0], self._cw))
        return np.minimum(cw[idx], 1.0)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        idx = np.searchsorted(self._cw, u, side="left")
        return self._p[np.minimum(idx, len(self.points) - 1)]

    def support_hull(self):
        return (self.points[0], self.points[-1])

    def kernel_table(self, quadrature=False):
        return K.KIND_ATOMS, np.column_stack((self._p, np.log(self._w)))

    def to_spec(self):
        return {"type": "atoms", "points": list(self.points), "weights": list(self.weights)}


@dataclass(frozen=True)
class GridDensity(Measure):
    """Piecewise-linear density through (xs[i], fs[i]), zero outside [xs[0], xs[-1]]."""

    xs: tuple = (-1.0, 1.0)
    fs: tuple = (0.5, 0.5)
    kind_name = "grid"

    def __post_init__(self):
        xs = tuple(float(v) for v in self.xs)
        fs = tuple(float(v) for v in self.fs)
        if len(xs) < 2 or len(xs) != len(fs):
            raise MalformedSpec("grid needs len(xs) == len(fs) >= 2")
        if any(not math.isfinite(v) for v in xs + fs):
            raise MalformedSpec("grid values must be finite")
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise MalformedSpec("grid xs must be strictly increasing")
        if any(f < 0 for f in fs) or not any(f > 0 for f in fs):
            raise MalformedSpec("grid fs must be nonnegative with a positive entry")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "fs", fs)

    @cached_property
    def _x(self):
        return np.array(self.xs)

    @cached_property
    def _f(self):
        return np.array(self.fs)

    @cached_property
    def _cum(self):
        h = np.diff(self._x)
        return np.concatenate(([0.0], np.cumsum(0.5 * h * (self._f[:-1] + self._f[1:]))))

    @property
    def mass(self):
        """Trapezoid integral, exact for a piecewise-linear density."""
        return float(self._cum[-1])

    def _cell_moment(self, k):
        # Simpson is exact for x^k * linear with k <= 2
        x0, x1 = self._x[:-1], self._x[1:]
        f0, f1 = self._f[:-1], self._f[1:]
        xm = 0.5 * (x0 + x1)
        fm = 0.5 * (f0 + f1)
        return float(np.sum((x1 - x0) / 6.0 * (x0 ** k * f0 + 4 * xm ** k * fm + x1 ** k * f1)))

    @property
    def mean(self):
        return self._cell_moment(1) / self.mass

    @property
    def var(self):
        m = self.mean
        return self._cell_moment(2) / self.mass - m * m

    def density(self, x):
        return np.interp(np.asarray(x, dtype=float), self._x, self._f, left=0.0, right=0.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        j = np.clip(np.searchsorted(self._x, x, side="right") - 1, 0, len(self.xs) - 2)
        xc = np.clip(x, self._x[0], self._x[-1])
        dx = xc - self._x[j]
        fx = np.interp(xc, self._x, self._f)
        out = self._cum[j] + 0.5 * dx * (self._f[j] + fx)
        return np.clip(out / self.mass, 0.0, 1.0)

    def ppf(self, u):
        u = np.asarray(u, dtype=float) * self.mass
        j = np.clip(np.searchsorted(self._cum, u, side="right") - 1, 0, len(self.xs) - 2)
        rem = u - self._cum[j]
        x0 = self._x[j]
        f0 = self._f[j]
        slope = (self._f[j + 1] - f0) / (self._x[j + 1] - x0)
        # solve f0 d + slope d^2 / 2 = rem for d >= 0 (stable form)
        disc = np.sqrt(np.maximum(f0 * f0 + 2 * slope * rem, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(f0 + disc > 0, 2 * rem / (f0 + disc), 0.0)
        return np.clip(x0 + d, self._x[j], self._x[j + 1])

    @cached_property
    def _trimmed(self):
        pos = [i for i, f in enumerate(self.fs) if f > 0]
        i0 = max(pos[0] - 1, 0)
        i1 = min(pos[-1] + 1, len(self.fs) - 1)
        return i0, i1

    def support_hull(self):
        i0, i1 = self._trimmed
        return (self.xs[i0], self.xs[i1])

    @property
    def density_bounds(self):
        i0, i1 = self._trimmed
        vals = [f / self.mass for f in self.fs[i0:i1 + 1]]
        return (min(vals), max(vals))

    def kernel_table(self, quadrature=False):
        i0, i1 = self._trimmed
        rows = []
        m = self.mass
        for i in range(i0, i1):
            x0, x1 = self.xs[i], self.xs[i + 1]
            f0, f1 = self.fs[i] / m, self.fs[i + 1] / m
            if f0 == 0 and f1 == 0:
                continue
            q = (f1 - f0) / (x1 - x0)
            rows.append([x0, x1, 0.0, 0.0, 0.0, f0 - q * x0, q])
        return K.KIND_PIECES, np.array(rows)

    def to_spec(self):
        return {"type": "grid", "xs": list(self.xs), "fs": list(self.fs)}


def moments(mu: Measure) -> Moments:
    return Moments(mu.mean, mu.var)


def cdf(mu: Measure, x):
    return mu.cdf(x)


def support_hull(mu: Measure) -> tuple[float, float]:
    return mu.support_hull()


def sample_oracle(mu: Measure, n: int, rng_seed) -> np.ndarray:
    """i.i.d. draws by inverse CDF, independent of the flow."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    return np.asarray(mu.ppf(rng.random(n)), dtype=float)


_FAMILIES = {
    "gaussian": (Gaussian, {"sigma"}),
    "laplace": (Laplace, {"scale"}),
    "uniform": (Uniform, {"lo", "hi"}),
    "atoms": (Atoms, {"points", "weights"}),
    "grid": (GridDensity, {"xs", "fs"}),
}
_OPTION_KEYS = {"type", "center", "logconcave_hint", "normalize"}


def _shift(mu: Measure, delta: float) -> Measure:
    hint = mu.logconcave_hint
    if isinstance(mu, Uniform):
        return Uniform(mu.lo - delta, mu.hi - delta, logconcave_hint=hint)
    if isinstance(mu, Atoms):
        return Atoms(tuple(p - delta for p in mu.points), mu.weights, logconcave_hint=hint)
    if isinstance(mu, GridDensity):
        return GridDensity(tuple(x - delta for x in mu.xs), mu.fs, logconcave_hint=hint)
    return mu


def validate(mu: Measure, center: bool = False) -> Measure:
    """Check unit mass and centering; translate to mean zero if ``center``."""
    if isinstance(mu, (Atoms, GridDensity)) and abs(mu.mass - 1.0) > TOL_MASS:
        raise MassNotOne(f"total mass {mu.mass!r} differs from 1")
    m = mu.mean
    if abs(m) > TOL_CENTER:
        if not center:
            raise NotCentered(f"mean {m!r} exceeds tolerance {TOL_CENTER}")
        mu = _shift(mu, m)
        # one more pass absorbs rounding in the shifted representation
        if abs(mu.mean) > TOL_CENTER:
            mu = _shift(mu, mu.mean)
    return mu


def make_measure(spec: Mapping[str, Any], *, center: bool | None = None) -> Measure:
    """Build and validate a measure from a JSON-style description.

    ``center`` overrides the spec's own ``center`` key.  A ``normalize: true``
    key rescales atom weights / grid values to unit mass before validation.
    """
    if not isinstance(spec, Mapping) or "type" not in spec:
        raise MalformedSpec("measure spec must be a mapping with a 'type' key")
    kind = spec["type"]
    if kind not in _FAMILIES:
        raise MalformedSpec(f"unknown measure type {kind!r}")
    cls, keys = _FAMILIES[kind]
    unknown = set(spec) - keys - _OPTION_KEYS
    if unknown:
        raise MalformedSpec(f"unexpected keys for {kind}: {sorted(unknown)}")
    missing = keys - set(spec)
    if missing:
        raise MalformedSpec(f"missing keys for {kind}: {sorted(missing)}")
    do_center = bool(spec.get("center", False)) if center is None else center
    hint = bool(spec.get("logconcave_hint", False))
    try:
        args = {k: spec[k] for k in keys}
        if kind in ("atoms", "grid"):
            args = {k: tuple(float(v) for v in spec[k]) for k in keys}
            if spec.get("normalize"):
                if kind == "atoms":
                    tot = math.fsum(args["weights"])
                    args["weights"] = tuple(w / tot for w in args["weights"])
                else:
                    tot = GridDensity(args["xs"], args["fs"]).mass
                    args["fs"] = tuple(f / tot for f in args["fs"])
        else:
            args = {k: float(v) for k, v in args.items()}
        mu = cls(**args, logconcave_hint=hint)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, MalformedSpec):
            raise
        raise MalformedSpec(str(exc)) from exc
    return validate(mu, center=do_center)
