"""Simulation of the tilt flow from (b, c) = (0, 0) to its explosion time.

The state is the tilt (b_t, c_t) together with the Brownian position W_t.
Two schemes are provided.  Scheme ``"A"`` simulates W exactly and recovers
c from the constraint that the tilted mean equals W, integrating only
db/dt = A^-2.  Scheme ``"B"`` is plain Euler-Maruyama on

    dc = A^-1 dW + A^-2 a dt,    db = A^-2 dt,

and exists to cross-check scheme A.  A path stops when the tilted variance
drops below ``eps_A`` or W leaves the support hull; the reported time is
``t_stop + A_stop``, since the remaining time has conditional mean A.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .brownian import BrownianPath, path_rng
from .errors import AllPathsFailed, DegenerateTilt, TargetOutsideHull
from .measure import Atoms, Measure
from .tilt import TiltedMeasure, TiltParams, _raise_for, tilted_moments

STOP_REASONS = {
    K.STOP_EPS: "A_below_eps",
    K.STOP_HULL: "target_hull_endpoint",
    K.STOP_TMAX: "t_max_reached",
    K.STOP_BREAKDOWN: "numerical_breakdown",
    K.STOP_STALL: "numerical_breakdown",
}
FAILED_REASONS = ("t_max_reached", "numerical_breakdown")
SCHEMES = {"a": K.SCHEME_A, "A": K.SCHEME_A, "A_root_driven": K.SCHEME_A,
           "b": K.SCHEME_B, "B": K.SCHEME_B, "B_euler": K.SCHEME_B}
PROBE_LEVELS = (0.1, 0.5, 0.9)
BUFFER = 1024


@dataclass(frozen=True)
class SimConfig:
    """Run parameters.  ``eps_A`` and ``t_max`` default to multiples of Var."""

    dt_max: float = 1e-3
    eta: float = 0.05
    eps_A: Optional[float] = None
    t_max: Optional[float] = None
    seed: int = 0
    scheme: str = "A"
    checkpoint_times: tuple = ()
    dt_min: float = 1e-12
    max_min_steps: int = 10 ** 6
    tol_a: float = 1e-10
    snap_atoms: bool = True

    def __post_init__(self):
        if not self.dt_max > 0:
            raise ValueError("dt_max must be positive")
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if self.eps_A is not None and not self.eps_A > 0:
            raise ValueError("eps_A must be positive")
        if self.t_max is not None and not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        ck = tuple(sorted(float(t) for t in self.checkpoint_times))
        if any(t < 0 for t in ck):
            raise ValueError("checkpoint times must be nonnegative")
        object.__setattr__(self, "checkpoint_times", ck)

    def resolved(self, var: float) -> "SimConfig":
        # a point mass never steps; any positive scale will do
        var = var if var > 0 else 1.0
        return replace(self,
                       eps_A=1e-6 * var if self.eps_A is None else self.eps_A,
                       t_max=50.0 * var if self.t_max is None else self.t_max)


@dataclass(frozen=True)
class PathState:
    t: float
    w: float
    tilt: TiltParams
    a: float
    A: float
    m3: float
    log_V: float = 0.0
    m4: float = 0.0

    @property
    def S(self) -> float:
        return self.m3 / self.A if self.A > 0 else 0.0


@dataclass
class PathResult:
    T_hat: float
    W_T: float
    n_steps: int
    stop_reason: str
    tau_diag: float
    checkpoints: np.ndarray          # rows: t, w, b, c, A, S, F at probes
    t_stop: float = 0.0
    A_stop: float = 0.0
    F_stop: np.ndarray = field(default_factory=lambda: np.ones(3))
    max_Ab: float = 0.0
    max_A: float = 0.0
    max_S_ratio: float = 0.0
    max_gap: float = 0.0
    min_db: float = 0.0

    @property
    def failed(self) -> bool:
        return self.stop_reason in FAILED_REASONS


@dataclass(frozen=True)
class EnsembleSummary:
    n: int
    n_failed: int
    mean_T: float
    se_T: float
    max_T: float
    ks_stat: float
    ks_p: float
    tail_rate: Optional[float] = None
    tail_r2: Optional[float] = None


def probe_points(mu: Measure) -> np.ndarray:
    return np.asarray(mu.ppf(np.array(PROBE_LEVELS)), dtype=float)


def _base_and_init(mu, init: TiltParams):
    if isinstance(mu, TiltedMeasure):
        return mu.base, mu.params + init
    return mu, init


def _initial_state(base: Measure, init: TiltParams) -> np.ndarray:
    m = tilted_moments(base, init)
    st = np.zeros(K.STATE_SIZE)
    st[K.S_W] = m.a
    st[K.S_B] = init.b
    st[K.S_C] = init.c
    st[K.S_LOGV] = m.log_V
    st[K.S_A_MEAN] = m.a
    st[K.S_VAR] = m.A
    st[K.S_M3] = m.m3
    st[K.S_M4] = m.m4
    return st


def _config_vector(base: Measure, cfg: SimConfig) -> np.ndarray:
    lo, hi = base.support_hull()
    cf = np.zeros(K.CONFIG_SIZE)
    cf[K.C_DT_MAX] = cfg.dt_max
    cf[K.C_ETA] = cfg.eta
    cf[K.C_EPS_A] = cfg.eps_A
    cf[K.C_T_MAX] = cfg.t_max
    cf[K.C_DT_MIN] = cfg.dt_min
    cf[K.C_SCHEME] = SCHEMES[cfg.scheme]
    cf[K.C_HULL_LO] = lo
    cf[K.C_HULL_HI] = hi
    cf[K.C_TOL_A] = cfg.tol_a
    cf[K.C_SNAP] = 1.0 if (cfg.snap_atoms and isinstance(base, Atoms)) else 0.0
    cf[K.C_MAX_MINRUN] = cfg.max_min_steps
    return cf


def _new_diag() -> np.ndarray:
    dg = np.zeros(K.DIAG_SIZE)
    dg[K.D_TAU] = -1.0
    dg[K.D_MIN_DB] = np.inf
    return dg


def _result(dg: np.ndarray, ck: np.ndarray, t0_shift: float = 0.0) -> PathResult:
    n_ck = int(dg[K.D_CKPT])
    tau = dg[K.D_TAU]
    if tau < 0:
        tau = min(dg[K.D_T_STOP], 1.0)
    min_db = dg[K.D_MIN_DB]
    return PathResult(
        T_hat=float(dg[K.D_T_HAT]), W_T=float(dg[K.D_W_T]), n_steps=int(dg[K.D_NSTEPS]),
        stop_reason=STOP_REASONS[int(dg[K.D_STOP])], tau_diag=float(tau),
        checkpoints=ck[:n_ck].copy(), t_stop=float(dg[K.D_T_STOP]),
        A_stop=float(dg[K.D_A_STOP]), F_stop=dg[K.D_F0:K.D_F2 + 1].copy(),
        max_Ab=float(dg[K.D_MAX_AB]), max_A=float(dg[K.D_MAX_A]),
        max_S_ratio=float(dg[K.D_MAX_SRATIO]), max_gap=float(dg[K.D_MAX_GAP]),
        min_db=float(min_db) if math.isfinite(min_db) else 0.0)


def _dirac_result(base: Measure, n_ck: int) -> PathResult:
    return PathResult(T_hat=0.0, W_T=float(base.points[0]), n_steps=0,
                      stop_reason="A_below_eps", tau_diag=0.0,
                      checkpoints=np.empty((0, 6 + len(PROBE_LEVELS))))


def step(mu: Measure, s: PathState, dW: float, dt: float, scheme: str = "A") -> PathState:
    """One step of the chosen scheme from ``s``.

    Scheme A raises TargetOutsideHull when W leaves the support hull.
    """
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if not s.A > 0:
        raise DegenerateTilt("cannot step from a state with A = 0")
    base = mu.base if isinstance(mu, TiltedMeasure) else mu
    kind, tab = base.kernel_table()
    st = np.zeros(K.STATE_SIZE)
    st[:K.S_B_DEBT] = [s.t, s.w, s.tilt.b, s.tilt.c, s.log_V, s.a, s.A, s.m3, s.m4]
    if SCHEMES[scheme] == K.SCHEME_A:
        lo, hi = base.support_hull()
        if dt > 0 and not lo < s.w + dW < hi:
            raise TargetOutsideHull(f"W = {s.w + dW} left ({lo}, {hi})")
        status = K.step_a(kind, tab, st, float(dW), float(dt), 1e-10)
    else:
        status = K.step_b(kind, tab, st, float(dW), float(dt))
    _raise_for(status, "step failed")
    return PathState(t=st[K.S_T], w=st[K.S_W], tilt=TiltParams(st[K.S_B], st[K.S_C]),
                     a=st[K.S_A_MEAN], A=st[K.S_VAR], m3=st[K.S_M3], log_V=st[K.S_LOGV],
                     m4=st[K.S_M4])


def initial_state(mu: Measure, init: TiltParams = TiltParams()) -> PathState:
    base, init = _base_and_init(mu, init)
    m = tilted_moments(base, init)
    return PathState(t=0.0, w=m.a, tilt=init, a=m.a, A=m.A, m3=m.m3, log_V=m.log_V,
                     m4=m.m4)


def simulate_path(mu, cfg: SimConfig, init: TiltParams = TiltParams(),
                  rng_stream: Optional[np.random.Generator] = None, *,
                  brownian: Optional[BrownianPath] = None,
                  probes: Optional[np.ndarray] = None) -> PathResult:
    """Run one path to its stop.

    Randomness comes from ``rng_stream`` (buffered normals and uniforms) or,
    for runs that must share a trajectory, from ``brownian``.  ``mu`` may be
    a TiltedMeasure, in which case the flow starts from its accumulated tilt.
    """
    base, init = _base_and_init(mu, init)
    cfg = cfg.resolved(base.var)
    if probes is None:
        probes = probe_points(base)
    ck_times = np.asarray(cfg.checkpoint_times, dtype=float)
    ck = np.zeros((len(ck_times), 6 + len(probes)))
    if base.is_dirac:
        return _dirac_result(base, len(ck_times))
    kind, tab = base.kernel_table()
    st = _initial_state(base, init)
    cf = _config_vector(base, cfg)
    dg = _new_diag()
    if brownian is None:
        if rng_stream is None:
            rng_stream = path_rng(cfg.seed, 0)
        while dg[K.D_STOP] == K.RUNNING:
            z = rng_stream.standard_normal(BUFFER)
            u = rng_stream.random(BUFFER)
            K.run_path(kind, tab, st, dg, cf, z, u, ck_times, ck, probes)
    else:
        while True:
            dt = K.next_dt(st, dg, cf, ck_times)
            if dt < 0:
                K._finish(kind, tab, st, dg, cf, probes, K.STOP_STALL, st[K.S_T],
                          st[K.S_W], st[K.S_VAR])
                break
            t0 = st[K.S_T]
            dw = float(brownian(t0 + dt) - brownian(t0)) if dt > 0 else 0.0
            if K.advance(kind, tab, st, dg, cf, dw, dt, brownian.crossing_uniform(),
                         ck_times, ck, probes):
                break
    return _result(dg, ck)


def default_threads() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity")
               else (os.cpu_count() or 1))


def run_paths(mu, cfg: SimConfig, n_paths: int, *, init: TiltParams = TiltParams(),
              threads: Optional[int] = None, seed_tag: Sequence[int] = ()) -> list:
    """Simulate ``n_paths`` paths; path i draws from stream (seed, *seed_tag, i)."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    base, init = _base_and_init(mu, init)
    cfg = cfg.resolved(base.var)
    probes = probe_points(base)
    out = [None] * n_paths
    threads = threads or default_threads()

    def work(ids):
        for i in ids:
            out[i] = simulate_path(base, cfg, init, path_rng(cfg.seed, i, *seed_tag),
                                   probes=probes)

    if threads == 1 or n_paths < 2:
        work(range(n_paths))
    else:
        chunks = [range(k, n_paths, threads) for k in range(threads)]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(work, chunks))
    return out


def summarize(results: Sequence[PathResult], mu: Measure, *, with_tail: bool = False
              ) -> EnsembleSummary:
    from .verify import DegenerateTail, ks_test, tail_estimate

    ok = [r for r in results if not r.failed]
    n_failed = len(results) - len(ok)
    if not ok:
        raise AllPathsFailed(f"all {len(results)} paths failed")
    T = np.array([r.T_hat for r in ok])
    W = np.array([r.W_T for r in ok])
    se = float(T.std(ddof=1) / math.sqrt(len(T))) if len(T) > 1 else math.inf
    d, p = ks_test(W, mu)
    rate = r2 = None
    if with_tail and len(T) >= 10 ** 4:
        try:
            fit = tail_estimate(T)
            rate, r2 = fit.rate, fit.r2
        except DegenerateTail:
            pass
    return EnsembleSummary(n=len(results), n_failed=n_failed, mean_T=float(T.mean()),
                           se_T=se, max_T=float(T.max()), ks_stat=d, ks_p=p,
                           tail_rate=rate, tail_r2=r2)


def run_ensemble(mu: Measure, cfg: SimConfig, n_paths: int, *,
                 threads: Optional[int] = None, with_tail: bool = False):
    """Simulate ``n_paths`` independent paths and summarize them.

    Results are bit-identical for a given seed regardless of ``threads``.
    """
    results = run_paths(mu, cfg, n_paths, threads=threads)
    return results, summarize(results, mu, with_tail=with_tail)
