"""Executable checks of the embedding's distributional and pathwise claims.

Every check returns a ``CheckReport`` whose ``statistic`` and ``threshold``
can be recomputed from stored path data and the measure alone.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from . import _kernels as K
from .brownian import path_rng
from .errors import (DegenerateTail, HypothesisNotAsserted, InsufficientPaths,
                     MissingCheckpoints, PilotStoppedEarly)
from .flow import (PathResult, SimConfig, _config_vector, _initial_state, _new_diag,
                   _result, PROBE_LEVELS, probe_points, run_paths)
from .measure import Atoms, Gaussian, Laplace, Measure, Uniform
from .tilt import (TiltParams, solve_c, tilt_derivatives, tilted_measure, tilted_moments,
                   window_masses)

SIGNIFICANCE = 0.01
MIN_PATHS_MAIN = 1000
LOGCONCAVE_FAMILIES = (Gaussian, Laplace, Uniform)
FD_STEPS = (1e-2, 1e-3, 1e-4)
FD_RTOL = 1e-5
ORDER_RANGE = (1.8, 2.2)


@dataclass(frozen=True)
class CheckReport:
    check_name: str
    passed: bool
    statistic: float
    threshold: float
    n_used: int
    detail: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("statistic", "threshold"):
            if not math.isfinite(d[k]):
                d[k] = str(d[k])
        return d


def _ok(results: Sequence[PathResult]) -> list:
    return [r for r in results if not r.failed]


def tol_T(eps_A: float, dt_max: float) -> float:
    return 2.0 * eps_A + 5.0 * dt_max


# ---------------------------------------------------------------------------
# embedding law and mean
# ---------------------------------------------------------------------------

def ks_test(samples, mu: Measure) -> tuple[float, float]:
    """Kolmogorov-Smirnov distance of the samples to ``mu`` and its p-value.

    For atomic measures the sup runs over both sides of every jump and the
    asymptotic Kolmogorov p-value is used; it is conservative for
    discontinuous CDFs.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n == 0:
        raise ValueError("ks_test needs at least one sample")
    if isinstance(mu, Atoms):
        pts = np.unique(np.concatenate((x, np.asarray(mu.points))))
        f_emp = np.searchsorted(x, pts, side="right") / n
        f_emp_left = np.searchsorted(x, pts, side="left") / n
        f_mu = mu.cdf(pts)
        f_mu_left = mu.cdf(np.nextafter(pts, -np.inf))
        d = float(max(np.max(np.abs(f_emp - f_mu)), np.max(np.abs(f_emp_left - f_mu_left))))
        p = float(stats.kstwobign.sf(math.sqrt(n) * d))
        return d, p
    res = stats.kstest(x, mu.cdf, method="asymp")
    return float(res.statistic), float(res.pvalue)


def check_embedding_and_mean(mu: Measure, summary, eps_A: Optional[float] = None
                             ) -> tuple[CheckReport, CheckReport]:
    """W_T ~ mu by KS at the 1% level, and E[T] = Var within 3 SE + 2 eps_A."""
    n_used = summary.n - summary.n_failed
    if n_used < MIN_PATHS_MAIN:
        raise InsufficientPaths(f"{n_used} usable paths, need {MIN_PATHS_MAIN}")
    eps = 1e-6 * mu.var if eps_A is None else eps_A
    r1 = CheckReport("embedding_ks", summary.ks_p > SIGNIFICANCE, summary.ks_p, SIGNIFICANCE,
                     n_used, f"D = {summary.ks_stat:.5f}; passes when p > threshold")
    gap = abs(summary.mean_T - mu.var)
    thr = 3.0 * summary.se_T + 2.0 * eps
    r2 = CheckReport("mean_T", gap <= thr, gap, thr, n_used,
                     f"mean_T = {summary.mean_T:.6f} +- {summary.se_T:.6f}, Var = {mu.var:.6f}")
    return r1, r2


# ---------------------------------------------------------------------------
# martingales
# ---------------------------------------------------------------------------

PROBE_HALF_WIDTH = 0.01     # probe windows span quantile levels q -/+ this


@dataclass
class StoppedPanel:
    """Per-path values at each checkpoint time, frozen at the stop."""

    times: np.ndarray
    X: np.ndarray          # A_{t^T} + t^T
    W: np.ndarray          # W_{t^T}
    F: np.ndarray          # mu_{t^T}(E) / mu(E) per probe window, shape (paths, times, probes)


def probe_windows(mu: Measure, half_width: float = PROBE_HALF_WIDTH):
    """Closed quantile windows around each probe level, and their mu-mass."""
    wins = []
    for q in PROBE_LEVELS:
        lo = float(mu.ppf(max(q - half_width, 0.0)))
        hi = float(mu.ppf(min(q + half_width, 1.0)))
        wins.append((lo, hi))
    mass = np.array([float(mu.cdf(hi) - mu.cdf(np.nextafter(lo, -np.inf))) for lo, hi in wins])
    return wins, mass


def stopped_panel(results: Sequence[PathResult], times: Sequence[float],
                  mu: Measure) -> StoppedPanel:
    """Checkpoint values, with stopped paths carrying their terminal values.

    A path without a row at time t has stopped before t.  It then contributes
    A = 0 and t^T = T_hat (the eps-stop time plus the residual A, which is
    the optionally stopped value of A + t), W = W_T, and the terminal point
    mass acting on each probe window.  Window ratios rather than point values
    of F are used because F at a stop is a spike of width sqrt(eps_A): its
    mean is right but its variance makes the 3 SE test meaningless.
    """
    ok = _ok(results)
    times = np.asarray(times, dtype=float)
    wins, mass = probe_windows(mu)
    n, m = len(ok), len(times)
    X = np.empty((n, m))
    W = np.empty((n, m))
    F = np.empty((n, m, len(wins)))
    lo = np.array([w[0] for w in wins])
    hi = np.array([w[1] for w in wins])
    for i, r in enumerate(ok):
        ck = r.checkpoints
        for k, t in enumerate(times):
            if k < len(ck):
                if abs(ck[k, 0] - t) > 1e-9 * (1.0 + t):
                    raise MissingCheckpoints(f"checkpoint {k} at {ck[k, 0]} != {t}")
                X[i, k] = ck[k, 4] + ck[k, 0]
                W[i, k] = ck[k, 1]
                F[i, k] = window_masses(mu, TiltParams(ck[k, 2], ck[k, 3]), wins) / mass
            else:
                X[i, k] = r.T_hat
                W[i, k] = r.W_T
                F[i, k] = ((lo <= r.W_T) & (r.W_T <= hi)) / mass
    return StoppedPanel(times, X, W, F)


def _mean_check(name, values, target, atol, extra=""):
    n = values.size
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    gap = abs(mean - target)
    thr = 3.0 * se + atol
    return CheckReport(name, gap <= thr, gap, thr, n,
                       f"mean = {mean:.6g}, target = {target:.6g}, se = {se:.3g}{extra}")


def check_martingales(results: Sequence[PathResult], mu: Measure,
                      times: Optional[Sequence[float]] = None,
                      eps_A: Optional[float] = None) -> list:
    """Constant-mean checks for A + t, W and the probe-window F at each checkpoint.

    Tolerance is 3 SE plus a small absolute allowance: 2 eps_A for A + t (the
    stop residual), 1e-9 for W and 1e-8 for F (quadrature), so that exact
    deterministic cases pass.
    """
    ok = _ok(results)
    if not ok:
        raise MissingCheckpoints("no usable paths")
    if times is None:
        longest = max(ok, key=lambda r: len(r.checkpoints))
        times = longest.checkpoints[:, 0] if len(longest.checkpoints) else []
    if len(times) == 0:
        raise MissingCheckpoints("no checkpoint times recorded")
    eps = 1e-6 * mu.var if eps_A is None else eps_A
    panel = stopped_panel(ok, times, mu)
    wins, _ = probe_windows(mu)
    reports = []
    for k, t in enumerate(panel.times):
        reports.append(_mean_check(f"martingale_A_plus_t@{t:g}", panel.X[:, k], mu.var, 2 * eps))
        reports.append(_mean_check(f"martingale_W@{t:g}", panel.W[:, k], 0.0, 1e-9))
        for j, (lo, hi) in enumerate(wins):
            reports.append(_mean_check(f"martingale_F@{t:g}_q{int(100 * PROBE_LEVELS[j])}",
                                       panel.F[:, k, j], 1.0, 1e-8,
                                       f", window [{lo:.4g}, {hi:.4g}]"))
    return reports


# ---------------------------------------------------------------------------
# deterministic bounds
# ---------------------------------------------------------------------------

def is_logconcave(mu: Measure) -> bool:
    return bool(mu.logconcave_hint) or isinstance(mu, LOGCONCAVE_FAMILIES)


def check_bounds(results: Sequence[PathResult], mu: Measure, kind: str, *,
                 eps_A: Optional[float] = None, dt_max: float = 1e-3,
                 sigma: Optional[float] = None, alpha: Optional[float] = None,
                 beta: Optional[float] = None, L: Optional[float] = None) -> CheckReport:
    """Bound checks on T and on the pathwise product A_t b_t.

    kind: ``unilc`` (T <= sigma^2), ``compact_reg`` (T <= 2 L^2 beta/alpha),
    ``compact_lc`` (T <= 2 L^2), ``logconcave_At`` (A_t b_t <= 1),
    ``compact_A`` (A_t <= L^2), ``density_A`` (A_t b_t <= beta/alpha).
    """
    ok = _ok(results)
    if not ok:
        raise InsufficientPaths("no usable paths")
    eps = 1e-6 * mu.var if eps_A is None else eps_A
    tolT = tol_T(eps, dt_max)
    lo, hi = mu.support_hull()
    bounded = math.isfinite(lo) and math.isfinite(hi)
    if L is None and bounded:
        L = max(abs(lo), abs(hi))
    if alpha is None and beta is None and mu.density_bounds is not None:
        alpha, beta = mu.density_bounds
    max_T = max(r.T_hat for r in ok)
    n = len(ok)
    if kind == "unilc":
        if sigma is None:
            if not isinstance(mu, Gaussian):
                raise HypothesisNotAsserted("unilc needs sigma for a non-Gaussian measure")
            sigma = mu.sigma
        elif not (isinstance(mu, Gaussian) or mu.logconcave_hint):
            raise HypothesisNotAsserted("unilc needs a log-concave measure")
        thr = sigma ** 2 + tolT
        return CheckReport("bound_unilc", max_T <= thr, max_T, thr, n,
                           f"sigma = {sigma:g}, tol_T = {tolT:g}")
    if kind == "compact_lc":
        if not bounded or L is None or not is_logconcave(mu):
            raise HypothesisNotAsserted("compact_lc needs bounded support and log-concavity")
        thr = 2.0 * L * L + tolT
        return CheckReport("bound_compact_lc", max_T <= thr, max_T, thr, n, f"L = {L:g}")
    if kind == "compact_reg":
        if L is None or alpha is None or beta is None or not alpha > 0:
            raise HypothesisNotAsserted("compact_reg needs L and density bounds alpha > 0")
        thr = 2.0 * L * L * beta / alpha + tolT
        return CheckReport("bound_compact_reg", max_T <= thr, max_T, thr, n,
                           f"L = {L:g}, alpha = {alpha:.6g}, beta = {beta:.6g}")
    if kind == "logconcave_At":
        if not is_logconcave(mu):
            raise HypothesisNotAsserted("logconcave_At needs a log-concave measure")
        stat = max(r.max_Ab for r in ok)
        thr = 1.0 + 1e-6
        return CheckReport("pathwise_A_times_b", stat <= thr, stat, thr, n,
                           "max over paths and steps of A_t b_t")
    if kind == "compact_A":
        if L is None:
            raise HypothesisNotAsserted("compact_A needs bounded support")
        stat = max(r.max_A for r in ok)
        thr = L * L * (1.0 + 1e-9)
        return CheckReport("pathwise_A_le_L2", stat <= thr, stat, thr, n, f"L = {L:g}")
    if kind == "density_A":
        if alpha is None or beta is None or not alpha > 0:
            raise HypothesisNotAsserted("density_A needs density bounds alpha > 0")
        stat = max(r.max_Ab for r in ok)
        thr = beta / alpha * (1.0 + 1e-6)
        return CheckReport("pathwise_A_times_b_density", stat <= thr, stat, thr, n,
                           f"beta/alpha = {beta / alpha:.6g}")
    raise ValueError(f"unknown bound kind {kind!r}")


# ---------------------------------------------------------------------------
# tail
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TailFit:
    rate: float
    r2: float
    intercept: float
    n_points: int
    table: np.ndarray = field(repr=False)      # columns t, P(T > t)


def survival_table(T) -> np.ndarray:
    t = np.sort(np.asarray(T, dtype=float))
    n = t.size
    vals, idx = np.unique(t, return_index=True)
    # P(T > v) for each distinct value v
    last = np.concatenate((idx[1:], [n]))
    surv = (n - last) / n
    return np.column_stack((vals, surv))


def tail_estimate(T, window=(0.001, 0.5), min_samples: int = 10 ** 4,
                  resolution: float = 1e-9) -> TailFit:
    """Least-squares fit of log P(T > t) = intercept - rate t over ``window``.

    Values closer than ``resolution`` (relative to max T) are merged before
    counting distinct survival points.
    """
    T = np.asarray(T, dtype=float)
    if T.size < min_samples:
        raise InsufficientPaths(f"{T.size} samples, need {min_samples}")
    q = resolution * (1.0 + float(np.max(np.abs(T))))
    table = survival_table(np.round(T / q) * q)
    sel = (table[:, 1] >= window[0]) & (table[:, 1] <= window[1])
    if sel.sum() < 5:
        raise DegenerateTail(f"only {int(sel.sum())} distinct survival points in the window")
    fit = stats.linregress(table[sel, 0], np.log(table[sel, 1]))
    return TailFit(rate=float(-fit.slope), r2=float(fit.rvalue ** 2),
                   intercept=float(fit.intercept), n_points=int(sel.sum()), table=table)


EXIT_BLOCK = 1 << 18


def _exit_time(rng: np.random.Generator, lo: float, hi: float, dt: float, t_cap: float):
    sq = math.sqrt(dt)
    w = 0.0
    t = 0.0
    while t < t_cap:
        path = w + np.cumsum(rng.standard_normal(EXIT_BLOCK)) * sq
        hit = np.flatnonzero((path <= lo) | (path >= hi))
        if hit.size:
            k = int(hit[0])
            return t + (k + 1) * dt, (1.0 if path[k] >= hi else -1.0)
        w = float(path[-1])
        t += EXIT_BLOCK * dt
    return t_cap, 0.0


def brownian_exit_oracle(lo: float, hi: float, n: int, seed: int, dt: float = 1e-6,
                         t_cap: float = 200.0, threads: Optional[int] = None):
    """Independent fine-step first-exit times of W from (lo, hi), W_0 = 0.

    Gaussian increments on a dt grid, monitored at grid points.  Returns
    (times, sides) with side +1 for an exit at hi, -1 at lo, 0 if capped.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .flow import default_threads

    threads = threads or default_threads()
    out = np.empty((n, 2))

    def work(ids):
        for i in ids:
            out[i] = _exit_time(path_rng(seed, int(i), 0xE817), lo, hi, dt, t_cap)

    chunks = [range(k, n, threads) for k in range(threads)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        list(ex.map(work, chunks))
    return out[:, 0], out[:, 1]


# ---------------------------------------------------------------------------
# restart
# ---------------------------------------------------------------------------

def _quantize(x, q):
    return np.round(np.asarray(x) / q) * q


def restart_samples(mu: Measure, s: float, cfg: SimConfig, n: int, *,
                    threads: Optional[int] = None, max_attempts: int = 10):
    """Continuations of one pilot path past time s, and fresh restarts from mu_s.

    Returns (T - s of continuations, W_T of continuations, T of restarts,
    W_T of restarts, pilot tilt at s).
    """
    cfg = cfg.resolved(mu.var)
    kind, tab = mu.kernel_table()
    probes = probe_points(mu)
    no_ck = np.empty(0)
    scratch = np.zeros((0, 6 + len(probes)))
    for attempt in range(max_attempts):
        st = _initial_state(mu, TiltParams())
        dg = _new_diag()
        cf = _config_vector(mu, replace(cfg, t_max=max(s, 1e-300)))
        rng = path_rng(cfg.seed, attempt, 0x9110)
        if s > 0:
            while dg[K.D_STOP] == K.RUNNING:
                K.run_path(kind, tab, st, dg, cf, rng.standard_normal(1024), rng.random(1024),
                           no_ck, scratch, probes)
            if dg[K.D_STOP] == K.STOP_TMAX and abs(st[K.S_T] - s) <= 1e-12 * (1 + s):
                break
        else:
            break
    else:
        raise PilotStoppedEarly(f"pilot stopped before s = {s} in {max_attempts} attempts")
    pilot = TiltParams(float(st[K.S_B]), float(st[K.S_C]))
    cf = _config_vector(mu, cfg)
    cont_T = np.empty(n)
    cont_W = np.empty(n)
    cont_fail = np.zeros(n, dtype=bool)
    for j in range(n):
        st_j = st.copy()
        dg_j = _new_diag()
        rng = path_rng(cfg.seed, j, 0xC047)
        while dg_j[K.D_STOP] == K.RUNNING:
            K.run_path(kind, tab, st_j, dg_j, cf, rng.standard_normal(1024), rng.random(1024),
                       no_ck, scratch, probes)
        res = _result(dg_j, scratch)
        cont_T[j] = res.T_hat - s
        cont_W[j] = res.W_T
        cont_fail[j] = res.failed
    handle = tilted_measure(mu, pilot)
    fresh = run_paths(handle, replace(cfg, seed=cfg.seed), n, threads=threads,
                      seed_tag=(0x4E57,))
    rest_T = np.array([r.T_hat for r in fresh if not r.failed])
    rest_W = np.array([r.W_T for r in fresh if not r.failed])
    return cont_T[~cont_fail], cont_W[~cont_fail], rest_T, rest_W, pilot


def check_restart_consistency(mu: Measure, s: float, cfg: SimConfig, n: int, *,
                              threads: Optional[int] = None) -> list:
    """Two-sample KS of (T - s | pilot up to s) against T of the restarted flow.

    T values are rounded to tol_T before testing so that point-mass laws
    compare equal despite floating-point noise.
    """
    if n < 2:
        raise InsufficientPaths("restart check needs n >= 2")
    cfg_r = cfg.resolved(mu.var)
    cT, cW, rT, rW, pilot = restart_samples(mu, s, cfg, n, threads=threads)
    q = tol_T(cfg_r.eps_A, cfg_r.dt_max)
    kt = stats.ks_2samp(_quantize(cT, q), _quantize(rT, q))
    kw = stats.ks_2samp(cW, rW)
    detail = f"s = {s:g}, pilot (b, c) = ({pilot.b:.6g}, {pilot.c:.6g})"
    return [
        CheckReport("restart_T_ks2", kt.pvalue > SIGNIFICANCE, float(kt.pvalue), SIGNIFICANCE,
                    min(len(cT), len(rT)), f"D = {kt.statistic:.5f}; {detail}"),
        CheckReport("restart_W_ks2", kw.pvalue > SIGNIFICANCE, float(kw.pvalue), SIGNIFICANCE,
                    min(len(cW), len(rW)), f"D = {kw.statistic:.5f}; {detail}"),
    ]


# ---------------------------------------------------------------------------
# derivative identities
# ---------------------------------------------------------------------------

EPS = np.finfo(float).eps


def _order(hs, errs, floors):
    """Observed order from the steps whose error clears 100x the roundoff floor."""
    use = [(h, e) for h, e, f in zip(hs, errs, floors) if e > 100.0 * f]
    if len(use) < 2:
        return None
    x = np.log([u[0] for u in use])
    y = np.log([u[1] for u in use])
    return float(np.polyfit(x, y, 1)[0])


def _fd_identity(name, fd_fn, exact, scale, noise, hs=FD_STEPS):
    """Compare a finite-difference estimate with its analytic value.

    ``scale`` normalizes errors (the larger of |exact| and a natural unit);
    ``noise(h)`` bounds roundoff in the estimate.  The error at the smallest
    step must be below FD_RTOL; the observed order, measured over steps where
    truncation dominates roundoff, must lie in ORDER_RANGE.  Identities that
    are exact (all errors at roundoff level) pass the order test trivially.
    """
    errs = [abs(fd_fn(h) - exact) / scale for h in hs]
    floors = [noise(h) / scale for h in hs]
    order = _order(hs, errs, floors)
    err_ok = errs[-1] <= FD_RTOL
    order_ok = order is None or ORDER_RANGE[0] <= order <= ORDER_RANGE[1]
    how = "exact to roundoff" if order is None else f"order {order:.3f}"
    return err_ok and order_ok, errs[-1], order, f"{name}: rel err {errs[-1]:.2e}, {how}"


def derivative_identities(mu: Measure, b: float, c: float, hs=FD_STEPS) -> list:
    """(name, passed, err, order, text) for the four identities at (b, c)."""
    p = TiltParams(b, c)
    m = tilted_moments(mu, p)
    d = tilt_derivatives(mu, p)
    A = m.A
    sA = math.sqrt(A)
    lo, hi = mu.support_hull()
    a0 = m.a
    if not (lo < a0 - max(hs) < a0 + max(hs) < hi):
        raise ValueError(f"(b, c) = ({b}, {c}) is too close to the hull for the stencil")
    tight = 4 * EPS * (1.0 + abs(a0))

    def a_at(cc):
        return tilted_moments(mu, TiltParams(b, cc)).a

    def c_at(aa, bb):
        return solve_c(mu, aa, bb, tol=tight, c0=c)

    c0 = c_at(a0, b)
    eps_a = 8 * EPS * (abs(a0) + sA)
    eps_c = 8 * EPS * (abs(c0) + 1.0 / sA) + tight / A
    out = []
    out.append(("a2_eq_A",) + _fd_identity(
        "da/dc = A", lambda h: (a_at(c + h) - a_at(c - h)) / (2 * h), A, A,
        lambda h: eps_a / h, hs))
    out.append(("c1_eq_inv_A",) + _fd_identity(
        "dc/da = 1/A", lambda h: (c_at(a0 + h, b) - c_at(a0 - h, b)) / (2 * h), d.c1, d.c1,
        lambda h: eps_c / h, hs))
    if b >= max(hs):
        out.append(("c2",) + _fd_identity(
            "dc/db = c2", lambda h: (c_at(a0, b + h) - c_at(a0, b - h)) / (2 * h), d.c2,
            max(abs(d.c2), sA), lambda h: eps_c / h, hs))
    out.append(("c11",) + _fd_identity(
        "d2c/da2 = c11", lambda h: (c_at(a0 + h, b) - 2 * c0 + c_at(a0 - h, b)) / (h * h),
        d.c11, max(abs(d.c11), A ** -1.5), lambda h: 4 * eps_c / (h * h), hs))
    return out


def check_derivative_identities(mu: Measure, grid: Iterable[tuple[float, float]]) -> list:
    """One CheckReport per identity, aggregated over the (b, c) grid."""
    rows = {}
    for b, c in grid:
        for name, passed, err, order, text in derivative_identities(mu, b, c):
            rows.setdefault(name, []).append((passed, err, order, f"({b:g},{c:g}) {text}"))
    reports = []
    for name, items in rows.items():
        worst = max(it[1] for it in items)
        orders = [it[2] for it in items if it[2] is not None]
        fails = [it[3] for it in items if not it[0]]
        detail = (f"orders in [{min(orders):.3f}, {max(orders):.3f}]" if orders
                  else "all exact to roundoff")
        if fails:
            detail += "; failing: " + " | ".join(fails)
        reports.append(CheckReport(f"identity_{name}", not fails, worst, FD_RTOL, len(items),
                                   detail))
    return reports


def default_identity_grid(mu: Measure) -> list:
    """A 5x5 (b, c) grid inside the integrable region, away from the hull."""
    bs = (0.1, 0.5, 1.0, 2.0, 4.0)
    scale = math.sqrt(mu.var)
    cs = tuple(k / scale for k in (-1.0, -0.5, 0.0, 0.5, 1.0))
    return [(b, c) for b in bs for c in cs]
