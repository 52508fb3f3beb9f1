import math

import numpy as np
import pytest

from tiltflow.brownian import BrownianPath, path_rng
from tiltflow.errors import AllPathsFailed, DegenerateTilt, TargetOutsideHull
from tiltflow.flow import (PathState, SimConfig, initial_state, run_ensemble, run_paths, simulate_path,
                           step, summarize)
from tiltflow.measure import Atoms, Gaussian, Laplace, Uniform, make_measure
from tiltflow.tilt import TiltParams, solve_c, tilted_measure, tilted_moments

G1 = Gaussian(1.0)
TWO = Atoms((-1.0, 1.0), (0.5, 0.5))
GRID = make_measure({"type": "grid", "xs": [-1, 0, 1], "fs": [0.3, 0.7, 0.3], "normalize": True})
FAMILIES = [G1, Laplace(1 / math.sqrt(2)), Uniform(-1.0, 1.0), TWO, GRID]


def _ids(mu):
    return type(mu).__name__


# -- single steps ----------------------------------------------------------------

def test_scheme_b_step_example():
    s = step(G1, initial_state(G1), 0.3, 0.1, "B")
    assert s.tilt.b == pytest.approx(0.1, abs=1e-15)
    assert s.tilt.c == pytest.approx(0.3, abs=1e-15)
    assert s.a == pytest.approx(0.3 / 1.1, rel=1e-14)
    assert s.a == pytest.approx(0.27273, abs=1e-5)
    assert s.w == 0.3


def test_scheme_a_step_example():
    # inversion at the Euler value of b: c = a (1 + b)
    assert solve_c(G1, 0.3, 0.1) == pytest.approx(0.33, rel=1e-12)
    s = step(G1, initial_state(G1), 0.3, 0.1, "A")
    assert s.a == pytest.approx(0.3, abs=1e-10) and s.w == 0.3
    assert s.tilt.c == pytest.approx(0.3 * (1 + s.tilt.b), abs=1e-10)
    # b follows the exact Gaussian flow b_t = t / (1 - t) to high order
    assert s.tilt.b == pytest.approx(1 / 9, abs=1e-8)
    assert s.A == pytest.approx(0.9, abs=1e-8)


@pytest.mark.parametrize("scheme", ["A", "B"])
@pytest.mark.parametrize("mu", FAMILIES, ids=_ids)
def test_zero_step_is_identity(mu, scheme):
    s = initial_state(mu)
    assert step(mu, s, 0.0, 0.0, scheme) == s


def test_step_rejects_exit_and_degenerate():
    s = initial_state(TWO)
    with pytest.raises(TargetOutsideHull):
        step(TWO, s, 1.2, 0.01, "A")
    bad = PathState(t=0.0, w=0.0, tilt=TiltParams(), a=0.0, A=0.0, m3=0.0)
    with pytest.raises(DegenerateTilt):
        step(TWO, bad, 0.1, 0.01)
    with pytest.raises(ValueError):
        step(TWO, s, 0.1, -0.01)


@pytest.mark.parametrize("mu", FAMILIES, ids=_ids)
def test_scheme_a_keeps_mean_on_w(mu):
    s = initial_state(mu)
    rng = np.random.default_rng(3)
    for _ in range(50):
        dt = 2e-3
        s = step(mu, s, math.sqrt(dt) * rng.standard_normal(), dt, "A")
        assert s.a == pytest.approx(s.w, abs=1e-9)
        m = tilted_moments(mu, s.tilt)
        assert (m.a, m.A) == pytest.approx((s.a, s.A), rel=1e-12, abs=1e-14)


# -- whole paths --------------------------------------------------------------------

def test_dirac_short_circuits():
    mu = Atoms((0.0,), (1.0,))
    r = simulate_path(mu, SimConfig(checkpoint_times=(0.5,)), rng_stream=np.random.default_rng(0))
    assert (r.T_hat, r.W_T, r.n_steps) == (0.0, 0.0, 0)
    res, summ = run_ensemble(mu, SimConfig(), 3, threads=1)
    assert summ.mean_T == 0.0 and summ.n_failed == 0


def test_gaussian_paths_stop_at_variance():
    cfg = SimConfig(eps_A=1e-4, seed=1, checkpoint_times=(0.5,))
    res = run_paths(G1, cfg, 50, threads=1)
    for r in res:
        assert 0.98 <= r.T_hat <= 1.02
        assert r.T_hat == pytest.approx(1.0, abs=1e-6)
        assert r.stop_reason == "A_below_eps"
        t, w, b, c, A = r.checkpoints[0, :5]
        # A_t = 1 - t and b_t = t / (1 - t), independent of the path
        assert A == pytest.approx(0.5, abs=1e-7)
        assert b == pytest.approx(1.0, abs=1e-6)


def test_two_point_paths_end_on_atoms():
    res = run_paths(TWO, SimConfig(seed=2), 200, threads=1)
    W = {r.W_T for r in res}
    assert W <= {-1.0, 1.0}
    assert {r.stop_reason for r in res} <= {"target_hull_endpoint", "A_below_eps"}


def test_three_atoms_end_on_atoms():
    mu = Atoms((-2.0, 0.0, 1.0), (0.25, 0.25, 0.5))
    res = run_paths(mu, SimConfig(seed=4), 200, threads=1)
    ok = [r for r in res if not r.failed]
    assert len(ok) >= 190
    assert {r.W_T for r in ok} <= {-2.0, 0.0, 1.0}
    assert abs(np.mean([r.T_hat for r in ok]) - mu.var) < 5 * np.std([r.T_hat for r in ok]) / 14


@pytest.mark.parametrize("mu", FAMILIES, ids=_ids)
def test_path_invariants(mu):
    var = mu.var
    cfg = SimConfig(seed=5, checkpoint_times=tuple(var * f for f in (0.05, 0.1, 0.25, 0.5)))
    res = run_paths(mu, cfg, 40, threads=1)
    lo, hi = mu.support_hull()
    for r in res:
        assert not r.failed
        assert r.min_db >= 0.0
        ck = r.checkpoints
        if len(ck):
            assert np.all(np.diff(ck[:, 2]) >= 0)
            assert np.all(ck[:, 0] <= r.T_hat)
            assert np.all(np.abs(ck[:, 1] - tilted_a(mu, ck)) <= 1e-8 * (1 + np.abs(ck[:, 1])))
        assert r.max_gap <= 1e-8 * (1 + abs(r.W_T)) or isinstance(mu, Atoms)
        assert lo <= r.W_T <= hi
        assert r.T_hat <= cfg.resolved(var).t_max
        if math.isfinite(lo):
            assert r.max_A <= mu.half_width ** 2
        if not isinstance(mu, Atoms):
            assert r.max_Ab <= 1 + 1e-6


def tilted_a(mu, ck):
    return np.array([tilted_moments(mu, TiltParams(b, c)).a for b, c in ck[:, 2:4]])


def test_checkpoint_rows_are_consistent():
    mu = Uniform(-1.0, 1.0)
    cfg = SimConfig(seed=6, checkpoint_times=(0.05, 0.1))
    r = simulate_path(mu, cfg, rng_stream=path_rng(6, 0))
    for t, w, b, c, A, S, *F in r.checkpoints:
        m = tilted_moments(mu, TiltParams(b, c))
        assert A == pytest.approx(m.A, rel=1e-12)
        assert S == pytest.approx(m.m3 / m.A, rel=1e-9, abs=1e-12)
        x = mu.ppf(np.array([0.1, 0.5, 0.9]))
        assert F == pytest.approx(np.exp(c * x - 0.5 * b * x * x - m.log_V), rel=1e-9)


def test_reproducible_and_thread_independent():
    cfg = SimConfig(seed=7, checkpoint_times=(0.1,))
    a = run_paths(GRID, cfg, 12, threads=1)
    b = run_paths(GRID, cfg, 12, threads=3)
    c = run_paths(GRID, cfg, 12, threads=1)
    for x, y, z in zip(a, b, c):
        assert x.T_hat == y.T_hat == z.T_hat
        assert x.W_T == y.W_T == z.W_T
        assert np.array_equal(x.checkpoints, y.checkpoints)
    other = run_paths(GRID, SimConfig(seed=8), 12, threads=1)
    assert [r.T_hat for r in other] != [r.T_hat for r in a]


def test_t_max_failure_and_all_failed():
    cfg = SimConfig(t_max=0.01, seed=1)
    res = run_paths(Uniform(-1.0, 1.0), cfg, 5, threads=1)
    assert all(r.stop_reason == "t_max_reached" and r.failed for r in res)
    with pytest.raises(AllPathsFailed):
        summarize(res, Uniform(-1.0, 1.0))


def test_restart_from_tilted_measure():
    mu = Uniform(-1.0, 1.0)
    h = tilted_measure(mu, TiltParams(2.0, 1.0))
    s0 = initial_state(h)
    assert s0.w == pytest.approx(tilted_moments(mu, TiltParams(2.0, 1.0)).a)
    res = run_paths(h, SimConfig(seed=3), 30, threads=1)
    assert all(not r.failed for r in res)
    assert abs(np.mean([r.W_T for r in res]) - s0.w) < 0.25


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt_max=0)
    with pytest.raises(ValueError):
        SimConfig(eta=1.5)
    with pytest.raises(ValueError):
        SimConfig(eps_A=-1)
    with pytest.raises(ValueError):
        SimConfig(scheme="C")
    with pytest.raises(ValueError):
        SimConfig(checkpoint_times=(-1.0,))
    cfg = SimConfig(checkpoint_times=(0.5, 0.1)).resolved(2.0)
    assert cfg.checkpoint_times == (0.1, 0.5)
    assert cfg.eps_A == 2e-6 and cfg.t_max == 100.0


# -- shared Brownian path --------------------------------------------------------------

def test_brownian_path_bridge_statistics():
    vals = []
    for i in range(4000):
        bp = BrownianPath(np.random.default_rng(i))
        bp(1.0)
        vals.append((bp(1.0), bp(0.25)))
    w1, wq = np.array(vals).T
    # W(1/4) | W(1) ~ N(W(1)/4, 3/16)
    resid = wq - 0.25 * w1
    assert abs(resid.mean()) < 4 * math.sqrt(3 / 16 / 4000)
    assert resid.var() == pytest.approx(3 / 16, rel=0.1)
    assert w1.var() == pytest.approx(1.0, rel=0.1)


def test_brownian_path_remembers():
    bp = BrownianPath(np.random.default_rng(0))
    x = [bp(t) for t in (0.5, 0.1, 0.3, 0.5, 0.1)]
    assert x[0] == x[3] and x[1] == x[4]
    assert bp(0.0) == 0.0
    with pytest.raises(ValueError):
        bp(-1.0)


def test_schemes_agree_on_shared_path():
    cfg_a = SimConfig(dt_max=1e-4, scheme="A", checkpoint_times=(0.5,))
    cfg_b = SimConfig(dt_max=1e-4, scheme="B", checkpoint_times=(0.5,))
    for i in range(3):
        bp = BrownianPath(np.random.default_rng(100 + i))
        ra = simulate_path(G1, cfg_a, brownian=bp)
        rb = simulate_path(G1, cfg_b, brownian=bp)
        assert ra.checkpoints[0, 1] == rb.checkpoints[0, 1]
        assert abs(ra.T_hat - rb.T_hat) <= 0.05
