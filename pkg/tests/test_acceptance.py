"""Acceptance suite.

Each criterion prints one ``criterion N: PASS|FAIL ...`` line (repeated in the
pytest terminal summary). Ensembles are shared across criteria through session
fixtures; statistical checks at the 1% level get one reseeded retry.
"""
import json
import math

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_LINES
from tiltflow import verify as V
from tiltflow.brownian import BrownianPath
from tiltflow.cli import run
from tiltflow.flow import SimConfig, run_paths, simulate_path, summarize
from tiltflow.measure import Atoms, Gaussian, Laplace, Uniform, make_measure
from tiltflow.tilt import TiltParams, tilted_moments

N = 10 ** 4
N_TAIL = 10 ** 5
SEED = 20240
RESEED = 1_000_003
CK_FRACTIONS = (0.1, 0.25, 0.5)

FAMILIES = {
    "uniform": Uniform(-1.0, 1.0),
    "laplace": Laplace(1 / math.sqrt(2)),
    "grid": make_measure({"type": "grid", "xs": [-1, 0, 1], "fs": [0.3, 0.7, 0.3],
                          "normalize": True}),
    "atoms": Atoms((-1.0, 1.0), (0.5, 0.5)),
    "gaussian": Gaussian(1.0),
}
EMBEDDED = ("uniform", "laplace", "grid", "atoms")


def _report(k, passed, detail):
    line = f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def _cfg(mu, seed):
    return SimConfig(seed=seed, checkpoint_times=tuple(f * mu.var for f in CK_FRACTIONS))


class Ensembles:
    """Lazily simulated default-scale ensembles keyed by (family, seed)."""

    def __init__(self):
        self._runs = {}

    def get(self, name, seed=SEED, n=N):
        mu = FAMILIES[name]
        key = (name, seed)
        have = self._runs.get(key)
        if have is None or len(have) < n:
            # path i always uses stream (seed, i), so a prefix of a larger run
            # is the same as a smaller run
            size = N_TAIL if (name, seed) == ("laplace", SEED) else n
            self._runs[key] = run_paths(mu, _cfg(mu, seed), max(size, n))
        return self._runs[key][:n]


@pytest.fixture(scope="session")
def ens():
    return Ensembles()


def _with_retry(check):
    """Run ``check(seed) -> (passed, detail)``; rerun once with a new seed on failure."""
    passed, detail = check(SEED)
    if passed:
        return passed, detail
    passed, retry = check(SEED + RESEED)
    return passed, f"{retry} [reseeded; first attempt: {detail}]"


# -- 1 ---------------------------------------------------------------------------------

def test_criterion_1_gaussian_exactness():
    mu = FAMILIES["gaussian"]

    def check(seed):
        res = run_paths(mu, SimConfig(seed=seed), 1000)
        T = np.array([r.T_hat for r in res])
        p = V.ks_test([r.W_T for r in res], mu)[1]
        inside = bool(np.all((T >= 0.98) & (T <= 1.02)))
        return inside and p > 0.01, (f"T in [{T.min():.8f}, {T.max():.8f}], "
                                     f"KS p = {p:.3f}, n = 1000")
    _report(1, *_with_retry(check))


# -- 2, 3 ------------------------------------------------------------------------------

def test_criterion_2_embedding_law(ens):
    parts, ok = [], True
    for name in EMBEDDED:
        mu = FAMILIES[name]

        def check(seed):
            r = V.check_embedding_and_mean(mu, summarize(ens.get(name, seed), mu))[0]
            return r.passed, f"{name} p = {r.statistic:.3f}"
        passed, detail = _with_retry(check)
        ok &= passed
        parts.append(detail)
    _report(2, ok, "; ".join(parts) + f" (n = {N})")


def test_criterion_3_mean_stopping_time(ens):
    parts, ok = [], True
    for name in EMBEDDED:
        mu = FAMILIES[name]

        def check(seed):
            summ = summarize(ens.get(name, seed), mu)
            r = V.check_embedding_and_mean(mu, summ)[1]
            return r.passed, (f"{name} |{summ.mean_T:.5f} - {mu.var:.5f}| = {r.statistic:.2e}"
                              f" <= {r.threshold:.2e}")
        passed, detail = _with_retry(check)
        ok &= passed
        parts.append(detail)
    _report(3, ok, "; ".join(parts))


# -- 4 ---------------------------------------------------------------------------------

def test_criterion_4_exit_time_oracle(ens):
    target = math.pi ** 2 / 8

    def check(seed):
        T_flow = np.array([r.T_hat for r in ens.get("atoms", seed)])
        T_bm, _ = V.brownian_exit_oracle(-1.0, 1.0, N, seed=seed, dt=1e-6)
        p = stats.ks_2samp(T_flow, T_bm).pvalue
        rate = V.tail_estimate(T_flow).rate
        rel = abs(rate / target - 1)
        return p > 0.01 and rel <= 0.10, (f"two-sample KS p = {p:.3f}, tail rate {rate:.4f} "
                                          f"vs pi^2/8 = {target:.4f} ({100 * rel:.1f}%)")
    _report(4, *_with_retry(check))


# -- 5, 6 ------------------------------------------------------------------------------

def test_criterion_5_deterministic_bounds(ens):
    cases = [("gaussian", "unilc"), ("uniform", "compact_lc"), ("grid", "compact_reg")]
    reps = [V.check_bounds(ens.get(name), FAMILIES[name], kind) for name, kind in cases]
    _report(5, all(r.passed for r in reps),
            "; ".join(f"{name} max T = {r.statistic:.4f} <= {r.threshold:.4f}"
                      for (name, _), r in zip(cases, reps)))


def test_criterion_6_pathwise_inequalities(ens):
    cases = [(n, "logconcave_At") for n in ("uniform", "laplace", "gaussian")]
    cases += [(n, "compact_A") for n in ("uniform", "grid", "atoms")]
    reps = [V.check_bounds(ens.get(name), FAMILIES[name], kind) for name, kind in cases]
    _report(6, all(r.passed for r in reps),
            "; ".join(f"{name} {r.check_name} {r.statistic:.9f} <= {r.threshold:.9f}"
                      for (name, _), r in zip(cases, reps)))


# -- 7 ---------------------------------------------------------------------------------

def test_criterion_7_martingales(ens):
    parts, ok = [], True
    for name in FAMILIES:
        mu = FAMILIES[name]

        def check(seed):
            reps = V.check_martingales(ens.get(name, seed), mu)
            bad = [r.check_name for r in reps if not r.passed]
            worst = max(r.statistic / r.threshold for r in reps)
            return not bad, (f"{name} {len(reps) - len(bad)}/{len(reps)} "
                             f"(worst stat/threshold {worst:.2f})" + (f" failed {bad}" if bad else ""))
        passed, detail = _with_retry(check)
        ok &= passed
        parts.append(detail)
    _report(7, ok, "; ".join(parts))


# -- 8 ---------------------------------------------------------------------------------

def _shared_paths(mu, dt_max, scheme, n, t_ck):
    cfg = SimConfig(dt_max=dt_max, scheme=scheme, checkpoint_times=(t_ck,))
    return [simulate_path(mu, cfg, brownian=BrownianPath(np.random.default_rng(SEED + i)))
            for i in range(n)]


def test_criterion_8_scheme_cross_validation():
    mu = FAMILIES["gaussian"]
    errs = []
    for dt in (4e-3, 2e-3, 1e-3):
        gaps = []
        for r in _shared_paths(mu, dt, "B", 20, 0.5):
            t, w, b, c = r.checkpoints[0, :4]
            gaps.append(abs(tilted_moments(mu, TiltParams(b, c)).a - w))
        errs.append(float(np.mean(gaps)))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    ta = [r.T_hat for r in _shared_paths(mu, 1e-4, "A", 5, 0.5)]
    tb = [r.T_hat for r in _shared_paths(mu, 1e-4, "B", 5, 0.5)]
    dT = max(abs(x - y) for x, y in zip(ta, tb))
    _report(8, min(ratios) >= 1.3 and dT <= 0.05,
            f"|a - w| at t = 0.5: {errs[0]:.2e}, {errs[1]:.2e}, {errs[2]:.2e} "
            f"(ratios {ratios[0]:.2f}, {ratios[1]:.2f}); max |T_A - T_B| = {dT:.2e} at 1e-4")


# -- 9 ---------------------------------------------------------------------------------

def test_criterion_9_identities():
    parts, ok = [], True
    for name, mu in FAMILIES.items():
        grid = V.default_identity_grid(mu)
        assert len(grid) == 25
        reps = V.check_derivative_identities(mu, grid)
        bad = [r.check_name for r in reps if not r.passed]
        ok &= not bad
        parts.append(f"{name} {len(reps) - len(bad)}/{len(reps)}")
    _report(9, ok, "; ".join(parts) + " identities on 5x5 grids")


# -- 10 --------------------------------------------------------------------------------

def test_criterion_10_tail_form(ens):
    res = ens.get("laplace", SEED, N_TAIL)
    fit = V.tail_estimate([r.T_hat for r in res if not r.failed])
    _report(10, fit.r2 >= 0.95 and fit.rate > 0,
            f"Laplace n = {len(res)}: rate = {fit.rate:.4f}, r^2 = {fit.r2:.4f} "
            f"over {fit.n_points} points")


# -- 11 --------------------------------------------------------------------------------

def test_criterion_11_restart():
    mu = FAMILIES["uniform"]

    def check(seed):
        reps = V.check_restart_consistency(mu, 0.1, SimConfig(seed=seed), 5000)
        return all(r.passed for r in reps), ", ".join(
            f"{r.check_name} p = {r.statistic:.3f}" for r in reps)
    _report(11, *_with_retry(check))


# -- 12 --------------------------------------------------------------------------------

def test_criterion_12_reproducibility(tmp_path, capsys):
    spec = tmp_path / "uniform.json"
    spec.write_text(json.dumps({"type": "uniform", "lo": -1, "hi": 1}))
    files = []
    for k in range(2):
        out = tmp_path / f"run{k}.csv"
        assert run(["simulate", "--measure", str(spec), "--paths", "200", "--seed", "7",
                    "--checkpoints", "0.05,0.1", "--out", str(out), "--quiet"]) == 0
        files.append([p.read_bytes() for p in (out, tmp_path / f"run{k}.csv.checkpoints.csv",
                                               tmp_path / f"run{k}.csv.diagnostics.csv")])
    same = files[0] == files[1]
    _report(12, same, f"two simulate runs, 3 CSV files each, byte-identical = {same}")
