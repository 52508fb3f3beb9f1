"""Random streams and a lazily sampled Brownian path.

Ensembles draw per-path generators from ``path_rng``.  ``BrownianPath`` is a
single Brownian trajectory that can be queried at arbitrary times in any
order; unseen points are filled in by Brownian-bridge sampling, so several
integrators with different time grids can be driven by one shared path.
"""
from __future__ import annotations

import bisect
import math

import numpy as np


def path_rng(seed: int, index: int, *tags: int) -> np.random.Generator:
    """Independent generator for path ``index`` of the run seeded by ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags), int(index)]))


class BrownianPath:
    """W on [0, inf) with W(0) = w0, sampled on demand and remembered."""

    def __init__(self, rng: np.random.Generator, w0: float = 0.0):
        self._rng = rng
        self._t = [0.0]
        self._w = [float(w0)]

    def __call__(self, t: float) -> float:
        if t < 0:
            raise ValueError("time must be nonnegative")
        ts, ws = self._t, self._w
        i = bisect.bisect_left(ts, t)
        if i < len(ts) and ts[i] == t:
            return ws[i]
        if i == len(ts):
            dt = t - ts[-1]
            w = ws[-1] + math.sqrt(dt) * self._rng.standard_normal()
        else:
            t0, t1 = ts[i - 1], ts[i]
            w0, w1 = ws[i - 1], ws[i]
            lam = (t - t0) / (t1 - t0)
            mean = w0 + lam * (w1 - w0)
            sd = math.sqrt((t - t0) * (t1 - t) / (t1 - t0))
            w = mean + sd * self._rng.standard_normal()
        ts.insert(i, t)
        ws.insert(i, w)
        return w

    def crossing_uniform(self) -> float:
        """A uniform for the bridge-crossing test (shares the path's stream)."""
        return float(self._rng.random())

    @property
    def n_points(self) -> int:
        return len(self._t)
