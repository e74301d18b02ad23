"""Cost-based choice between row-wise and column-wise access.

Per-epoch cost is a linear mix of data reads and model writes, with writes
weighted by ``alpha`` to account for contention::

    row      sum n_i  + alpha * (sum n_i  if the row update is sparse else N d)
    column   sum n_i^2 + alpha * d

where ``n_i`` is the number of non-zeros in row ``i``. The column estimate
charges every row that co-occurs with a column, and one model write per
column. Costs depend only on the sparsity pattern, never on values.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import config
from .errors import CalibrationError
from .models import Access, UpdateSparsity
from .topology import MachineTopology, run_workers

ALPHA_MIN, ALPHA_MAX = 1.0, 100.0


def estimate_cost(method, s, sparsity, alpha):
    method, sparsity = Access(method), UpdateSparsity(sparsity)
    if method is Access.ROW:
        writes = s.sum_ni if sparsity is UpdateSparsity.SPARSE else s.N * s.d
        return s.sum_ni + alpha * writes
    return s.sum_ni_sq + alpha * s.d


def cost_ratio(s, sparsity, alpha):
    """Row cost over column cost; below 1 favours row-wise access."""
    col = estimate_cost(Access.COL, s, sparsity, alpha)
    row = estimate_cost(Access.ROW, s, sparsity, alpha)
    if col == 0:
        return float("inf") if row > 0 else 1.0
    return row / col


@dataclass(frozen=True)
class CostModel:
    alpha: float = config.DEFAULT_ALPHA

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    def cost(self, method, s, sparsity):
        return estimate_cost(method, s, sparsity, self.alpha)

    def choose(self, spec, s):
        return choose_access_method(spec, s, self.alpha)


def choose_access_method(spec, s, alpha):
    """Cheapest access method the spec defines; ties go to row-wise."""
    column = spec.column_access
    has_row = Access.ROW in spec.kernels
    if column is None:
        return Access.ROW
    if not has_row:
        return column
    row_cost = estimate_cost(Access.ROW, s, spec.update_sparsity, alpha)
    col_cost = estimate_cost(column, s, spec.update_sparsity, alpha)
    return column if col_cost < row_cost else Access.ROW


@dataclass(frozen=True)
class Sensitivity:
    stable: bool
    decisions: tuple  # (alpha, Access) pairs over the grid

    @property
    def decision(self):
        return self.decisions[0][1] if self.stable else None


def sensitivity_check(s, spec, lo=4.0, hi=100.0, points=33):
    """Evaluate the access decision over a log-spaced grid of alpha."""
    grid = np.geomspace(lo, hi, points)
    decisions = tuple((float(a), choose_access_method(spec, s, float(a))) for a in grid)
    return Sensitivity(stable=len({d for _, d in decisions}) == 1, decisions=decisions)


# -- calibration ----------------------------------------------------------------


@njit(nogil=True, cache=True)
def _read_sweep(v, reps):
    s = 0.0
    for _ in range(reps):
        for t in range(v.shape[0]):
            s += v[t]
    return s


@njit(nogil=True, cache=True)
def _write_sweep(x, reps):
    for _ in range(reps):
        for t in range(x.shape[0]):
            x[t] += 1.0
    return reps * x.shape[0]


MIN_TRIAL_SECONDS = 1e-3


def calibrate_alpha(topology=None, trial_size=1 << 23, seed=0, repeats=3, config_path=None, persist=True):
    """Measure the write/read cost factor on this machine.

    ``alpha`` is the throughput of one uncontended sequential reader divided
    by the aggregate throughput of every worker writing the same shared
    vector at once. The result is clamped to ``[1, 100]`` and, unless
    ``persist`` is false, stored under ``alpha`` in the config file.
    """
    topology = topology or MachineTopology()
    rng = np.random.default_rng([seed, 0xCA1])
    data = rng.random(trial_size)
    shared = np.zeros(trial_size)
    _read_sweep(data[:8], 1)
    _write_sweep(shared[:8], 1)

    best_read = float("inf")
    best_write = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        _read_sweep(data, 1)
        best_read = min(best_read, time.perf_counter() - t0)

        spans = run_workers(topology, lambda w: _timed(_write_sweep, shared, 1))
        start = min(s for s, _ in spans)
        end = max(e for _, e in spans)
        best_write = min(best_write, end - start)
    if min(best_read, best_write) < MIN_TRIAL_SECONDS:
        raise CalibrationError(
            f"trial of {trial_size} elements finished in {min(best_read, best_write):.2e}s; increase trial_size"
        )
    read_tp = trial_size / best_read
    write_tp = topology.n_workers * trial_size / best_write
    alpha = float(np.clip(read_tp / write_tp, ALPHA_MIN, ALPHA_MAX))
    if persist:
        config.write_config({"alpha": repr(alpha)}, config_path)
    return alpha


def _timed(fn, *args):
    t0 = time.perf_counter()
    fn(*args)
    return t0, time.perf_counter()
