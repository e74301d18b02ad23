"""Execution plans, replicated models and the parallel epoch loop.

A plan fixes three choices for a (model, data, topology) triple:

* access method: row-wise, column-wise or column-to-row;
* model replication: one replica per worker (``PER_CORE``), per locality
  group (``PER_NODE``) or one for the whole machine (``PER_MACHINE``);
* data replication: a random partition of the ids over the groups
  (``SHARDING``), a full copy per group in its own order (``FULL``), or a
  fresh leverage-score sample per worker and epoch (``IMPORTANCE``).

Workers are long-lived threads running compiled kernels with the GIL
released. Workers that share a replica write it without locks; a separate
averaging thread keeps multiple replicas in step.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels as K
from . import config
from .errors import NumericalError, PlanError, WorkerError
from .models import Access, ColumnView, Kind, grad_norm, loss
from .optimizer import choose_access_method
from .storage import Format, Layout, build_ctr_index, stats, to_layout
from .topology import MachineTopology, pin_current_thread, run_workers


class ModelReplication(str, enum.Enum):
    PER_CORE = "percore"
    PER_NODE = "pernode"
    PER_MACHINE = "permachine"


class DataReplication(str, enum.Enum):
    SHARDING = "sharding"
    FULL = "full"
    IMPORTANCE = "importance"


class ReplicaScope(str, enum.Enum):
    CORE = "core"
    NODE = "node"
    MACHINE = "machine"


# a loss this many times above max(initial loss, 1) counts as divergence
DIVERGENCE_FACTOR = 1e10

# named random sub-streams
STREAM_DATA, STREAM_SHUFFLE, STREAM_SAMPLER = 1, 2, 3


def rng_for(seed, stream, *keys):
    return np.random.default_rng([int(seed), stream, *map(int, keys)])


@dataclass(frozen=True, eq=False)
class LocalityGroup:
    group_id: int
    worker_ids: tuple
    assignment: np.ndarray
    replica_ids: tuple  # parallel to worker_ids
    replicated_rows: np.ndarray | None = None


@dataclass(eq=False)
class ExecutionPlan:
    spec: object
    matrix: object
    access: Access
    model_replication: ModelReplication
    data_replication: DataReplication
    topology: MachineTopology
    groups: list
    seed: int = 0
    epsilon: float | None = None
    sync: str = "continuous"  # "continuous", "epoch", "none" or milliseconds as text
    importance: np.ndarray | None = None
    alpha: float | None = None
    source: dict = field(default_factory=dict)

    @property
    def n_replicas(self):
        return 1 + max(r for g in self.groups for r in g.replica_ids)

    @property
    def replica_scope(self):
        return {
            ModelReplication.PER_CORE: ReplicaScope.CORE,
            ModelReplication.PER_NODE: ReplicaScope.NODE,
            ModelReplication.PER_MACHINE: ReplicaScope.MACHINE,
        }[self.model_replication]

    def worker_replica(self, w):
        for g in self.groups:
            if w in g.worker_ids:
                return g.replica_ids[g.worker_ids.index(w)]
        raise KeyError(w)

    def echo(self):
        """Everything needed to rebuild this plan (given the same data)."""
        return {
            "spec": self.spec.echo(),
            "access": self.access.value,
            "model_replication": self.model_replication.value,
            "data_replication": self.data_replication.value,
            "epsilon": self.epsilon,
            "topology": self.topology.echo(),
            "sync": self.sync,
            "seed": self.seed,
            "alpha": self.alpha,
            "n_replicas": self.n_replicas,
            "source": dict(self.source),
        }


# -- data assignment ---------------------------------------------------------------


def assign_data(strategy, m, groups, seed, access=Access.ROW):
    """Per-group id lists: row ids for row access, column ids otherwise."""
    strategy, access = DataReplication(strategy), Access(access)
    n_ids = m.n_rows if access is Access.ROW else m.n_cols
    if groups < 1:
        raise PlanError("need at least one group")
    if groups > n_ids:
        raise PlanError(f"{groups} groups but only {n_ids} ids to assign")
    if strategy is DataReplication.SHARDING:
        perm = rng_for(seed, STREAM_DATA).permutation(n_ids)
        # array_split hands the remainder to the earliest parts
        return [np.sort(part).astype(np.int64) for part in np.array_split(perm, groups)]
    if strategy is DataReplication.FULL:
        return [rng_for(seed, STREAM_DATA, g).permutation(n_ids).astype(np.int64) for g in range(groups)]
    return [np.arange(n_ids, dtype=np.int64) for _ in range(groups)]


def leverage_scores(m, ridge=True):
    """``s(i) = a_i^T (A^T A)^{-1} a_i`` for every row of ``m``.

    When ``A^T A`` is singular and ``ridge`` is true, ``1e-8 I`` is added to
    it; with ``ridge`` false a :class:`numpy.linalg.LinAlgError` is raised.
    """
    A = m.csr
    gram = (A.T @ A).toarray()
    try:
        factor = scipy.linalg.cho_factor(gram)
        if np.linalg.cond(gram) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned Gram matrix")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        if not ridge:
            raise np.linalg.LinAlgError("A^T A is singular") from None
        factor = scipy.linalg.cho_factor(gram + 1e-8 * np.eye(gram.shape[0]))
    # Z = A G^{-1};  s_i = <z_i, a_i>
    Z = scipy.linalg.cho_solve(factor, A.T.toarray()).T
    return np.asarray(A.multiply(Z).sum(axis=1)).ravel()


def importance_sample_size(epsilon, d):
    return max(1, math.ceil(2.0 * epsilon**-2 * d * math.log(d))) if d > 1 else 1


def importance_sample(scores, epsilon, d, seed):
    """Draw ``ceil(2 eps^-2 d ln d)`` row ids with replacement, P(i) ~ s(i)."""
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    scores = np.asarray(scores, dtype=np.float64)
    if np.any(scores < 0):
        raise ValueError("scores must be non-negative")
    total = scores.sum()
    if total <= 0:
        raise ValueError("all scores are zero")
    size = importance_sample_size(epsilon, d)
    rng = np.random.default_rng([int(seed), STREAM_SAMPLER])
    return rng.choice(len(scores), size=size, replace=True, p=scores / total).astype(np.int64)


# -- planning -----------------------------------------------------------------------


def _bind_layout(m, access, memory_cap):
    want = Layout.ROW if access is Access.ROW else Layout.COL
    if m.layout is want:
        return m
    try:
        return to_layout(m, want, m.format, memory_cap=memory_cap)
    except MemoryError as exc:
        raise PlanError(f"cannot store data {want.value}-major for {access.value} access: {exc}") from None


def plan(spec, m, topology=None, overrides=None, seed=0, alpha=None, memory_cap=None):
    """Build an :class:`ExecutionPlan`.

    Unforced choices: the access method comes from the cost model; model
    replication follows the rule of thumb (per-node replicas for row access,
    a single shared replica for column access); data is fully replicated
    when a copy per group fits under the memory cap, sharded otherwise.

    ``overrides`` may set ``access``, ``model_replication``,
    ``data_replication``, ``epsilon`` and ``sync``.
    """
    topology = topology or MachineTopology()
    overrides = dict(overrides or {})
    if m.n_cols != spec.dimension:
        raise PlanError(f"data has {m.n_cols} columns, model has {spec.dimension}")
    if m.labels is None and spec.kind in (Kind.SVM, Kind.LR, Kind.LS):
        raise PlanError(f"{spec.kind.value} needs labelled data")
    alpha = config.get_alpha() if alpha is None else alpha
    cap = config.get_memory_cap() if memory_cap is None else memory_cap

    if overrides.get("access") is not None:
        access = Access(overrides["access"])
        if access not in spec.kernels:
            raise PlanError(f"{spec.kind.value} defines no {access.value} kernel")
    else:
        access = choose_access_method(spec, stats(m), alpha)

    if overrides.get("model_replication") is not None:
        model_rep = ModelReplication(overrides["model_replication"])
    else:
        model_rep = ModelReplication.PER_NODE if access is Access.ROW else ModelReplication.PER_MACHINE

    n_groups = topology.n_nodes
    if overrides.get("data_replication") is not None:
        data_rep = DataReplication(overrides["data_replication"])
    else:
        copy_bytes = 16 * m.nnz + 8 * (m.n_rows + m.n_cols)
        data_rep = DataReplication.FULL if n_groups * copy_bytes <= cap else DataReplication.SHARDING
    if data_rep is DataReplication.IMPORTANCE and access is not Access.ROW:
        raise PlanError("importance sampling draws rows; it needs row-wise access")

    bound = _bind_layout(m, access, cap)
    assignments = assign_data(data_rep, bound, n_groups, seed, access)

    epsilon = None
    importance = None
    if data_rep is DataReplication.IMPORTANCE:
        epsilon = float(overrides.get("epsilon") or 0.5)
        if not 0 < epsilon < 1:
            raise PlanError(f"epsilon must lie in (0, 1), got {epsilon}")
        scores = leverage_scores(bound)
        importance = scores / scores.sum()

    ctr = build_ctr_index(bound) if (access is Access.CTR and data_rep is DataReplication.SHARDING) else None
    groups = []
    for g in range(n_groups):
        workers = topology.workers_of(g)
        if model_rep is ModelReplication.PER_CORE:
            replicas = workers
        elif model_rep is ModelReplication.PER_NODE:
            replicas = (g,) * len(workers)
        else:
            replicas = (0,) * len(workers)
        extra = None
        if ctr is not None:
            owned = assignments[g]
            extra = np.unique(np.concatenate([ctr[j] for j in owned])) if len(owned) else np.zeros(0, np.int64)
        groups.append(LocalityGroup(g, workers, assignments[g], replicas, extra))

    default_sync = {
        ModelReplication.PER_CORE: "epoch",
        ModelReplication.PER_NODE: "continuous",
        ModelReplication.PER_MACHINE: "none",
    }[model_rep]
    sync = str(overrides.get("sync") or default_sync)
    return ExecutionPlan(
        spec=spec,
        matrix=bound,
        access=access,
        model_replication=model_rep,
        data_replication=data_rep,
        topology=topology,
        groups=groups,
        seed=int(seed),
        epsilon=epsilon,
        sync=sync,
        importance=importance,
        alpha=float(alpha),
        source=dict(overrides.get("source") or {}),
    )


# -- replicas and averaging -----------------------------------------------------------


@dataclass(eq=False)
class ModelReplica:
    """A row of the shared replica buffer; ``x`` is a live view."""

    replica_id: int
    x: np.ndarray
    scope: ReplicaScope


def average_replicas(replicas, fixed=None):
    """One averaging pass: every replica becomes the coordinate-wise mean.

    ``replicas`` is either a ``(k, d)`` array, updated in place, or a list of
    :class:`ModelReplica` / 1-d arrays. Coordinates flagged in ``fixed`` are
    left alone.
    """
    if isinstance(replicas, np.ndarray) and replicas.ndim == 2:
        R = replicas
        if R.shape[0] < 2:
            return
        K.average_pass(R, _fixed(fixed, R.shape[1]))
        return
    views = [r.x if isinstance(r, ModelReplica) else r for r in replicas]
    if len(views) < 2:
        return
    R = np.stack(views)
    K.average_pass(R, _fixed(fixed, R.shape[1]))
    for v, row in zip(views, R):
        v[:] = row


def _fixed(fixed, d):
    if fixed is None:
        return np.zeros(d, dtype=np.bool_)
    return np.asarray(fixed, dtype=np.bool_)


class _Averager(threading.Thread):
    def __init__(self, R, fixed, interval_s):
        super().__init__(daemon=True)
        self.R, self.fixed, self.interval_s = R, fixed, interval_s
        self.active = threading.Event()
        self.closing = False
        self.passes = 0

    def run(self):
        while not self.closing:
            if not self.active.wait(0.05):
                continue
            K.average_pass(self.R, self.fixed)
            self.passes += 1
            if self.interval_s:
                time.sleep(self.interval_s)


# -- epochs ----------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    wall_ms: float
    loss: float
    grad_norm: float
    processed: int
    averaging_passes: int

    def as_dict(self):
        return asdict(self)


class Session:
    """Live state of a plan: replica buffer, bound arrays and the worker pool.

    Use as a context manager, or call :meth:`close` to stop the threads.
    """

    def __init__(self, plan):
        self.plan = plan
        spec, m = plan.spec, plan.matrix
        self.fixed = spec.fixed_mask
        self.R = np.tile(spec.initial_model(), (plan.n_replicas, 1))
        self.replicas = [ModelReplica(r, self.R[r], plan.replica_scope) for r in range(plan.n_replicas)]
        self.epoch = 0
        self.averaging_passes = 0
        self._loss_scale = max(1.0, loss(spec, self.R[0], m))

        csr = m.csr
        self._labels = m.labels if m.labels is not None else np.zeros(m.n_rows)
        self._row = (csr.indptr.astype(np.int64), csr.indices.astype(np.int64), csr.data)
        self.view = ColumnView(m) if plan.access is not Access.ROW else None
        self.residuals = None
        if plan.access is Access.COL and spec.kind is Kind.LS:
            self.residuals = np.empty((plan.n_replicas, m.n_rows))

        self._workers = [(w, g, g.replica_ids[i]) for g in plan.groups for i, w in enumerate(g.worker_ids)]
        n = len(self._workers)
        self._tasks = [None] * n
        self._counts = [0] * n
        self._errors = [None] * n
        self._start = threading.Barrier(n + 1)
        self._done = threading.Barrier(n + 1)
        self._closing = False
        self._threads = [threading.Thread(target=self._loop, args=(k,), daemon=True) for k in range(n)]
        for t in self._threads:
            t.start()

        self._averager = None
        if plan.n_replicas > 1 and plan.sync not in ("epoch", "none"):
            interval = 0.0 if plan.sync == "continuous" else float(plan.sync) / 1000.0
            self._averager = _Averager(self.R, self.fixed, interval)
            self._averager.start()

    # worker side
    def _loop(self, k):
        pin_current_thread(self.plan.topology, self._workers[k][0])
        while True:
            self._start.wait()
            if self._closing:
                return
            try:
                self._counts[k] = self._tasks[k]()
            except BaseException as exc:  # noqa: BLE001 - surfaced by run_epoch
                self._errors[k] = exc
            self._done.wait()

    def _task(self, ids, replica, weights=None):
        plan, spec = self.plan, self.plan.spec
        x = self.R[replica]
        eta = spec.step_at(self.epoch)
        lam = spec.regularization
        if plan.access is Access.ROW:
            indptr, indices, data = self._row
            if weights is not None:
                return lambda: K.row_epoch_weighted(
                    spec.code, indptr, indices, data, self._labels, ids, weights, x, eta, lam, self.fixed
                )
            return lambda: K.row_epoch(spec.code, indptr, indices, data, self._labels, ids, x, eta, lam, self.fixed)
        v = self.view
        if plan.access is Access.CTR:
            return lambda: K.ctr_epoch(
                spec.code, v.ctr_ptr, v.ctr_rows, v.rindptr, v.rindices, v.rdata, self._labels, ids, x, self.fixed
            )
        if spec.kind is Kind.LS:
            r = self.residuals[replica]
            return lambda: K.col_epoch_ls(v.cindptr, v.cindices, v.cdata, ids, x, r, self.fixed)
        return lambda: K.col_epoch_grad(
            spec.code, v.cindptr, v.cindices, v.cdata, v.rindptr, v.rindices, v.rdata,
            self._labels, ids, x, eta, lam, self.fixed,
        )

    def _epoch_ids(self):
        """Per-worker ``(ids, step weights or None)`` for the current epoch.

        Importance draws carry the weight ``1 / (N p_i)`` so that the expected
        update equals a uniform pass over the data.
        """
        plan = self.plan
        out = []
        for g in plan.groups:
            n_w = len(g.worker_ids)
            if plan.data_replication is DataReplication.IMPORTANCE:
                size = importance_sample_size(plan.epsilon, plan.spec.dimension)
                for w in g.worker_ids:
                    rng = rng_for(plan.seed, STREAM_SAMPLER, self.epoch, w)
                    p = plan.importance
                    ids = rng.choice(len(p), size=size, replace=True, p=p).astype(np.int64)
                    out.append((ids, 1.0 / (len(p) * p[ids])))
                continue
            order = g.assignment[rng_for(plan.seed, STREAM_SHUFFLE, self.epoch, g.group_id).permutation(len(g.assignment))]
            out.extend((np.ascontiguousarray(part), None) for part in np.array_split(order, n_w))
        return out

    def snapshot(self):
        if self.R.shape[0] == 1:
            return self.R[0].copy()
        return self.R.mean(axis=0)

    def evaluate(self):
        x = self.snapshot()
        with np.errstate(over="ignore", invalid="ignore"):
            return x, loss(self.plan.spec, x, self.plan.matrix), grad_norm(self.plan.spec, x, self.plan.matrix)

    def run_epoch(self):
        plan = self.plan
        ids = self._epoch_ids()
        if self.residuals is not None:
            for r in range(self.R.shape[0]):
                self.residuals[r] = plan.matrix.csr @ self.R[r] - self._labels
        for k, (w, g, replica) in enumerate(self._workers):
            self._tasks[k] = self._task(ids[k][0], replica, ids[k][1])
            self._errors[k] = None
        passes_before = self._averager.passes if self._averager else 0
        if self._averager:
            self._averager.active.set()
        t0 = time.perf_counter()
        self._start.wait()
        self._done.wait()
        wall = time.perf_counter() - t0
        if self._averager:
            self._averager.active.clear()
        for k, exc in enumerate(self._errors):
            if exc is not None:
                raise WorkerError(self.epoch + 1, self._workers[k][0], exc)
        passes = (self._averager.passes - passes_before) if self._averager else 0
        if plan.sync == "epoch" and self.R.shape[0] > 1:
            K.average_pass(self.R, self.fixed)
            passes += 1
        self.averaging_passes += passes
        self.epoch += 1
        if not np.all(np.isfinite(self.R)):
            raise NumericalError(
                f"non-finite model after epoch {self.epoch} (step size {plan.spec.step_size} too large?)"
            )
        _, value, gnorm = self.evaluate()
        if not np.isfinite(value) or value > DIVERGENCE_FACTOR * self._loss_scale:
            raise NumericalError(
                f"loss diverged to {value:.3g} after epoch {self.epoch} (step size {plan.spec.step_size} too large?)"
            )
        return EpochStats(self.epoch, wall * 1e3, value, gnorm, int(sum(self._counts)), passes)

    def close(self):
        if self._closing:
            return
        self._closing = True
        if self._averager:
            self._averager.closing = True
            self._averager.active.set()
            self._averager.join()
        self._start.wait()
        for t in self._threads:
            t.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_epoch(plan, session):
    """Run one epoch of ``plan`` on an open :class:`Session`."""
    if session.plan is not plan:
        raise ValueError("session was opened for a different plan")
    return session.run_epoch()


# -- training -------------------------------------------------------------------------


@dataclass
class TrainResult:
    plan: dict
    trace: list
    x: np.ndarray
    stop_reason: str

    @property
    def final_loss(self):
        return self.trace[-1].loss

    @property
    def epochs(self):
        return self.trace[-1].epoch

    def to_json(self):
        return json.dumps(
            {
                "plan": self.plan,
                "stop_reason": self.stop_reason,
                "epochs": [
                    {"epoch": s.epoch, "wall_ms": s.wall_ms, "loss": s.loss, "grad_norm": s.grad_norm}
                    for s in self.trace
                ],
            },
            indent=2,
        )

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "wall_ms", "loss", "grad_norm"])
        for s in self.trace:
            w.writerow([s.epoch, repr(s.wall_ms), repr(s.loss), repr(s.grad_norm)])
        return buf.getvalue()


def train(plan, max_epochs=100, loss_target=None, timeout=None):
    """Run epochs until the loss target, the epoch budget or the timeout.

    The trace starts with the initial model as epoch 0. ``timeout`` counts
    epoch wall time only (loss evaluation is excluded). The returned model is
    the mean of the replicas.
    """
    with Session(plan) as session:
        x, value, gnorm = session.evaluate()
        trace = [EpochStats(0, 0.0, value, gnorm, 0, 0)]
        elapsed = 0.0
        reason = "max_epochs"
        while True:
            if loss_target is not None and trace[-1].loss <= loss_target:
                reason = "target"
                break
            if timeout is not None and elapsed >= timeout:
                reason = "timeout"
                break
            if session.epoch >= max_epochs:
                reason = "max_epochs"
                break
            s = session.run_epoch()
            elapsed += s.wall_ms / 1e3
            trace.append(s)
        x = session.snapshot()
    return TrainResult(plan=plan.echo(), trace=trace, x=x, stop_reason=reason)


# -- parallel sum ----------------------------------------------------------------------


class SumStrategy(str, enum.Enum):
    SHARED_SINGLE = "shared"
    PER_NODE = "pernode"


@dataclass(frozen=True)
class SumResult:
    total: float
    seconds: float
    strategy: SumStrategy

    def gb_per_s(self, n_values):
        return 8.0 * n_values / self.seconds / 1e9 if self.seconds > 0 else float("inf")


_LINE = 8  # doubles per cache line


def parallel_sum(values, topology=None, strategy=SumStrategy.PER_NODE):
    """Sum ``values`` with every worker adding its slice element by element.

    ``SHARED_SINGLE``: all workers add into one shared accumulator.
    ``PER_NODE``: each locality group adds into its own accumulator, padded
    to a separate cache line; the group totals are summed at the end.
    Additions are atomic, so both strategies produce the exact same set of
    terms.
    """
    topology = topology or MachineTopology()
    strategy = SumStrategy(strategy)
    values = np.ascontiguousarray(values, dtype=np.float64)
    n = len(values)
    if n == 0:
        return SumResult(0.0, 0.0, strategy)
    acc = np.zeros(topology.n_nodes * _LINE)
    bounds = np.linspace(0, n, topology.n_workers + 1).astype(np.int64)
    K.sum_chunk(values, 0, 0, acc, 0)  # compile outside the timed region

    def work(w):
        slot = 0 if strategy is SumStrategy.SHARED_SINGLE else topology.node_of(w) * _LINE
        t0 = time.perf_counter()
        K.sum_chunk(values, bounds[w], bounds[w + 1], acc, slot)
        return t0, time.perf_counter()

    spans = run_workers(topology, work)
    seconds = max(e for _, e in spans) - min(s for s, _ in spans)
    return SumResult(float(acc[::_LINE].sum()), seconds, strategy)
