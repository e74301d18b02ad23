import itertools
import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from statengine.datagen import diag_ls, gaussian
from statengine.engine import (
    DataReplication,
    ModelReplica,
    ModelReplication,
    ReplicaScope,
    Session,
    SumStrategy,
    assign_data,
    average_replicas,
    importance_sample,
    importance_sample_size,
    leverage_scores,
    parallel_sum,
    plan,
    run_epoch,
    train,
)
from statengine.errors import NumericalError, PlanError, WorkerError
from statengine.models import Access, make_spec
from statengine.storage import DataMatrix, Format, Layout, incidence_matrix
from statengine.topology import MachineTopology


def small_ls(N=40, d=6, seed=0):
    return gaussian(N, d, 0.6, seed)


# -- planning -----------------------------------------------------------------------


def test_plan_svm_defaults_row_pernode():
    # about 20 non-zeros per row puts the cost ratio well below one
    m = gaussian(200, 40, 0.5, 0).with_labels(np.sign(np.arange(200) % 2 - 0.5))
    p = plan(make_spec("svm", 40, 0.1), m, MachineTopology(2, 2))
    assert p.access is Access.ROW and p.model_replication is ModelReplication.PER_NODE
    assert p.n_replicas == 2


def test_plan_qp_defaults_ctr_permachine():
    edges = np.array([[i, (i + 1) % 30] for i in range(30)] + [[i, (i + 7) % 30] for i in range(30)])
    m = incidence_matrix(edges)
    p = plan(make_spec("qp", 30, 0.1, anchors=[(0, 1.0)]), m, MachineTopology(2, 2))
    assert p.access is Access.CTR and p.model_replication is ModelReplication.PER_MACHINE
    assert p.n_replicas == 1


def test_plan_overrides_verbatim():
    m = small_ls()
    p = plan(make_spec("ls", 6, 0.1), m, MachineTopology(2, 2), {"model_replication": "percore", "data_replication": "sharding"})
    assert p.model_replication is ModelReplication.PER_CORE
    assert p.data_replication is DataReplication.SHARDING
    assert p.n_replicas == 4 and p.replica_scope is ReplicaScope.CORE


@pytest.mark.parametrize("rep, count", [("percore", 6), ("pernode", 3), ("permachine", 1)])
def test_replica_count(rep, count):
    p = plan(make_spec("ls", 6, 0.1), small_ls(), MachineTopology(3, 2), {"model_replication": rep})
    assert p.n_replicas == count
    workers = sorted(w for g in p.groups for w in g.worker_ids)
    assert workers == list(range(6))


def test_plan_binds_matching_layout():
    m = small_ls()
    assert plan(make_spec("ls", 6, 0.1), m, overrides={"access": "col"}).matrix.layout is Layout.COL
    assert plan(make_spec("ls", 6, 0.1), m, overrides={"access": "row"}).matrix.layout is Layout.ROW


def test_plan_layout_conversion_over_cap():
    m = DataMatrix.from_dense(np.ones((50, 4)), labels=np.ones(50), layout="row")
    with pytest.raises(PlanError):
        plan(make_spec("ls", 4, 0.1), m, overrides={"access": "col"}, memory_cap=100)


def test_plan_errors():
    m = small_ls()
    with pytest.raises(PlanError):
        plan(make_spec("ls", 5, 0.1), m)
    with pytest.raises(PlanError):
        MachineTopology(0, 4)
    with pytest.raises(PlanError):
        plan(make_spec("qp", 6, 0.1), m, overrides={"access": "col"})
    with pytest.raises(PlanError):
        plan(make_spec("ls", 6, 0.1), m, overrides={"access": "col", "data_replication": "importance"})


def test_plan_full_replication_falls_back_to_sharding():
    m = small_ls()
    assert plan(make_spec("ls", 6, 0.1), m, MachineTopology(2, 1)).data_replication is DataReplication.FULL
    one_copy = 16 * m.nnz + 8 * (m.n_rows + m.n_cols)
    p = plan(make_spec("ls", 6, 0.1), m, MachineTopology(2, 1), memory_cap=int(1.5 * one_copy))
    assert p.data_replication is DataReplication.SHARDING


# -- data assignment -------------------------------------------------------------------


def test_sharding_partition_small():
    m = diag_ls(4)
    a, b = assign_data("sharding", m, 2, seed=0)
    assert len(a) == len(b) == 2
    assert set(a) | set(b) == {0, 1, 2, 3} and not set(a) & set(b)


def test_full_replication_orders():
    m = diag_ls(4)
    a, b = assign_data("full", m, 2, seed=0)
    assert sorted(a) == sorted(b) == [0, 1, 2, 3]
    assert not np.array_equal(a, b)


def test_one_group_same_coverage():
    m = diag_ls(9)
    (s,), (f,) = assign_data("sharding", m, 1, 3), assign_data("full", m, 1, 3)
    assert set(s) == set(f) == set(range(9))


def test_too_many_groups():
    with pytest.raises(PlanError):
        assign_data("sharding", diag_ls(3), 4, 0)
    m = DataMatrix.from_dense(np.ones((10, 2)), labels=np.ones(10))
    with pytest.raises(PlanError):
        assign_data("sharding", m, 3, 0, access="col")


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 8), st.integers(0, 1000), st.sampled_from(["row", "col"]))
def test_sharding_partition_property(n, groups, seed, access):
    groups = min(groups, n)
    m = diag_ls(n)
    parts = assign_data("sharding", m, groups, seed, access)
    flat = np.concatenate(parts)
    assert sorted(flat.tolist()) == list(range(n))
    sizes = [len(p) for p in parts]
    assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)
    full = assign_data("full", m, groups, seed, access)
    assert all(sorted(p.tolist()) == list(range(n)) for p in full)


def test_ctr_sharding_marks_needed_rows():
    m = incidence_matrix([[0, 1], [1, 2], [2, 3], [3, 0]])
    p = plan(make_spec("qp", 4, 0.1, anchors=[(0, 1.0)]), m, MachineTopology(2, 1), {"data_replication": "sharding"})
    for g in p.groups:
        needed = {int(e) for j in g.assignment for e in np.flatnonzero(m.toarray()[:, j])}
        assert set(g.replicated_rows.tolist()) == needed


# -- leverage scores ---------------------------------------------------------------------


def test_leverage_identity_and_scaled():
    assert np.allclose(leverage_scores(DataMatrix.from_dense(np.eye(5))), 1.0)
    assert np.allclose(leverage_scores(DataMatrix.from_dense(2 * np.eye(5))), 1.0)


def test_leverage_trace_identity(rng):
    A = rng.standard_normal((50, 5))
    s = leverage_scores(DataMatrix.from_dense(A))
    U = np.linalg.svd(A, full_matrices=False)[0]
    assert abs(s.sum() - 5) < 1e-8
    assert np.allclose(s, (U**2).sum(axis=1), atol=1e-10)
    assert np.all((s >= 0) & (s <= 1 + 1e-12))


def test_leverage_singular():
    m = DataMatrix.from_dense([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    with pytest.raises(np.linalg.LinAlgError):
        leverage_scores(m, ridge=False)
    assert np.all(np.isfinite(leverage_scores(m)))


def test_importance_sample_size():
    assert importance_sample_size(0.1, 10) == 4606
    assert len(importance_sample(np.ones(20), 0.1, 10, 0)) == 4606


def test_importance_uniform_frequencies():
    n = 25
    draws = np.concatenate([importance_sample(np.ones(n), 0.1, 10, seed) for seed in range(22)])
    assert len(draws) >= 100_000
    counts = np.bincount(draws, minlength=n)
    p = 1 / n
    sigma = np.sqrt(len(draws) * p * (1 - p))
    assert np.all(np.abs(counts - len(draws) * p) < 4 * sigma)


def test_importance_point_mass_and_determinism():
    scores = np.zeros(10)
    scores[7] = 0.3
    assert set(importance_sample(scores, 0.5, 4, 1).tolist()) == {7}
    s = np.arange(1.0, 11.0)
    assert np.array_equal(importance_sample(s, 0.5, 4, 9), importance_sample(s, 0.5, 4, 9))


@pytest.mark.parametrize("eps", [0.0, 1.0, -0.2])
def test_importance_rejects_epsilon(eps):
    with pytest.raises(ValueError):
        importance_sample(np.ones(5), eps, 3, 0)


def test_importance_rejects_zero_scores():
    with pytest.raises(ValueError):
        importance_sample(np.zeros(5), 0.5, 3, 0)


# -- epochs -------------------------------------------------------------------------------


def test_one_worker_processes_n_rows():
    m = small_ls(37)
    p = plan(
        make_spec("ls", 6, 0.01), m, MachineTopology(1, 1),
        {"access": "row", "model_replication": "permachine", "data_replication": "sharding"},
    )
    with Session(p) as s:
        assert run_epoch(p, s).processed == 37


@pytest.mark.parametrize("k", [2, 3])
def test_full_replication_processes_kn(k):
    m = small_ls(37)
    p = plan(make_spec("ls", 6, 0.01), m, MachineTopology(k, 2), {"data_replication": "full", "access": "row"})
    with Session(p) as s:
        assert s.run_epoch().processed == k * 37
    p = plan(make_spec("ls", 6, 0.01), m, MachineTopology(k, 2), {"data_replication": "sharding", "access": "row"})
    with Session(p) as s:
        assert s.run_epoch().processed == 37


def test_diag_column_one_epoch():
    m = diag_ls(8, seed=2)
    p = plan(make_spec("ls", 8, 0.1), m, overrides={"access": "col"})
    with Session(p) as s:
        assert s.run_epoch().loss == 0.0


def test_run_epoch_wrong_session():
    m = small_ls()
    p1, p2 = plan(make_spec("ls", 6, 0.01), m), plan(make_spec("ls", 6, 0.01), m)
    with Session(p1) as s, pytest.raises(ValueError):
        run_epoch(p2, s)


def test_worker_failure_reports_epoch(monkeypatch):
    m = small_ls()
    p = plan(make_spec("ls", 6, 0.01), m, MachineTopology(1, 2))
    with Session(p) as s:
        s.run_epoch()

        def boom(*a, **k):
            def fail():
                raise RuntimeError("kernel blew up")
            return fail

        monkeypatch.setattr(s, "_task", boom)
        with pytest.raises(WorkerError) as exc:
            s.run_epoch()
        assert exc.value.epoch == 2


# -- averaging ---------------------------------------------------------------------------


def test_average_examples():
    a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    average_replicas([a, b])
    assert a.tolist() == b.tolist() == [0.5, 0.5]
    same = [np.array([2.0, 3.0]), np.array([2.0, 3.0])]
    average_replicas(same)
    assert same[0].tolist() == [2.0, 3.0]
    R = np.zeros((3, 5))
    R[[0, 1, 2], [0, 1, 2]] = 1.0
    average_replicas(R)
    assert np.allclose(R[:, :3], 1 / 3) and np.all(R[:, 3:] == 0)


def test_average_single_replica_noop():
    R = np.array([[1.0, 2.0]])
    average_replicas(R)
    assert R.tolist() == [[1.0, 2.0]]


def test_average_model_replica_objects():
    R = np.array([[1.0, 3.0], [3.0, 1.0]])
    reps = [ModelReplica(i, R[i], ReplicaScope.NODE) for i in range(2)]
    average_replicas(reps)
    assert R.tolist() == [[2.0, 2.0], [2.0, 2.0]]


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 8).flatmap(lambda k: arrays(np.float64, (k, 6), elements=st.floats(-1e6, 1e6))))
def test_average_preserves_mean(R):
    mean = R.mean(axis=0)
    average_replicas(R)
    assert np.allclose(R, R[0])
    assert np.allclose(R[0], mean, rtol=0, atol=1e-12 * max(1.0, np.abs(mean).max()))


# -- training ------------------------------------------------------------------------------


COMBOS = [
    (a, r, d)
    for a, r, d in itertools.product(["row", "col"], ["percore", "pernode", "permachine"], ["sharding", "full", "importance"])
    if not (d == "importance" and a == "col")
]


@pytest.mark.parametrize("access, rep, data", COMBOS)
def test_diag_any_strategy_converges(access, rep, data):
    m = diag_ls(2, seed=4)
    p = plan(make_spec("ls", 2, 0.5), m, MachineTopology(1, 1), {"access": access, "model_replication": rep, "data_replication": data})
    r = train(p, max_epochs=5, loss_target=1e-6)
    assert r.final_loss < 1e-6


@pytest.mark.parametrize("access, rep, data", [c for c in COMBOS if c[1] != "percore"])
def test_diag_shared_replicas_converge_with_two_workers(access, rep, data):
    m = diag_ls(2, seed=4)
    p = plan(make_spec("ls", 2, 0.5), m, MachineTopology(1, 2), {"access": access, "model_replication": rep, "data_replication": data})
    assert train(p, max_epochs=5, loss_target=1e-6).final_loss < 1e-6


@pytest.mark.parametrize("access", ["row", "col"])
def test_percore_averaging_halves_error_per_epoch(access):
    # two workers, one row each: every replica solves its own coordinate,
    # the end-of-epoch mean keeps half of each update
    m = diag_ls(2, seed=4)
    b = m.labels
    spec = make_spec("ls", 2, 0.5, decay=1.0)  # a row step of 0.5 is then exact every epoch
    p = plan(spec, m, MachineTopology(1, 2), {"access": access, "model_replication": "percore"})
    with Session(p) as s:
        for e in range(1, 6):
            s.run_epoch()
            assert np.allclose(s.snapshot(), b * (1 - 0.5**e), rtol=0, atol=1e-15)


def test_train_zero_epochs():
    m = small_ls()
    r = train(plan(make_spec("ls", 6, 0.01), m), max_epochs=0)
    assert len(r.trace) == 1 and r.trace[0].epoch == 0 and r.stop_reason == "max_epochs"


def test_train_zero_timeout():
    m = small_ls()
    r = train(plan(make_spec("ls", 6, 0.01), m), max_epochs=10, timeout=0)
    assert len(r.trace) == 1 and r.stop_reason == "timeout"


def test_train_loss_target():
    m = diag_ls(5)
    r = train(plan(make_spec("ls", 5, 0.1), m, overrides={"access": "col"}), max_epochs=10, loss_target=1e-9)
    assert r.stop_reason == "target" and r.epochs == 1


def test_train_diverges():
    m = small_ls()
    with pytest.raises(NumericalError):
        train(plan(make_spec("ls", 6, 100.0), m, overrides={"access": "row"}), max_epochs=50)


def test_single_worker_bit_reproducible():
    m = gaussian(300, 12, 0.4, 1)
    runs = [train(plan(make_spec("ls", 12, 0.01), m, seed=5), max_epochs=8) for _ in range(2)]
    assert [s.loss for s in runs[0].trace] == [s.loss for s in runs[1].trace]
    assert np.array_equal(runs[0].x, runs[1].x)


@pytest.mark.parametrize("rep", ["percore", "pernode", "permachine"])
def test_lock_free_ls_monotone(rep):
    m = gaussian(2000, 20, 0.3, 3)
    p = plan(make_spec("ls", 20, 0.005), m, MachineTopology(2, 2), {"model_replication": rep, "access": "row"}, seed=1)
    r = train(p, max_epochs=15)
    losses = [s.loss for s in r.trace[1:]]
    assert np.all(np.isfinite(r.x))
    for prev, cur in zip(losses, losses[1:]):
        assert cur <= prev * 1.05


def test_trace_serialisation():
    m = small_ls()
    r = train(plan(make_spec("ls", 6, 0.01), m), max_epochs=3)
    doc = json.loads(r.to_json())
    assert doc["plan"]["spec"]["kind"] == "ls"
    assert [e["epoch"] for e in doc["epochs"]] == [0, 1, 2, 3]
    assert set(doc["epochs"][0]) == {"epoch", "wall_ms", "loss", "grad_norm"}
    lines = r.to_csv().splitlines()
    assert lines[0] == "epoch,wall_ms,loss,grad_norm" and len(lines) == 5


# -- parallel sum ---------------------------------------------------------------------------


@pytest.mark.parametrize("strategy", list(SumStrategy))
def test_parallel_sum_small(strategy):
    r = parallel_sum(np.arange(1, 1001, dtype=float), MachineTopology(2, 2), strategy)
    assert r.total == 500500.0


@pytest.mark.parametrize("strategy", list(SumStrategy))
def test_parallel_sum_empty(strategy):
    assert parallel_sum(np.zeros(0), MachineTopology(2, 2), strategy).total == 0.0


def test_parallel_sum_strategies_agree(rng):
    v = rng.random(1_000_003)
    a = parallel_sum(v, MachineTopology(2, 3), "shared").total
    b = parallel_sum(v, MachineTopology(2, 3), "pernode").total
    assert abs(a - b) <= 1e-9 * abs(a)
    assert abs(a - v.sum()) <= 1e-9 * abs(a)
