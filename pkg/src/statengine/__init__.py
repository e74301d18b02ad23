"""Parallel first-order solvers with selectable access, model and data replication.

The main entry points::

    from statengine import make_spec, plan, train, MachineTopology
    spec = make_spec("ls", d, step_size=0.01)
    result = train(plan(spec, data, MachineTopology(2, 4)), max_epochs=50)
"""

from .engine import (
    DataReplication,
    EpochStats,
    ExecutionPlan,
    ModelReplication,
    Session,
    SumStrategy,
    TrainResult,
    assign_data,
    average_replicas,
    importance_sample,
    leverage_scores,
    parallel_sum,
    plan,
    run_epoch,
    train,
)
from .errors import (
    CalibrationError,
    FormatError,
    MemoryCapError,
    NumericalError,
    PlanError,
    StatEngineError,
    WorkerError,
)
from .gibbs import FactorGraph, conditional, exact_marginals, gibbs_step, marginals, run_chains
from .models import Access, Kind, ModelSpec, apply_col, apply_ctr, apply_row, grad_norm, gradient, loss, make_spec
from .optimizer import CostModel, calibrate_alpha, choose_access_method, estimate_cost, sensitivity_check
from .storage import DataMatrix, Format, Layout, build_ctr_index, load_svmlight, stats, subsample_rows, to_layout
from .topology import MachineTopology, Pinning

__version__ = "0.1.0"
