"""Statistical tasks: losses and their row / column / column-to-row kernels.

A :class:`ModelSpec` names a loss and the subset of access kernels that can
solve it. SVM, logistic regression (LR) and least squares (LS) come with a
row kernel (stochastic gradient) and a column kernel (coordinate descent).
The graph programs QP and LP come with a row kernel and a column-to-row
kernel that reads every edge incident to a vertex.

Loss conventions (``m_i = b_i <x, a_i>``, ``r_i = <x, a_i> - b_i``)::

    SVM  sum max(0, 1 - m_i)          + lam/2 |x|^2
    LR   sum log(1 + exp(-m_i))       + lam/2 |x|^2
    LS   sum r_i^2                    + lam/2 |x|^2
    QP   1/2 sum r_i^2                + lam/2 |x|^2
    LP   sum |r_i|                    + lam/2 |x|^2

QP and LP are meant for edge-incidence matrices (see
:func:`statengine.storage.incidence_matrix`) with a set of anchored
vertices whose values never change.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import expit

from . import _kernels as K
from .storage import build_ctr_index


class Kind(str, enum.Enum):
    SVM = "svm"
    LR = "lr"
    LS = "ls"
    QP = "qp"
    LP = "lp"


class Access(str, enum.Enum):
    ROW = "row"
    COL = "col"
    CTR = "ctr"


class UpdateSparsity(str, enum.Enum):
    SPARSE = "sparse"
    DENSE = "dense"


_KIND_CODE = {Kind.SVM: K.SVM, Kind.LR: K.LR, Kind.LS: K.LS, Kind.QP: K.QP, Kind.LP: K.LP}

_DEFAULT_KERNELS = {
    Kind.SVM: frozenset({Access.ROW, Access.COL}),
    Kind.LR: frozenset({Access.ROW, Access.COL}),
    Kind.LS: frozenset({Access.ROW, Access.COL}),
    Kind.QP: frozenset({Access.ROW, Access.CTR}),
    Kind.LP: frozenset({Access.ROW, Access.CTR}),
}


@dataclass(frozen=True)
class ModelSpec:
    kind: Kind
    dimension: int
    step_size: float
    regularization: float = 0.0
    decay: float = 0.95
    kernels: frozenset = field(default=frozenset())
    anchors: tuple = ()

    def __post_init__(self):
        if Access.COL in self.kernels and Access.CTR in self.kernels:
            raise ValueError("a model defines either a column kernel or a column-to-row kernel, not both")
        if not self.kernels:
            raise ValueError("a model needs at least one kernel")

    @property
    def code(self):
        return _KIND_CODE[self.kind]

    @property
    def update_sparsity(self):
        # shrinkage touches every coordinate on every row step
        return UpdateSparsity.DENSE if self.regularization > 0 else UpdateSparsity.SPARSE

    @property
    def column_access(self):
        """The column-family kernel this spec defines, if any."""
        if Access.COL in self.kernels:
            return Access.COL
        if Access.CTR in self.kernels:
            return Access.CTR
        return None

    @cached_property
    def fixed_mask(self):
        mask = np.zeros(self.dimension, dtype=np.bool_)
        for j, _ in self.anchors:
            mask[j] = True
        mask.flags.writeable = False
        return mask

    def step_at(self, epoch):
        return self.step_size * self.decay**epoch

    def initial_model(self):
        x = np.zeros(self.dimension)
        for j, v in self.anchors:
            x[j] = v
        return x

    def echo(self):
        return {
            "kind": self.kind.value,
            "dimension": self.dimension,
            "step_size": self.step_size,
            "regularization": self.regularization,
            "decay": self.decay,
            "kernels": sorted(k.value for k in self.kernels),
            "n_anchors": len(self.anchors),
        }


def make_spec(kind, d, step_size, regularization=0.0, decay=0.95, anchors=None):
    """Build a :class:`ModelSpec` with the default kernels for ``kind``.

    ``anchors`` is an iterable of ``(coordinate, value)`` pairs held fixed by
    every kernel; it is only meaningful for the graph programs.
    """
    try:
        kind = Kind(kind.lower() if isinstance(kind, str) else kind)
    except ValueError:
        raise ValueError(f"unknown model kind {kind!r}") from None
    if d < 1:
        raise ValueError("dimension must be at least 1")
    if not step_size > 0:
        raise ValueError(f"step size must be positive, got {step_size}")
    if regularization < 0:
        raise ValueError("regularization must be non-negative")
    if not 0 < decay <= 1:
        raise ValueError("decay must lie in (0, 1]")
    anchors = tuple((int(j), float(v)) for j, v in (anchors or ()))
    for j, _ in anchors:
        if not 0 <= j < d:
            raise ValueError(f"anchor coordinate {j} out of range")
    return ModelSpec(
        kind=kind,
        dimension=int(d),
        step_size=float(step_size),
        regularization=float(regularization),
        decay=float(decay),
        kernels=_DEFAULT_KERNELS[kind],
        anchors=anchors,
    )


def graph_anchors(n_vertices, fraction=0.1, seed=0):
    """Pick ``fraction`` of the vertices and pin each to +1 or -1."""
    rng = np.random.default_rng([seed, 0xA7C])
    k = max(1, int(round(fraction * n_vertices)))
    chosen = np.sort(rng.choice(n_vertices, size=k, replace=False))
    signs = rng.choice([-1.0, 1.0], size=k)
    return tuple(zip(chosen.tolist(), signs.tolist()))


# -- bound data for the column-family kernels ---------------------------------


class ColumnView:
    """CSC and CSR arrays of one matrix plus the per-replica residual cache.

    Least-squares coordinate steps read ``r = A x - b`` instead of whole rows;
    call :meth:`refresh` whenever ``x`` changed behind the view's back.
    """

    def __init__(self, m, x=None):
        csc, csr = m.csc, m.csr
        self.cindptr = csc.indptr.astype(np.int64)
        self.cindices = csc.indices.astype(np.int64)
        self.cdata = csc.data
        self.rindptr = csr.indptr.astype(np.int64)
        self.rindices = csr.indices.astype(np.int64)
        self.rdata = csr.data
        self.labels = m.labels if m.labels is not None else np.zeros(m.n_rows)
        ctr = build_ctr_index(m)
        self.ctr_ptr, self.ctr_rows = ctr.indptr, ctr.rows
        self._csr = csr
        self.residual = None
        if x is not None:
            self.refresh(x)

    @property
    def n_cols(self):
        return len(self.cindptr) - 1

    def refresh(self, x):
        r = self._csr @ x - self.labels
        if self.residual is None:
            self.residual = r
        else:
            self.residual[:] = r
        return self.residual


def _check_x(spec, x):
    if x.shape != (spec.dimension,):
        raise ValueError(f"model has shape {x.shape}, expected ({spec.dimension},)")


def apply_row(spec, x, indices, values, label, step=None):
    """One stochastic (sub)gradient step on a single example, in place."""
    _check_x(spec, x)
    if Access.ROW not in spec.kernels:
        raise ValueError(f"{spec.kind.value} has no row kernel")
    indices = np.asarray(indices, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if len(indices) and (indices.min() < 0 or indices.max() >= spec.dimension):
        raise ValueError("row index outside the model dimension")
    eta = spec.step_size if step is None else step
    K.row_step(spec.code, indices, values, 0, len(indices), float(label), x, eta, spec.regularization, spec.fixed_mask)


def apply_col(spec, x, j, view, step=None):
    """Update coordinate ``j`` only, reading column ``j`` of the bound data."""
    _check_x(spec, x)
    if Access.COL not in spec.kernels:
        raise ValueError(f"{spec.kind.value} has no column kernel")
    if not 0 <= j < spec.dimension:
        raise IndexError(f"column {j} out of range")
    if spec.kind is Kind.LS:
        if view.residual is None:
            view.refresh(x)
        K.col_step_ls(j, view.cindptr, view.cindices, view.cdata, x, view.residual, spec.fixed_mask)
    else:
        eta = spec.step_size if step is None else step
        K.col_step_grad(
            spec.code, j, view.cindptr, view.cindices, view.cdata,
            view.rindptr, view.rindices, view.rdata, view.labels,
            x, eta, spec.regularization, spec.fixed_mask,
        )


def apply_ctr(spec, x, j, view):
    """Set ``x_j`` to its exact coordinate minimiser using every row in S(j)."""
    _check_x(spec, x)
    if Access.CTR not in spec.kernels:
        raise ValueError(f"{spec.kind.value} has no column-to-row kernel")
    if not 0 <= j < spec.dimension:
        raise IndexError(f"column {j} out of range")
    width = max(1, int(np.diff(view.ctr_ptr).max(initial=1)))
    K.ctr_step(
        spec.code, j, view.ctr_ptr, view.ctr_rows, view.rindptr, view.rindices, view.rdata,
        view.labels, x, spec.fixed_mask, np.empty(width), np.empty(width),
    )


# -- full-data objective ------------------------------------------------------


def _check_dims(spec, x, m):
    _check_x(spec, x)
    if m.n_cols != spec.dimension:
        raise ValueError(f"data has {m.n_cols} columns, model has {spec.dimension}")


def _labels(m):
    return m.labels if m.labels is not None else np.zeros(m.n_rows)


def loss(spec, x, m):
    _check_dims(spec, x, m)
    z = m.csr @ x
    b = _labels(m)
    kind = spec.kind
    if kind is Kind.SVM:
        value = np.maximum(0.0, 1.0 - b * z).sum()
    elif kind is Kind.LR:
        value = np.logaddexp(0.0, -b * z).sum()
    elif kind is Kind.LS:
        value = np.square(z - b).sum()
    elif kind is Kind.QP:
        value = 0.5 * np.square(z - b).sum()
    else:
        value = np.abs(z - b).sum()
    if spec.regularization:
        value += 0.5 * spec.regularization * float(x @ x)
    return float(value)


def gradient(spec, x, m):
    """Full-data (sub)gradient; anchored coordinates report zero."""
    _check_dims(spec, x, m)
    A = m.csr
    z = A @ x
    b = _labels(m)
    kind = spec.kind
    if kind is Kind.SVM:
        w = -b * (b * z < 1.0)
    elif kind is Kind.LR:
        w = -b * expit(-b * z)
    elif kind is Kind.LS:
        w = 2.0 * (z - b)
    elif kind is Kind.QP:
        w = z - b
    else:
        w = np.sign(z - b)
    g = A.T @ w + spec.regularization * x
    g[spec.fixed_mask] = 0.0
    return g


def grad_norm(spec, x, m):
    return float(np.linalg.norm(gradient(spec, x, m)))
