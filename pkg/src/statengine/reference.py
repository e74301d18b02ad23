"""Reference optima and the time/epochs-to-within-x% metrics.

The optimum of each task is computed with an off-the-shelf solver when one
applies (least squares, linear programs, smooth convex minimisation); for
the rest the lowest loss of a few tight single-thread runs is used.
"""

from __future__ import annotations

import numpy as np
import scipy.optimize as opt
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .models import Kind, loss

# losses are compared as  value <= optimum * (1 + x) + ATOL  so that a zero
# optimum is reachable in floating point
ATOL = 1e-6
THRESHOLDS = (1.0, 0.5, 0.1, 0.01)


def _labels(m):
    return m.labels if m.labels is not None else np.zeros(m.n_rows)


def _ls(spec, m):
    A, b, lam = m.csr, _labels(m), spec.regularization
    if lam == 0:
        x = spla.lsqr(A, b, atol=1e-14, btol=1e-14, iter_lim=20 * (m.n_cols + 10))[0]
        # polish with a dense solve when small enough
        if m.n_cols <= 2000:
            x = np.linalg.lstsq(A.toarray(), b, rcond=None)[0]
        return x
    # stationarity: 2 A^T (A x - b) + lam x = 0
    G = 2.0 * (A.T @ A) + lam * sp.identity(m.n_cols)
    return spla.spsolve(G.tocsc(), 2.0 * (A.T @ b))


def _lr(spec, m):
    A, b, lam = m.csr, _labels(m), spec.regularization

    def f(x):
        z = b * (A @ x)
        value = np.logaddexp(0.0, -z).sum() + 0.5 * lam * x @ x
        g = A.T @ (-b * np.exp(-np.logaddexp(0.0, z))) + lam * x
        return value, g

    res = opt.minimize(f, np.zeros(m.n_cols), jac=True, method="L-BFGS-B", options={"maxiter": 5000, "gtol": 1e-10})
    return res.x


def _svm_lp(m):
    # min sum xi  s.t.  xi_i >= 1 - b_i <a_i, x>,  xi >= 0
    A, b = m.csr, _labels(m)
    N, d = m.shape
    c = np.concatenate([np.zeros(d), np.ones(N)])
    A_ub = sp.hstack([-sp.diags(b) @ A, -sp.identity(N)]).tocsr()
    bounds = [(None, None)] * d + [(0, None)] * N
    res = opt.linprog(c, A_ub=A_ub, b_ub=-np.ones(N), bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"reference LP failed: {res.message}")
    return res.x[:d]


def _free_split(spec):
    fixed = np.asarray(spec.fixed_mask)
    return np.flatnonzero(~fixed), np.flatnonzero(fixed)


def _qp(spec, m):
    A, b = m.csc, _labels(m)
    x = spec.initial_model()
    free, fixed = _free_split(spec)
    Af, Ax = A[:, free], A[:, fixed]
    rhs = b - Ax @ x[fixed]
    G = (Af.T @ Af + spec.regularization * sp.identity(len(free))).tocsc()
    # components without an anchor make G singular; a tiny ridge picks the min-norm-ish solution
    G = G + 1e-12 * sp.identity(len(free))
    x[free] = spla.spsolve(G, Af.T @ rhs)
    return x


def _lp(spec, m):
    # min sum t  s.t.  -t <= A x - b <= t, anchors fixed through bounds
    A, b = m.csr, _labels(m)
    N, d = m.shape
    x0 = spec.initial_model()
    fixed = np.asarray(spec.fixed_mask)
    c = np.concatenate([np.zeros(d), np.ones(N)])
    I = sp.identity(N)
    A_ub = sp.vstack([sp.hstack([A, -I]), sp.hstack([-A, -I])]).tocsr()
    b_ub = np.concatenate([b, -b])
    bounds = [(x0[j], x0[j]) if fixed[j] else (None, None) for j in range(d)] + [(0, None)] * N
    res = opt.linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"reference LP failed: {res.message}")
    return res.x[:d]


def _by_search(spec, m, epochs=300):
    from .engine import plan, train
    from .models import make_spec

    best = np.inf
    for eta in (1.0, 0.5, 0.1, 0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001):
        s = make_spec(spec.kind, spec.dimension, eta, spec.regularization, decay=spec.decay, anchors=spec.anchors)
        try:
            r = train(plan(s, m, overrides={"model_replication": "permachine", "access": "row"}), max_epochs=epochs)
        except ArithmeticError:
            continue
        best = min(best, min(e.loss for e in r.trace))
    return best


def reference_solution(spec, m):
    """Minimiser from an exact solver, or ``None`` if no solver applies."""
    kind = spec.kind
    if kind is Kind.LS:
        return _ls(spec, m)
    if kind is Kind.LR:
        return _lr(spec, m)
    if kind is Kind.SVM and spec.regularization == 0:
        return _svm_lp(m)
    if kind is Kind.QP:
        return _qp(spec, m)
    if kind is Kind.LP and spec.regularization == 0:
        return _lp(spec, m)
    return None


def optimal_loss(spec, m):
    """Best attainable loss of ``spec`` on ``m``."""
    x = reference_solution(spec, m)
    if x is None:
        return float(_by_search(spec, m))
    return loss(spec, x, m)


def reached(value, optimum, within, atol=ATOL):
    return value <= optimum * (1.0 + within) + atol


def epochs_to_within(trace, optimum, within, atol=ATOL):
    """First epoch whose loss is within ``within`` (0.01 = 1%) of the optimum, else None."""
    for s in trace:
        if reached(s.loss, optimum, within, atol):
            return s.epoch
    return None


def time_to_within(trace, optimum, within, atol=ATOL):
    """Cumulative epoch wall time in ms until the loss is within ``within``, else None."""
    elapsed = 0.0
    for s in trace:
        elapsed += s.wall_ms
        if reached(s.loss, optimum, within, atol):
            return elapsed
    return None
