"""Compiled per-element kernels.

Everything here runs with the GIL released so that worker threads execute
truly concurrently against shared numpy buffers. Model writes are plain
8-byte stores (indivisible on every supported platform); there are no locks.
Task kinds are small integers so one compiled kernel serves every loss.
"""

import numpy as np
from numba import njit, types
from numba.core import cgutils
from numba.extending import intrinsic

SVM, LR, LS, QP, LP = 0, 1, 2, 3, 4


@intrinsic
def atomic_add(typingctx, arr, idx, val):
    """``arr[idx] += val`` as a single atomic read-modify-write."""
    sig = types.float64(arr, types.intp, types.float64)

    def codegen(context, builder, signature, args):
        aryty = signature.args[0]
        ary = context.make_array(aryty)(context, builder, args[0])
        ptr = cgutils.get_item_pointer(context, builder, aryty, ary, [args[1]])
        return builder.atomic_rmw("fadd", ptr, args[2], "monotonic")

    return sig, codegen


@njit(nogil=True, cache=True)
def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


@njit(nogil=True, cache=True)
def row_step(kind, indices, data, lo, hi, label, x, eta, lam, fixed):
    dot = 0.0
    for k in range(lo, hi):
        dot += data[k] * x[indices[k]]
    if kind == SVM:
        coef = eta * label if label * dot < 1.0 else 0.0
    elif kind == LR:
        coef = eta * label * _sigmoid(-label * dot)
    elif kind == LS:
        coef = -2.0 * eta * (dot - label)
    elif kind == QP:
        coef = -eta * (dot - label)
    else:
        r = dot - label
        coef = -eta if r > 0 else (eta if r < 0 else 0.0)
    if lam > 0.0:
        shrink = 1.0 - eta * lam
        for j in range(x.shape[0]):
            if not fixed[j]:
                x[j] *= shrink
    if coef != 0.0:
        for k in range(lo, hi):
            j = indices[k]
            if not fixed[j]:
                x[j] += coef * data[k]


@njit(nogil=True, cache=True)
def row_epoch(kind, indptr, indices, data, labels, ids, x, eta, lam, fixed):
    for t in range(ids.shape[0]):
        i = ids[t]
        row_step(kind, indices, data, indptr[i], indptr[i + 1], labels[i], x, eta, lam, fixed)
    return ids.shape[0]


@njit(nogil=True, cache=True)
def row_epoch_weighted(kind, indptr, indices, data, labels, ids, weights, x, eta, lam, fixed):
    # importance-sampled rows; weights[t] rescales the step of draw t
    for t in range(ids.shape[0]):
        i = ids[t]
        row_step(kind, indices, data, indptr[i], indptr[i + 1], labels[i], x, eta * weights[t], lam, fixed)
    return ids.shape[0]


@njit(nogil=True, cache=True)
def col_step_ls(j, cindptr, cindices, cdata, x, r, fixed):
    # exact minimiser along coordinate j; r caches A x - b
    if fixed[j]:
        return
    num = 0.0
    den = 0.0
    for k in range(cindptr[j], cindptr[j + 1]):
        a = cdata[k]
        num += a * r[cindices[k]]
        den += a * a
    if den == 0.0:
        return
    delta = -num / den
    x[j] += delta
    for k in range(cindptr[j], cindptr[j + 1]):
        r[cindices[k]] += cdata[k] * delta


@njit(nogil=True, cache=True)
def col_epoch_ls(cindptr, cindices, cdata, ids, x, r, fixed):
    for t in range(ids.shape[0]):
        col_step_ls(ids[t], cindptr, cindices, cdata, x, r, fixed)
    return ids.shape[0]


@njit(nogil=True, cache=True)
def col_step_grad(kind, j, cindptr, cindices, cdata, rindptr, rindices, rdata, labels, x, eta, lam, fixed):
    # one gradient step on coordinate j; every margin is re-read from its row
    if fixed[j]:
        return
    g = 0.0
    for k in range(cindptr[j], cindptr[j + 1]):
        i = cindices[k]
        a = cdata[k]
        dot = 0.0
        for q in range(rindptr[i], rindptr[i + 1]):
            dot += rdata[q] * x[rindices[q]]
        b = labels[i]
        if kind == SVM:
            if b * dot < 1.0:
                g -= b * a
        elif kind == LR:
            g -= b * a * _sigmoid(-b * dot)
        elif kind == LS:
            g += 2.0 * a * (dot - b)
        elif kind == QP:
            g += a * (dot - b)
        else:
            res = dot - b
            g += a * (1.0 if res > 0 else (-1.0 if res < 0 else 0.0))
    g += lam * x[j]
    x[j] -= eta * g


@njit(nogil=True, cache=True)
def col_epoch_grad(kind, cindptr, cindices, cdata, rindptr, rindices, rdata, labels, ids, x, eta, lam, fixed):
    for t in range(ids.shape[0]):
        col_step_grad(kind, ids[t], cindptr, cindices, cdata, rindptr, rindices, rdata, labels, x, eta, lam, fixed)
    return ids.shape[0]


@njit(nogil=True, cache=True)
def _weighted_median(vals, wts, n):
    order = np.argsort(vals[:n])
    total = 0.0
    for t in range(n):
        total += wts[t]
    half = 0.5 * total
    acc = 0.0
    for t in range(n):
        acc += wts[order[t]]
        if acc > half:
            return vals[order[t]]
        if acc == half and t + 1 < n:
            return 0.5 * (vals[order[t]] + vals[order[t + 1]])
    return vals[order[n - 1]]


@njit(nogil=True, cache=True)
def ctr_step(kind, j, ctr_ptr, ctr_rows, rindptr, rindices, rdata, labels, x, fixed, buf_v, buf_w):
    """Coordinate minimiser for x_j from all rows in S(j) (QP mean / LP median)."""
    if fixed[j]:
        return
    num = 0.0
    den = 0.0
    n = 0
    for t in range(ctr_ptr[j], ctr_ptr[j + 1]):
        e = ctr_rows[t]
        rest = -labels[e]
        aej = 0.0
        for q in range(rindptr[e], rindptr[e + 1]):
            c = rindices[q]
            if c == j:
                aej = rdata[q]
            else:
                rest += rdata[q] * x[c]
        if aej == 0.0:
            continue
        if kind == LP:
            buf_v[n] = -rest / aej
            buf_w[n] = abs(aej)
            n += 1
        else:
            num += aej * rest
            den += aej * aej
    if kind == LP:
        if n > 0:
            x[j] = _weighted_median(buf_v, buf_w, n)
    elif den > 0.0:
        x[j] = -num / den


@njit(nogil=True, cache=True)
def ctr_epoch(kind, ctr_ptr, ctr_rows, rindptr, rindices, rdata, labels, ids, x, fixed):
    width = 1
    for j in range(ctr_ptr.shape[0] - 1):
        width = max(width, ctr_ptr[j + 1] - ctr_ptr[j])
    buf_v = np.empty(width)
    buf_w = np.empty(width)
    for t in range(ids.shape[0]):
        ctr_step(kind, ids[t], ctr_ptr, ctr_rows, rindptr, rindices, rdata, labels, x, fixed, buf_v, buf_w)
    return ids.shape[0]


@njit(nogil=True, cache=True)
def average_pass(R, fixed):
    """Read every replica once, then write the mean back replica by replica."""
    k, d = R.shape
    mean = np.empty(d)
    for j in range(d):
        s = 0.0
        for r in range(k):
            s += R[r, j]
        mean[j] = s / k
    for r in range(k):
        for j in range(d):
            if not fixed[j]:
                R[r, j] = mean[j]


@njit(nogil=True, cache=True)
def sum_chunk(values, lo, hi, acc, slot):
    for t in range(lo, hi):
        atomic_add(acc, slot, values[t])
    return hi - lo
