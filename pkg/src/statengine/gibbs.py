"""Gibbs sampling on factor graphs.

Resampling one variable reads every factor that touches it and, through
those factors, every neighbouring variable: the column-to-row access
pattern with variables as columns and factors as rows.

Two ways to spend a pool of workers:

* ``PER_NODE``: every locality group runs an independent chain on its own
  copy of the assignment; its workers sweep disjoint contiguous blocks of
  variables without locks.
* ``PER_MACHINE``: all workers sweep blocks of a single shared assignment.

Samples from all chains are pooled at the end.
"""

from __future__ import annotations

import enum
import itertools
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from . import config
from .errors import FormatError, MemoryCapError
from .topology import MachineTopology, run_workers

MAX_EXACT_STATES = 1 << 20
STREAM_INIT, STREAM_CHAIN = 11, 12


class ChainStrategy(str, enum.Enum):
    PER_NODE = "pernode"
    PER_MACHINE = "permachine"


@dataclass(frozen=True, eq=False)
class FactorGraph:
    """Variables with finite domains and log-weight tables over factor scopes.

    Factor ``f`` covers ``factor_vars[factor_ptr[f]:factor_ptr[f+1]]``; its
    table lists log-weights for every joint value of those variables in
    row-major order (first variable most significant). ``var_ptr`` and
    ``var_factors`` hold the reverse incidence, the factors of each variable.
    """

    cards: np.ndarray
    factor_ptr: np.ndarray
    factor_vars: np.ndarray
    factor_strides: np.ndarray
    table_ptr: np.ndarray
    log_weights: np.ndarray
    var_ptr: np.ndarray
    var_factors: np.ndarray

    @property
    def n_vars(self):
        return len(self.cards)

    @property
    def n_factors(self):
        return len(self.factor_ptr) - 1

    def factor(self, f):
        lo, hi = self.factor_ptr[f], self.factor_ptr[f + 1]
        return self.factor_vars[lo:hi], self.log_weights[self.table_ptr[f] : self.table_ptr[f + 1]]

    def factors_of(self, v):
        return self.var_factors[self.var_ptr[v] : self.var_ptr[v + 1]]

    @property
    def nbytes(self):
        return sum(
            a.nbytes
            for a in (
                self.cards, self.factor_ptr, self.factor_vars, self.factor_strides,
                self.table_ptr, self.log_weights, self.var_ptr, self.var_factors,
            )
        )

    @classmethod
    def build(cls, n_vars, factors, cards=None):
        """``factors`` is a sequence of ``(variables, log_weights)`` pairs."""
        if n_vars < 0:
            raise ValueError("negative variable count")
        cards = np.full(n_vars, 2, dtype=np.int64) if cards is None else np.asarray(cards, dtype=np.int64)
        if cards.shape != (n_vars,) or np.any(cards < 1):
            raise ValueError("need one domain size >= 1 per variable")
        fptr, fvars, fstrides, tptr, weights = [0], [], [], [0], []
        for f, (scope, table) in enumerate(factors):
            scope = [int(v) for v in scope]
            table = np.asarray(table, dtype=np.float64).ravel()
            if not scope:
                raise ValueError(f"factor {f} connects no variables")
            if min(scope) < 0 or max(scope) >= n_vars:
                raise ValueError(f"factor {f} references a variable outside 0..{n_vars - 1}")
            if len(set(scope)) != len(scope):
                raise ValueError(f"factor {f} repeats a variable")
            shape = cards[scope]
            if len(table) != int(np.prod(shape)):
                raise ValueError(f"factor {f} needs {int(np.prod(shape))} weights, got {len(table)}")
            if not np.all(np.isfinite(table)):
                raise ValueError(f"factor {f} has non-finite weights")
            strides = np.ones(len(scope), dtype=np.int64)
            for k in range(len(scope) - 2, -1, -1):
                strides[k] = strides[k + 1] * shape[k + 1]
            fvars.extend(scope)
            fstrides.extend(strides.tolist())
            weights.append(table)
            fptr.append(len(fvars))
            tptr.append(tptr[-1] + len(table))
        fvars = np.asarray(fvars, dtype=np.int64)
        fptr = np.asarray(fptr, dtype=np.int64)
        owner = np.repeat(np.arange(len(fptr) - 1), np.diff(fptr))
        order = np.argsort(fvars, kind="stable")
        var_ptr = np.zeros(n_vars + 1, dtype=np.int64)
        np.cumsum(np.bincount(fvars, minlength=n_vars), out=var_ptr[1:])
        return cls(
            cards=cards,
            factor_ptr=fptr,
            factor_vars=fvars,
            factor_strides=np.asarray(fstrides, dtype=np.int64),
            table_ptr=np.asarray(tptr, dtype=np.int64),
            log_weights=np.concatenate(weights) if weights else np.zeros(0),
            var_ptr=var_ptr,
            var_factors=owner[order].astype(np.int64),
        )

    def _arrays(self):
        return (
            self.cards, self.factor_ptr, self.factor_vars, self.factor_strides,
            self.table_ptr, self.log_weights, self.var_ptr, self.var_factors,
        )


def ising_chain(n_vars, coupling, biases=None):
    """Binary chain with ``coupling`` added to the log-weight when neighbours agree."""
    pair = np.array([coupling, 0.0, 0.0, coupling])
    factors = [((i, i + 1), pair) for i in range(n_vars - 1)]
    if biases is not None:
        factors += [((i, ), np.array([0.0, float(h)])) for i, h in enumerate(biases)]
    return FactorGraph.build(n_vars, factors)


# -- compiled core --------------------------------------------------------------


@njit(nogil=True, cache=True)
def _conditional(cards, fptr, fvars, fstrides, tptr, lw, vptr, vfac, v, a, out):
    k = cards[v]
    for t in range(k):
        out[t] = 0.0
    for q in range(vptr[v], vptr[v + 1]):
        f = vfac[q]
        base = tptr[f]
        stride_v = 0
        for p in range(fptr[f], fptr[f + 1]):
            u = fvars[p]
            if u == v:
                stride_v = fstrides[p]
            else:
                base += a[u] * fstrides[p]
        for t in range(k):
            out[t] += lw[base + t * stride_v]
    top = out[0]
    for t in range(1, k):
        top = max(top, out[t])
    total = 0.0
    for t in range(k):
        out[t] = np.exp(out[t] - top)
        total += out[t]
    for t in range(k):
        out[t] /= total
    return k


@njit(nogil=True, cache=True)
def _draw(p, k, u):
    acc = 0.0
    for t in range(k - 1):
        acc += p[t]
        if u < acc:
            return t
    return k - 1


@njit(nogil=True, cache=True)
def _sweep_block(cards, fptr, fvars, fstrides, tptr, lw, vptr, vfac, a, lo, hi, sweeps, burn_in, seed, counts, samples, store):
    """Run ``sweeps`` sweeps over variables ``lo..hi-1`` of assignment ``a``."""
    np.random.seed(seed)
    block = np.arange(lo, hi)
    width = 1
    for v in range(cards.shape[0]):
        width = max(width, cards[v])
    p = np.empty(width)
    for s in range(sweeps):
        np.random.shuffle(block)
        for t in range(block.shape[0]):
            v = block[t]
            k = _conditional(cards, fptr, fvars, fstrides, tptr, lw, vptr, vfac, v, a, p)
            a[v] = _draw(p, k, np.random.random())
        if s >= burn_in:
            for v in range(lo, hi):
                counts[v, a[v]] += 1
                if store:
                    samples[s - burn_in, v] = a[v]
    return sweeps * (hi - lo)


# -- single-variable API --------------------------------------------------------------


def _check_assignment(g, a):
    a = np.asarray(a)
    if a.shape != (g.n_vars,):
        raise ValueError(f"assignment has shape {a.shape}, expected ({g.n_vars},)")
    if np.any(a < 0) or np.any(a >= g.cards):
        raise ValueError("assignment value outside its variable's domain")


def conditional(g, v, a):
    """``P(v = k | rest)`` for every value ``k`` of variable ``v``."""
    if not 0 <= v < g.n_vars:
        raise IndexError(f"variable {v} out of range")
    _check_assignment(g, a)
    out = np.empty(int(g.cards[v]))
    _conditional(*g._arrays(), v, np.asarray(a, dtype=np.int64), out)
    return out


def gibbs_step(g, v, a, rng):
    """Resample ``a[v]`` from its conditional in place and return ``a``."""
    p = conditional(g, v, a)
    a[v] = _draw(p, len(p), rng.random())
    return a


# -- chains ---------------------------------------------------------------------------


@dataclass
class ChainResult:
    strategy: ChainStrategy
    counts: np.ndarray  # (chains, V, max card) post burn-in value counts
    samples: list  # per chain (sweeps - burn_in, V) arrays, empty when not stored
    draws: int
    seconds: float

    @property
    def n_chains(self):
        return self.counts.shape[0]

    @property
    def throughput(self):
        """Variable draws per second across all chains."""
        return self.draws / self.seconds if self.seconds > 0 else float("inf")

    def marginals(self):
        pooled = self.counts.sum(axis=0).astype(np.float64)
        return pooled / pooled.sum(axis=1, keepdims=True)


def _blocks(n_vars, n_parts):
    edges = np.linspace(0, n_vars, n_parts + 1).astype(np.int64)
    return list(zip(edges[:-1], edges[1:]))


def run_chains(g, strategy, topology=None, sweeps=1000, burn_in=100, seed=0, store_samples=False, memory_cap=None):
    """Run Gibbs chains with the given replication strategy.

    Returns a :class:`ChainResult`. Each worker sweeps a contiguous block
    of its chain's variables in a freshly shuffled order every sweep; blocks
    of one chain are never synchronised with each other.
    """
    strategy = ChainStrategy(strategy)
    topology = topology or MachineTopology()
    if sweeps <= burn_in:
        raise ValueError("sweeps must exceed burn_in")
    if burn_in < 0:
        raise ValueError("burn_in must be non-negative")
    n_chains = topology.n_nodes if strategy is ChainStrategy.PER_NODE else 1
    cap = config.get_memory_cap() if memory_cap is None else memory_cap
    kept = sweeps - burn_in
    per_chain = g.nbytes + 8 * g.n_vars + (kept * g.n_vars if store_samples else 0)
    if n_chains * per_chain > cap:
        raise MemoryCapError(f"{n_chains} chains need {n_chains * per_chain} bytes, cap is {cap}")

    width = int(g.cards.max(initial=1))
    states, counts, samples = [], np.zeros((n_chains, g.n_vars, width), dtype=np.int64), []
    for c in range(n_chains):
        rng = np.random.default_rng([int(seed), STREAM_INIT, c])
        states.append((rng.random(g.n_vars) * g.cards).astype(np.int64))
        samples.append(np.zeros((kept if store_samples else 0, g.n_vars), dtype=np.int8 if width <= 127 else np.int64))

    jobs = []
    for w in range(topology.n_workers):
        if strategy is ChainStrategy.PER_NODE:
            chain, slot, parts = topology.node_of(w), w % topology.cores_per_node, topology.cores_per_node
        else:
            chain, slot, parts = 0, w, topology.n_workers
        lo, hi = _blocks(g.n_vars, parts)[slot]
        wseed = int(np.random.default_rng([int(seed), STREAM_CHAIN, chain, slot]).integers(2**31 - 1))
        jobs.append((chain, lo, hi, wseed))

    arrays = g._arrays()
    scratch = np.zeros(g.n_vars, dtype=np.int64)
    _sweep_block(*arrays, scratch, 0, min(1, g.n_vars), 1, 0, 0, counts[0] * 0, samples[0][:0].reshape(0, g.n_vars), False)

    def work(w):
        chain, lo, hi, wseed = jobs[w]
        t0 = time.perf_counter()
        n = _sweep_block(
            *arrays, states[chain], lo, hi, sweeps, burn_in, wseed, counts[chain], samples[chain], store_samples
        )
        return t0, time.perf_counter(), n

    spans = run_workers(topology, work)
    seconds = max(e for _, e, _ in spans) - min(s for s, _, _ in spans)
    return ChainResult(
        strategy=strategy,
        counts=counts,
        samples=samples if store_samples else [],
        draws=int(sum(n for _, _, n in spans)),
        seconds=seconds,
    )


def marginals(samples, cards=None):
    """Per-variable empirical distributions from pooled samples.

    ``samples`` is a ``(n, V)`` array or a list of them (one per chain).
    Returns a ``(V, max card)`` array of frequencies.
    """
    if isinstance(samples, (list, tuple)):
        parts = [np.asarray(s) for s in samples if len(s)]
        samples = np.concatenate(parts) if parts else np.zeros((0, 0))
    samples = np.asarray(samples, dtype=np.int64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("need at least one sample")
    width = int(samples.max()) + 1 if cards is None else int(np.max(cards))
    out = np.zeros((samples.shape[1], width))
    for v in range(samples.shape[1]):
        out[v] = np.bincount(samples[:, v], minlength=width)[:width]
    return out / samples.shape[0]


def exact_marginals(g):
    """Marginals by enumerating every joint assignment (test oracle)."""
    n_states = math.prod(int(c) for c in g.cards)
    if n_states > MAX_EXACT_STATES:
        raise ValueError(f"{n_states} joint states exceed the enumeration limit of {MAX_EXACT_STATES}")
    width = int(g.cards.max(initial=1))
    if g.n_vars == 0:
        return np.zeros((0, width))
    states = np.array(list(itertools.product(*[range(int(c)) for c in g.cards])), dtype=np.int64)
    logp = np.zeros(len(states))
    for f in range(g.n_factors):
        lo, hi = g.factor_ptr[f], g.factor_ptr[f + 1]
        idx = states[:, g.factor_vars[lo:hi]] @ g.factor_strides[lo:hi]
        logp += g.log_weights[g.table_ptr[f] + idx]
    p = np.exp(logp - logp.max())
    p /= p.sum()
    out = np.zeros((g.n_vars, width))
    for v in range(g.n_vars):
        out[v, : g.cards[v]] = np.bincount(states[:, v], weights=p, minlength=int(g.cards[v]))
    return out


# -- text format ------------------------------------------------------------------------


def load_factor_graph(path):
    """Parse the ``V F`` header format.

    After the header come optional ``domain <var> <size>`` lines, then one
    line per factor: ``[factor] arity v1 .. vk table_size w1 .. wn``. Blank
    lines and ``#`` comments are ignored.
    """
    path = Path(path)
    records = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            records.append((lineno, line.split()))
    if not records:
        raise FormatError("empty factor graph file", path=path)
    lineno, head = records[0]
    try:
        n_vars, n_factors = (int(t) for t in head)
    except ValueError:
        raise FormatError("header must be 'V F'", line=lineno, path=path) from None
    if n_vars < 0 or n_factors < 0:
        raise FormatError("negative counts in header", line=lineno, path=path)
    cards = np.full(n_vars, 2, dtype=np.int64)
    factors = []
    for lineno, tok in records[1:]:
        try:
            if tok[0] == "domain":
                if len(tok) != 3:
                    raise ValueError("expected 'domain <var> <size>'")
                v, k = int(tok[1]), int(tok[2])
                if not 0 <= v < n_vars or k < 1:
                    raise ValueError(f"bad domain declaration for variable {v}")
                if factors:
                    raise ValueError("domain lines must precede factors")
                cards[v] = k
                continue
            if tok[0] == "factor":
                tok = tok[1:]
            arity = int(tok[0])
            if arity < 1:
                raise ValueError("factor arity must be at least 1")
            scope = [int(t) for t in tok[1 : 1 + arity]]
            size = int(tok[1 + arity])
            weights = [float(t) for t in tok[2 + arity :]]
            if len(scope) != arity or len(weights) != size:
                raise ValueError(f"expected {arity} variables and {size} weights")
            if min(scope) < 0 or max(scope) >= n_vars:
                raise ValueError("variable id out of range")
            if size != int(np.prod(cards[scope])):
                raise ValueError(f"table size {size} does not match the variables' domains")
        except (ValueError, IndexError) as exc:
            raise FormatError(f"malformed factor: {exc}", line=lineno, path=path) from None
        factors.append((scope, weights))
    if len(factors) != n_factors:
        raise FormatError(f"header declares {n_factors} factors, found {len(factors)}", path=path)
    try:
        return FactorGraph.build(n_vars, factors, cards)
    except ValueError as exc:
        raise FormatError(str(exc), path=path) from None


def save_factor_graph(g, path):
    lines = [f"{g.n_vars} {g.n_factors}"]
    lines += [f"domain {v} {int(k)}" for v, k in enumerate(g.cards) if k != 2]
    for f in range(g.n_factors):
        scope, table = g.factor(f)
        lines.append(
            " ".join(["factor", str(len(scope)), *map(str, scope), str(len(table)), *(repr(float(w)) for w in table)])
        )
    Path(path).write_text("\n".join(lines) + "\n")
