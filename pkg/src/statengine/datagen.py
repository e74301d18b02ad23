"""Seeded synthetic instances.

Recipes
-------
diag-ls N
    ``A = I_N`` with random targets; the least-squares optimum is 0.
gaussian N d density
    Sparse Gaussian ``A`` with ``b = A x* + 0.1 noise``.
ising-chain V coupling
    Binary chain factor graph with random unary biases.
two-cluster-skew N d
    Two feature-disjoint clusters (80/20) with labels from a hidden
    hyperplane and 10% label noise. Rows are stored cluster by cluster.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .gibbs import ising_chain
from .storage import DataMatrix, Layout

STREAM_GEN = 0x6E7

RECIPES = {
    "diag-ls": ("N",),
    "gaussian": ("N", "d", "density"),
    "ising-chain": ("V", "coupling"),
    "two-cluster-skew": ("N", "d"),
}


def _rng(seed, recipe):
    return np.random.default_rng([int(seed), STREAM_GEN, sum(map(ord, recipe))])


def diag_ls(n, seed=0):
    if n < 1:
        raise ValueError("N must be at least 1")
    b = _rng(seed, "diag-ls").uniform(-1.0, 1.0, n)
    b[b == 0] = 1.0
    return DataMatrix.from_scipy(sp.identity(n, format="csr"), labels=b, layout=Layout.ROW)


def gaussian(n, d, density, seed=0, noise=0.1):
    """Entries are non-zero with probability ``density``; every column gets at least one."""
    if n < 1 or d < 1:
        raise ValueError("N and d must be at least 1")
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    rng = _rng(seed, "gaussian")
    mask = rng.random((n, d)) < density
    empty = np.flatnonzero(~mask.any(axis=0))
    mask[rng.integers(0, n, len(empty)), empty] = True
    values = np.where(mask, rng.standard_normal((n, d)), 0.0)
    x_star = rng.standard_normal(d)
    b = values @ x_star + noise * rng.standard_normal(n)
    return DataMatrix.from_scipy(sp.csr_matrix(values), labels=b, layout=Layout.ROW)


def ising(n_vars, coupling, seed=0):
    if n_vars < 1:
        raise ValueError("V must be at least 1")
    biases = _rng(seed, "ising-chain").normal(0.0, 0.5, n_vars)
    return ising_chain(n_vars, coupling, biases)


def two_cluster_skew(n, d, seed=0, major=0.8, flip=0.1):
    """Cluster 0 (first ``major`` of the rows) uses features ``0..d/2-1``, cluster 1 the rest."""
    if n < 2 or d < 2:
        raise ValueError("need N >= 2 and d >= 2")
    rng = _rng(seed, "two-cluster-skew")
    n0 = int(round(major * n))
    half = d // 2
    values = np.zeros((n, d))
    values[:n0, :half] = rng.standard_normal((n0, half)) + 1.0
    values[n0:, half:] = rng.standard_normal((n - n0, d - half)) - 1.0
    w = rng.standard_normal(d)
    margins = values @ w
    labels = np.where(margins >= 0, 1.0, -1.0)
    flips = rng.random(n) < flip
    labels[flips] *= -1.0
    return DataMatrix.from_scipy(sp.csr_matrix(values), labels=labels, layout=Layout.ROW)


def generate(recipe, params, seed=0):
    """Build a recipe from positional string or numeric parameters."""
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; choose from {', '.join(RECIPES)}")
    names = RECIPES[recipe]
    if len(params) != len(names):
        raise ValueError(f"{recipe} takes {len(names)} parameters ({' '.join(names)}), got {len(params)}")
    try:
        if recipe == "diag-ls":
            return diag_ls(int(params[0]), seed)
        if recipe == "gaussian":
            return gaussian(int(params[0]), int(params[1]), float(params[2]), seed)
        if recipe == "ising-chain":
            return ising(int(params[0]), float(params[1]), seed)
        return two_cluster_skew(int(params[0]), int(params[1]), seed)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"invalid {recipe} parameters: {exc}") from None
