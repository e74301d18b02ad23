"""Immutable data-matrix storage, loaders and layout conversion.

A :class:`DataMatrix` holds the read-only example matrix ``A`` (N rows,
d columns) together with optional per-row labels ``b``. It is stored either
densely or as compressed sparse rows/columns, in row-major or column-major
order. All arrays are flagged read-only after construction; solvers only
ever mutate model replicas.
"""

from __future__ import annotations

import enum
import struct
import sys
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import config
from .errors import FormatError, MemoryCapError


class Layout(str, enum.Enum):
    ROW = "row"
    COL = "col"


class Format(str, enum.Enum):
    DENSE = "dense"
    SPARSE = "sparse"


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


def _check_compressed(indptr, indices, n_outer, n_inner, what):
    if indptr.shape != (n_outer + 1,) or indptr[0] != 0 or indptr[-1] != len(indices):
        raise ValueError(f"malformed {what} index pointer")
    if np.any(np.diff(indptr) < 0):
        raise ValueError(f"{what} index pointer is not monotone")
    if len(indices):
        if indices.min() < 0 or indices.max() >= n_inner:
            raise ValueError(f"{what} index out of range")
        segment = np.repeat(np.arange(n_outer), np.diff(indptr))
        same = segment[1:] == segment[:-1]
        if np.any(same & (np.diff(indices) <= 0)):
            raise ValueError(f"{what} indices must be strictly increasing within each segment")


@dataclass(frozen=True, eq=False)
class DataMatrix:
    """Read-only example matrix with optional labels.

    For ``Format.DENSE`` the values live in ``dense`` (C order for row-major,
    Fortran order for column-major). For ``Format.SPARSE`` they live in
    ``indptr``/``indices``/``data``: CSR when the layout is row-major, CSC
    when it is column-major. Explicit zeros are never stored.
    """

    n_rows: int
    n_cols: int
    layout: Layout
    format: Format
    row_nnz: np.ndarray
    labels: np.ndarray | None = None
    dense: np.ndarray | None = None
    indptr: np.ndarray | None = None
    indices: np.ndarray | None = None
    data: np.ndarray | None = None

    # -- constructors -----------------------------------------------------

    @classmethod
    def from_dense(cls, values, labels=None, layout=Layout.ROW):
        values = np.array(values, dtype=np.float64, ndmin=2)
        if values.ndim != 2:
            raise ValueError("dense values must be two dimensional")
        layout = Layout(layout)
        order = "C" if layout is Layout.ROW else "F"
        dense = np.array(values, dtype=np.float64, order=order)
        dense.flags.writeable = False
        row_nnz = _frozen(np.count_nonzero(dense, axis=1).astype(np.int64), np.int64)
        return cls(
            n_rows=dense.shape[0],
            n_cols=dense.shape[1],
            layout=layout,
            format=Format.DENSE,
            row_nnz=row_nnz,
            labels=_labels(labels, dense.shape[0]),
            dense=dense,
        )

    @classmethod
    def from_scipy(cls, matrix, labels=None, layout=Layout.ROW):
        layout = Layout(layout)
        m = sp.csr_matrix(matrix, dtype=np.float64) if layout is Layout.ROW else sp.csc_matrix(matrix, dtype=np.float64)
        m = m.copy()
        m.eliminate_zeros()
        m.sum_duplicates()
        m.sort_indices()
        n_rows, n_cols = m.shape
        if layout is Layout.ROW:
            row_nnz = np.diff(m.indptr)
        else:
            row_nnz = np.bincount(m.indices, minlength=n_rows)
        return cls(
            n_rows=n_rows,
            n_cols=n_cols,
            layout=layout,
            format=Format.SPARSE,
            row_nnz=_frozen(row_nnz.astype(np.int64), np.int64),
            labels=_labels(labels, n_rows),
            indptr=_frozen(m.indptr.astype(np.int64), np.int64),
            indices=_frozen(m.indices.astype(np.int64), np.int64),
            data=_frozen(m.data, np.float64),
        )

    @classmethod
    def from_csr(cls, indptr, indices, data, shape, labels=None):
        """Build a row-major sparse matrix from raw CSR arrays (validated)."""
        indptr = np.asarray(indptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        data = np.asarray(data, dtype=np.float64)
        n_rows, n_cols = shape
        _check_compressed(indptr, indices, n_rows, n_cols, "row")
        if len(data) != len(indices):
            raise ValueError("data and indices differ in length")
        m = sp.csr_matrix((data, indices, indptr), shape=shape)
        return cls.from_scipy(m, labels=labels, layout=Layout.ROW)

    def __post_init__(self):
        if self.format is Format.SPARSE:
            n_outer, n_inner = (self.n_rows, self.n_cols) if self.layout is Layout.ROW else (self.n_cols, self.n_rows)
            _check_compressed(self.indptr, self.indices, n_outer, n_inner, self.layout.value)
            if np.any(self.data == 0):
                raise ValueError("explicit zeros are not allowed in sparse storage")
        if int(self.row_nnz.sum()) != self.nnz:
            raise ValueError("row_nnz does not sum to the stored non-zero count")

    # -- views --------------------------------------------------------------

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @cached_property
    def nnz(self):
        if self.format is Format.DENSE:
            return int(np.count_nonzero(self.dense))
        return len(self.indices)

    @cached_property
    def csr(self) -> sp.csr_matrix:
        """Canonical scipy CSR view, used for loss evaluation."""
        if self.format is Format.DENSE:
            return sp.csr_matrix(self.dense)
        if self.layout is Layout.ROW:
            return sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)
        return sp.csc_matrix((self.data, self.indices, self.indptr), shape=self.shape).tocsr()

    @cached_property
    def csc(self) -> sp.csc_matrix:
        if self.format is Format.SPARSE and self.layout is Layout.COL:
            return sp.csc_matrix((self.data, self.indices, self.indptr), shape=self.shape)
        return self.csr.tocsc()

    def toarray(self):
        if self.format is Format.DENSE:
            return np.array(self.dense)
        return self.csr.toarray()

    def row(self, i):
        """Return ``(column ids, values)`` of the non-zeros in row ``i``."""
        c = self.csr
        lo, hi = c.indptr[i], c.indptr[i + 1]
        return c.indices[lo:hi], c.data[lo:hi]

    def column(self, j):
        c = self.csc
        lo, hi = c.indptr[j], c.indptr[j + 1]
        return c.indices[lo:hi], c.data[lo:hi]

    def get(self, i, j):
        if self.format is Format.DENSE:
            return float(self.dense[i, j])
        if self.layout is Layout.ROW:
            lo, hi = self.indptr[i], self.indptr[i + 1]
            seg, target = self.indices[lo:hi], j
        else:
            lo, hi = self.indptr[j], self.indptr[j + 1]
            seg, target = self.indices[lo:hi], i
        k = np.searchsorted(seg, target)
        if k < len(seg) and seg[k] == target:
            return float(self.data[lo + k])
        return 0.0

    def equals(self, other):
        """Same representation and bit-identical values and labels."""
        if not isinstance(other, DataMatrix):
            return False
        if (self.shape, self.layout, self.format) != (other.shape, other.layout, other.format):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        if self.labels is not None and not np.array_equal(self.labels, other.labels):
            return False
        if self.format is Format.DENSE:
            return np.array_equal(self.dense, other.dense)
        return (
            np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.data, other.data)
        )

    def with_labels(self, labels):
        return DataMatrix(
            n_rows=self.n_rows,
            n_cols=self.n_cols,
            layout=self.layout,
            format=self.format,
            row_nnz=self.row_nnz,
            labels=_labels(labels, self.n_rows),
            dense=self.dense,
            indptr=self.indptr,
            indices=self.indices,
            data=self.data,
        )


def _labels(labels, n):
    if labels is None:
        return None
    labels = np.array(labels, dtype=np.float64).reshape(-1)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape[0]}")
    labels.flags.writeable = False
    return labels


@dataclass(frozen=True)
class CtrIndex:
    """Per-column sets ``S(j) = {i : a_ij != 0}``, sorted ascending."""

    n_rows: int
    indptr: np.ndarray
    rows: np.ndarray

    @property
    def n_cols(self):
        return len(self.indptr) - 1

    def __getitem__(self, j):
        return self.rows[self.indptr[j] : self.indptr[j + 1]]

    def __len__(self):
        return self.n_cols

    @property
    def size(self):
        return len(self.rows)


@dataclass(frozen=True)
class MatrixStats:
    N: int
    d: int
    nnz: int
    sum_ni: int
    sum_ni_sq: int
    density: float


# -- operations -------------------------------------------------------------


def to_layout(m, layout, format, memory_cap=None):
    """Return ``m`` stored in the requested layout and format.

    Conversions only move values, so a round trip reproduces every entry
    bit for bit. Dense targets are refused above ``memory_cap`` bytes.
    """
    layout, format = Layout(layout), Format(format)
    if layout is m.layout and format is m.format:
        return m
    if format is Format.DENSE:
        cap = config.get_memory_cap() if memory_cap is None else memory_cap
        need = m.n_rows * m.n_cols * 8
        if need > cap:
            raise MemoryCapError(f"dense {m.n_rows}x{m.n_cols} needs {need} bytes, cap is {cap}")
        return DataMatrix.from_dense(m.toarray(), labels=m.labels, layout=layout)
    source = m.csr if layout is Layout.ROW else m.csc
    return DataMatrix.from_scipy(source, labels=m.labels, layout=layout)


def build_ctr_index(m):
    c = m.csc
    return CtrIndex(
        n_rows=m.n_rows,
        indptr=_frozen(c.indptr.astype(np.int64), np.int64),
        rows=_frozen(c.indices.astype(np.int64), np.int64),
    )


def subsample_rows(m, keep_fraction, seed):
    """Keep each stored non-zero independently with probability ``keep_fraction``."""
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if m.format is not Format.SPARSE:
        raise ValueError("subsample_rows expects a sparse matrix")
    if keep_fraction == 1.0:
        return m
    c = m.csr
    rng = np.random.default_rng([seed, 0x5AB])
    keep = rng.random(c.nnz) < keep_fraction
    row_of = np.repeat(np.arange(m.n_rows), np.diff(c.indptr))
    indptr = np.zeros(m.n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(row_of[keep], minlength=m.n_rows), out=indptr[1:])
    out = sp.csr_matrix((c.data[keep], c.indices[keep], indptr), shape=m.shape)
    return DataMatrix.from_scipy(out, labels=m.labels, layout=m.layout)


def stats(m):
    n_i = m.row_nnz.astype(np.int64)
    sum_ni = int(n_i.sum())
    sum_ni_sq = int(np.dot(n_i, n_i))
    cells = m.n_rows * m.n_cols
    return MatrixStats(
        N=m.n_rows,
        d=m.n_cols,
        nnz=m.nnz,
        sum_ni=sum_ni,
        sum_ni_sq=sum_ni_sq,
        density=m.nnz / cells if cells else 0.0,
    )


# -- svmlight ---------------------------------------------------------------


def load_svmlight(path):
    """Parse a svmlight/libsvm text file into a sparse row-major matrix.

    Indices are 1-based and must be strictly ascending within a line. Trailing
    ``# comments`` are ignored; blank lines are rejected.
    """
    path = Path(path)
    text = path.read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError("empty file", path=path)
    labels, indptr, indices, data = [], [0], [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            raise FormatError("empty record", line=lineno, path=path)
        tokens = line.split()
        try:
            labels.append(float(tokens[0]))
        except ValueError:
            raise FormatError(f"bad label {tokens[0]!r}", line=lineno, path=path) from None
        prev = 0
        for tok in tokens[1:]:
            key, sep, val = tok.partition(":")
            if not sep:
                raise FormatError(f"expected idx:value, got {tok!r}", line=lineno, path=path)
            if key == "qid":
                continue
            try:
                idx, value = int(key), float(val)
            except ValueError:
                raise FormatError(f"bad feature {tok!r}", line=lineno, path=path) from None
            if idx < 1:
                raise FormatError(f"index {idx} is not 1-based", line=lineno, path=path)
            if idx <= prev:
                raise FormatError("indices must be strictly ascending", line=lineno, path=path)
            prev = idx
            indices.append(idx - 1)
            data.append(value)
        indptr.append(len(indices))
    d = max(indices) + 1 if indices else 0
    m = sp.csr_matrix(
        (np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int64), np.asarray(indptr, dtype=np.int64)),
        shape=(len(labels), d),
    )
    return DataMatrix.from_scipy(m, labels=labels, layout=Layout.ROW)


def _fmt(v):
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


def save_svmlight(m, path):
    c = m.csr
    labels = m.labels if m.labels is not None else np.zeros(m.n_rows)
    out = []
    for i in range(m.n_rows):
        lo, hi = c.indptr[i], c.indptr[i + 1]
        feats = " ".join(f"{j + 1}:{_fmt(v)}" for j, v in zip(c.indices[lo:hi], c.data[lo:hi]))
        out.append(f"{_fmt(labels[i])} {feats}".rstrip() + "\n")
    Path(path).write_text("".join(out))


# -- binary cache -----------------------------------------------------------

MAGIC = b"DWMX"
VERSION = 1
_HEADER = struct.Struct("<4sBcBBQQQB")  # magic, version, endian, layout, format, N, d, NNZ, has_labels


def save_binary(m, path):
    """Write ``m`` as CSR plus labels behind a fixed header.

    The header records the original layout/format so :func:`load_binary`
    hands back the same representation.
    """
    c = m.csr
    endian = b"<" if sys.byteorder == "little" else b">"
    header = struct.pack(
        endian.decode() + _HEADER.format[1:],
        MAGIC,
        VERSION,
        endian,
        0 if m.layout is Layout.ROW else 1,
        0 if m.format is Format.DENSE else 1,
        m.n_rows,
        m.n_cols,
        c.nnz,
        0 if m.labels is None else 1,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(c.indptr.astype(np.int64).tobytes())
        fh.write(c.indices.astype(np.int64).tobytes())
        fh.write(c.data.astype(np.float64).tobytes())
        if m.labels is not None:
            fh.write(m.labels.astype(np.float64).tobytes())


def load_binary(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise FormatError("not a DWMX file", path=path)
    endian = raw[5:6]
    if endian not in (b"<", b">"):
        raise FormatError("bad endianness tag", path=path)
    magic, version, _, layout, fmt, n, d, nnz, has_labels = struct.unpack(
        endian.decode() + _HEADER.format[1:], raw[: _HEADER.size]
    )
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", path=path)
    dt_i, dt_f = np.dtype(endian.decode() + "i8"), np.dtype(endian.decode() + "f8")
    off = _HEADER.size
    need = off + 8 * ((n + 1) + nnz + nnz + (n if has_labels else 0))
    if len(raw) != need:
        raise FormatError(f"truncated or oversized payload ({len(raw)} != {need} bytes)", path=path)
    indptr = np.frombuffer(raw, dt_i, n + 1, off).astype(np.int64)
    off += 8 * (n + 1)
    indices = np.frombuffer(raw, dt_i, nnz, off).astype(np.int64)
    off += 8 * nnz
    data = np.frombuffer(raw, dt_f, nnz, off).astype(np.float64)
    off += 8 * nnz
    labels = np.frombuffer(raw, dt_f, n, off).astype(np.float64) if has_labels else None
    try:
        m = DataMatrix.from_csr(indptr, indices, data, (n, d), labels=labels)
    except ValueError as exc:
        raise FormatError(str(exc), path=path) from None
    return to_layout(m, Layout.ROW if layout == 0 else Layout.COL, Format.DENSE if fmt == 0 else Format.SPARSE)


# -- graphs -----------------------------------------------------------------


def load_edge_list(path):
    """Read a ``src<TAB>dst`` edge list with 0-based vertex ids.

    Returns an ``(E, 2)`` int64 array. Lines beginning with ``#`` are skipped.
    """
    edges = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise FormatError("expected 'src<TAB>dst'", line=lineno, path=path)
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"non-integer vertex id in {raw!r}", line=lineno, path=path) from None
        if u < 0 or v < 0:
            raise FormatError("vertex ids must be non-negative", line=lineno, path=path)
        edges.append((u, v))
    if not edges:
        raise FormatError("no edges", path=path)
    return np.asarray(edges, dtype=np.int64)


def save_edge_list(edges, path):
    Path(path).write_text("".join(f"{u}\t{v}\n" for u, v in np.asarray(edges)))


def incidence_matrix(edges, n_vertices=None, weights=None):
    """Edge-vertex incidence matrix: row ``e`` has ``+w`` at ``u`` and ``-w`` at ``v``.

    With this encoding ``<a_e, x> = w (x_u - x_v)``. Self loops and duplicate
    undirected edges are dropped; ``weights`` are square-rooted so that the
    squared row products carry the edge weight.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if n_vertices is None:
        n_vertices = int(edges.max()) + 1 if len(edges) else 0
    w = np.ones(len(edges)) if weights is None else np.sqrt(np.asarray(weights, dtype=np.float64))
    lo, hi = np.minimum(edges[:, 0], edges[:, 1]), np.maximum(edges[:, 0], edges[:, 1])
    keep = lo != hi
    key = lo * n_vertices + hi
    _, first = np.unique(np.where(keep, key, -1), return_index=True)
    sel = np.zeros(len(edges), dtype=bool)
    sel[first] = True
    sel &= keep
    u, v, w = edges[sel, 0], edges[sel, 1], w[sel]
    order = np.argsort(lo[sel] * n_vertices + hi[sel], kind="stable")
    u, v, w = u[order], v[order], w[order]
    E = len(u)
    rows = np.repeat(np.arange(E), 2)
    cols = np.column_stack([u, v]).ravel()
    vals = np.column_stack([w, -w]).ravel()
    m = sp.csr_matrix((vals, (rows, cols)), shape=(E, n_vertices))
    return DataMatrix.from_scipy(m, labels=np.zeros(E), layout=Layout.ROW)
