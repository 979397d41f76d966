"""Sparse node features, TFIDF re-weighting and the base kernel.

The base kernel is evaluated on raw inner products, and the raw/transform
split is deliberate: everything upstream caches raw dot products once and
re-applies the (cheap) transform whenever the hyperparameters move.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InputError

KERNEL_FAMILIES = ("linear", "polynomial")


@dataclass(frozen=True)
class KernelSpec:
    """Base kernel family plus hyperparameters.

    linear:      k(x, z) = variance * <x, z>
    polynomial:  k(x, z) = (variance * <x, z> + offset)^degree, degree fixed at 3
    """

    family: str
    variance: float = 1.0
    offset: float = 0.0
    degree: int = 3

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise InputError(f"unknown kernel family {self.family!r}, expected one of {KERNEL_FAMILIES}")
        if not self.variance > 0:
            raise InputError(f"kernel variance must be positive, got {self.variance}")
        if self.offset < 0:
            raise InputError(f"kernel offset must be non-negative, got {self.offset}")
        if self.family == "polynomial" and self.degree != 3:
            raise InputError(f"polynomial degree is fixed at 3, got {self.degree}")


class FeatureMatrix:
    """Immutable sparse node-by-feature matrix of finite real weights."""

    def __init__(self, matrix, n_features=None):
        m = sp.csr_matrix(matrix, dtype=np.float64, copy=True)
        if n_features is not None:
            if n_features < m.shape[1]:
                raise InputError(f"n_features={n_features} smaller than stored column count {m.shape[1]}")
            m.resize((m.shape[0], int(n_features)))
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        if m.nnz and not np.all(np.isfinite(m.data)):
            raise InputError("feature values must be finite")
        self.matrix = m

    @property
    def n_nodes(self):
        return self.matrix.shape[0]

    @property
    def n_features(self):
        return self.matrix.shape[1]

    def rows_dense(self, idx):
        """Dense ``(len(idx), n_features)`` block of the requested rows."""
        return np.asarray(self.matrix[np.asarray(idx, dtype=np.int64)].todense())

    def row(self, n):
        """Single row as a 1 x n_features sparse matrix."""
        return self.matrix.getrow(n)

    def __eq__(self, other):
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        a, b = self.matrix, other.matrix
        return (
            a.shape == b.shape
            and np.array_equal(a.indptr, b.indptr)
            and np.array_equal(a.indices, b.indices)
            and np.array_equal(a.data, b.data)
        )

    def __repr__(self):
        return f"FeatureMatrix({self.n_nodes}x{self.n_features}, nnz={self.matrix.nnz})"


def from_triples(n_nodes, entries, n_features=None):
    """Build a :class:`FeatureMatrix` from ``(node, feature, value)`` triples.

    Repeated (node, feature) pairs are rejected rather than summed; the
    ingestion formats have no defined semantics for them.
    """
    entries = list(entries)
    if entries:
        nodes = np.asarray([e[0] for e in entries], dtype=np.int64)
        feats = np.asarray([e[1] for e in entries], dtype=np.int64)
        vals = np.asarray([e[2] for e in entries], dtype=np.float64)
    else:
        nodes = feats = np.empty(0, dtype=np.int64)
        vals = np.empty(0, dtype=np.float64)
    if nodes.size:
        if nodes.min() < 0 or nodes.max() >= n_nodes:
            raise InputError(f"node index out of range [0, {n_nodes}) in feature triples")
        if feats.min() < 0:
            raise InputError("negative feature index in feature triples")
        key = nodes * (feats.max() + 1) + feats
        if np.unique(key).size != key.size:
            raise InputError("duplicate (node, feature) pair in feature triples")
    if n_features is None:
        n_features = int(feats.max()) + 1 if feats.size else 0
    elif feats.size and feats.max() >= n_features:
        raise InputError(f"feature index {feats.max()} out of range [0, {n_features})")
    m = sp.csr_matrix((vals, (nodes, feats)), shape=(n_nodes, int(n_features)))
    return FeatureMatrix(m)


def read_feature_file(path, n_nodes, n_features=None):
    """Read ``node<TAB>feature<TAB>value`` triples from a UTF-8 text file."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise InputError(f"{path}:{lineno}: expected 'node<TAB>feature<TAB>value', got {line!r}")
            try:
                entries.append((int(parts[0]), int(parts[1]), float(parts[2])))
            except ValueError:
                raise InputError(f"{path}:{lineno}: malformed triple {line!r}") from None
    return from_triples(n_nodes, entries, n_features=n_features)


def tfidf_transform(x, normalize=True):
    """Re-weight term counts by smoothed inverse document frequency.

    ``out[n,t] = tf(n,t) * idf(t)`` with ``idf(t) = ln((1+N)/(1+df(t))) + 1``
    and ``df(t)`` the number of nodes with a nonzero value for ``t``; each
    row is then L2-normalised (all-zero rows stay zero). The exact formula
    is part of the contract; do not swap in a library implementation with
    different smoothing.
    """
    m = x.matrix
    if m.nnz and m.data.min() < 0:
        raise InputError("tfidf requires non-negative term counts")
    df = m.getnnz(axis=0).astype(np.float64)
    idf = np.log((1.0 + x.n_nodes) / (1.0 + df)) + 1.0
    out = m.multiply(idf[np.newaxis, :]).tocsr()
    if normalize:
        norms = np.sqrt(np.asarray(out.multiply(out).sum(axis=1)).ravel())
        scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        out = sp.diags(scale, format="csr") @ out
    return FeatureMatrix(out, n_features=x.n_features)


def kernel_transform(raw, variance, offset, family):
    """Map raw inner products to kernel values.

    Works elementwise on numpy or jax arrays, so the same definition
    serves both the cached-evaluation paths and the differentiable
    training objective.
    """
    if family == "linear":
        return variance * raw
    return (variance * raw + offset) ** 3


def base_kernel(x, z, spec):
    """Kernel value for a single pair of feature vectors.

    Accepts dense 1-D arrays or 1 x D scipy sparse rows in either slot.
    """
    xd = _as_dense_vector(x)
    zd = _as_dense_vector(z)
    if xd.shape != zd.shape:
        raise InputError(f"dimension mismatch: {xd.shape} vs {zd.shape}")
    return float(kernel_transform(xd @ zd, spec.variance, spec.offset, spec.family))


def kernel_matrix(a, b, spec):
    """Dense kernel block between the rows of ``a`` and ``b``.

    Either argument may be dense or scipy sparse; the result is dense.
    """
    if a.shape[-1] != b.shape[-1]:
        raise InputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    raw = a @ b.T
    if sp.issparse(raw):
        raw = np.asarray(raw.todense())
    return kernel_transform(np.asarray(raw, dtype=np.float64), spec.variance, spec.offset, spec.family)


def _as_dense_vector(v):
    if sp.issparse(v):
        return np.asarray(v.todense()).ravel()
    return np.asarray(v, dtype=np.float64).ravel()
