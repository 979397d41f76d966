"""Sparse undirected graphs and the two operators the model is built on.

Graphs are binary, undirected and free of self-loops. Adjacency is kept
as sorted neighbour lists in CSR layout (``indptr``/``indices``), never
densified: everything downstream relies on sparsity for its cost bounds.
"""

import hashlib

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .errors import InputError


class SparseGraph:
    """Immutable undirected graph stored as sorted neighbour lists.

    Use :func:`from_edge_list` to construct one; the constructor trusts
    its arguments (already symmetric, sorted, deduplicated, loop-free).
    """

    def __init__(self, n_nodes, indptr, indices):
        self.n_nodes = int(n_nodes)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.degrees = np.diff(self.indptr)
        self._adjacency = None

    @property
    def n_edges(self):
        """Number of undirected edges."""
        return self.indices.size // 2

    def neighbors(self, u):
        """Sorted neighbour indices of node ``u`` (a view, do not mutate)."""
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def closed_neighborhood(self, u):
        """Sorted array containing ``u`` and its neighbours."""
        nbrs = self.neighbors(u)
        pos = np.searchsorted(nbrs, u)
        return np.insert(nbrs, pos, u)

    def adjacency(self):
        """Adjacency matrix as a scipy CSR matrix (cached)."""
        if self._adjacency is None:
            data = np.ones(self.indices.size, dtype=np.float64)
            self._adjacency = sp.csr_matrix(
                (data, self.indices, self.indptr), shape=(self.n_nodes, self.n_nodes)
            )
        return self._adjacency

    def laplacian(self):
        """Graph Laplacian ``D - A`` as a scipy CSR matrix."""
        a = self.adjacency()
        return sp.diags(self.degrees.astype(np.float64), format="csr") - a

    def averaging_matrix(self):
        """Closed-neighbourhood averaging operator ``(I+D)^-1 (I+A)``, CSR."""
        a = self.adjacency()
        inv = 1.0 / (1.0 + self.degrees.astype(np.float64))
        return sp.diags(inv, format="csr") @ (sp.eye(self.n_nodes, format="csr") + a)

    def content_hash(self):
        """Hex digest identifying the graph structure."""
        h = hashlib.sha256()
        h.update(np.int64(self.n_nodes).tobytes())
        h.update(self.indptr.tobytes())
        h.update(self.indices.tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, SparseGraph):
            return NotImplemented
        return (
            self.n_nodes == other.n_nodes
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    def __repr__(self):
        return f"SparseGraph(n_nodes={self.n_nodes}, n_edges={self.n_edges})"


def from_edge_list(n_nodes, edges):
    """Build a :class:`SparseGraph` from undirected edge pairs.

    Pairs may appear in either orientation and multiple times; duplicates
    are merged and self-loops dropped. Indices outside ``[0, n_nodes)``
    raise :class:`InputError` naming the offending pair.
    """
    n_nodes = int(n_nodes)
    if n_nodes < 0:
        raise InputError(f"n_nodes must be non-negative, got {n_nodes}")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        bad = np.flatnonzero((edges < 0).any(axis=1) | (edges >= n_nodes).any(axis=1))
        if bad.size:
            u, v = edges[bad[0]]
            raise InputError(
                f"edge ({u}, {v}) out of range for graph with {n_nodes} nodes"
                f" (pair #{bad[0]})"
            )
    edges = edges[edges[:, 0] != edges[:, 1]]
    both = np.concatenate([edges, edges[:, ::-1]], axis=0)
    if both.size:
        both = np.unique(both, axis=0)  # sorts lexicographically: rows come out grouped by source, sorted by target
    counts = np.bincount(both[:, 0], minlength=n_nodes) if both.size else np.zeros(n_nodes, dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    indices = both[:, 1] if both.size else np.empty(0, dtype=np.int64)
    return SparseGraph(n_nodes, indptr, indices)


def laplacian_apply(g, f):
    """Apply the Laplacian: ``out[n] = sum_{v in Ne(n)} (f[n] - f[v])``."""
    f = _check_vector(g, f)
    return g.degrees * f - g.adjacency() @ f


def averaging_apply(g, f):
    """Average ``f`` over closed neighbourhoods.

    ``out[n] = (f[n] + sum_{v in Ne(n)} f[v]) / (1 + deg(n))``; isolated
    nodes pass through unchanged.
    """
    f = _check_vector(g, f)
    return (f + g.adjacency() @ f) / (1.0 + g.degrees)


def _check_vector(g, f):
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (g.n_nodes,):
        raise InputError(f"expected a vector of length {g.n_nodes}, got shape {f.shape}")
    return f


def largest_connected_component(g):
    """Subgraph induced on the largest connected component.

    Returns ``(subgraph, mapping)`` where ``mapping[old] = new`` for kept
    nodes and -1 for dropped ones. The mapping preserves index order.
    Ties between equal-sized components go to the one containing the
    smallest original index.
    """
    if g.n_nodes == 0:
        raise InputError("cannot take the largest component of an empty graph")
    n_comp, labels = csgraph.connected_components(g.adjacency(), directed=False)
    sizes = np.bincount(labels, minlength=n_comp)
    max_size = sizes.max()
    # first node (lowest index) whose component has maximal size decides the tie
    chosen = labels[np.flatnonzero(sizes[labels] == max_size)[0]]
    keep = np.flatnonzero(labels == chosen)
    mapping = np.full(g.n_nodes, -1, dtype=np.int64)
    mapping[keep] = np.arange(keep.size)
    sub = g.adjacency()[keep][:, keep].tocsr()
    sub.sort_indices()
    return SparseGraph(keep.size, sub.indptr.astype(np.int64), sub.indices.astype(np.int64)), mapping


def read_edge_file(path):
    """Read ``u<TAB>v`` pairs from a UTF-8 text file.

    Lines starting with ``#`` and blank lines are ignored. Returns an
    ``(E, 2)`` int array; range checking happens in :func:`from_edge_list`.
    """
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected 'u<TAB>v', got {line!r}")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-integer node index in {line!r}") from None
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
