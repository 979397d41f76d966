"""Covariance structure of the graph GP prior.

The latent likelihood parameter of node ``n`` is the base GP averaged
over the closed 1-hop neighbourhood, so covariances are neighbourhood
averages of the base kernel:

  Cov(h_m, h_n)      = [1/((1+D_m)(1+D_n))] sum_{i in C(m)} sum_{j in C(n)} k(x_i, x_j)
  Cov(h_n, f(z))     = [1/(1+D_n)] sum_{i in C(n)} k(x_i, z)

with ``C(n)`` the closed neighbourhood of ``n``. Equivalently the full
covariance is ``P K_XX P^T`` for the averaging operator
``P = (I+D)^-1 (I+A)``; blocks here are computed by gathering only the
closed neighbourhoods involved, never the full matrix.

Two evaluation paths coexist on purpose: the linear kernel has an
explicit feature map, so node covariances reduce to dot products of the
averaged feature rows (the mean-embedding shortcut); the polynomial
kernel has no finite map and uses the generic double sum over cached raw
inner products.
"""

import numpy as np
import scipy.sparse as sp

from .errors import InputError, UnsupportedOperationError
from .features import kernel_matrix, kernel_transform


class GgpPrior:
    """Graph + features + base kernel, with cached raw-product tables."""

    def __init__(self, graph, features, spec):
        if features.n_nodes != graph.n_nodes:
            raise InputError(
                f"features cover {features.n_nodes} nodes but graph has {graph.n_nodes}"
            )
        self.graph = graph
        self.features = features
        self.spec = spec
        self._mu_hat = None

    def with_spec(self, spec):
        """Same graph/features under different kernel hyperparameters."""
        other = GgpPrior(self.graph, self.features, spec)
        other._mu_hat = self._mu_hat  # theta-independent, safe to share
        return other

    def mean_embeddings(self):
        """Averaged feature rows ``P X`` as a sparse matrix (cached).

        Row ``n`` is the empirical mean of the raw feature vectors over
        the closed neighbourhood of ``n``; for the linear kernel these
        rows *are* the (unscaled) feature maps of the h-process.
        """
        if self._mu_hat is None:
            self._mu_hat = (self.graph.averaging_matrix() @ self.features.matrix).tocsr()
        return self._mu_hat

    def _check_idx(self, idx):
        idx = np.asarray(idx, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= self.graph.n_nodes):
            raise InputError(f"node index out of range [0, {self.graph.n_nodes})")
        return idx

    def cov_hh(self, idx_a, idx_b):
        """Covariance block of the averaged process between two node lists."""
        idx_a = self._check_idx(idx_a)
        idx_b = self._check_idx(idx_b)
        if self.spec.family == "linear":
            mu = self.mean_embeddings()
            raw = (mu[idx_a] @ mu[idx_b].T).toarray()
            return kernel_transform(raw, self.spec.variance, self.spec.offset, "linear")
        p = self.graph.averaging_matrix()
        wa, active_a = _restrict_rows(p, idx_a)
        wb, active_b = _restrict_rows(p, idx_b)
        xa = self.features.matrix[active_a]
        xb = self.features.matrix[active_b]
        kab = kernel_transform(
            (xa @ xb.T).toarray(), self.spec.variance, self.spec.offset, self.spec.family
        )
        return wa @ kab @ wb.T

    def cov_hh_diag(self, idx):
        """Variances ``Cov(h_n, h_n)`` for a list of nodes."""
        idx = self._check_idx(idx)
        if self.spec.family == "linear":
            mu = self.mean_embeddings()[idx]
            raw = np.asarray(mu.multiply(mu).sum(axis=1)).ravel()
            return kernel_transform(raw, self.spec.variance, self.spec.offset, "linear")
        out = np.empty(idx.size, dtype=np.float64)
        x = self.features.matrix
        for i, n in enumerate(idx):
            closed = self.graph.closed_neighborhood(n)
            raw = (x[closed] @ x[closed].T).toarray()
            k = kernel_transform(raw, self.spec.variance, self.spec.offset, self.spec.family)
            out[i] = k.sum() / closed.size**2
        return out

    def cov_hu(self, idx, z):
        """Inter-domain covariance between ``h`` at ``idx`` and ``f`` at rows of ``z``."""
        idx = self._check_idx(idx)
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.features.n_features:
            raise InputError(
                f"inducing inputs must be (M, {self.features.n_features}), got {z.shape}"
            )
        if self.spec.family == "linear":
            raw = self.mean_embeddings()[idx] @ z.T
            return kernel_transform(np.asarray(raw), self.spec.variance, self.spec.offset, "linear")
        p = self.graph.averaging_matrix()
        w, active = _restrict_rows(p, idx)
        kxz = kernel_matrix(self.features.matrix[active], z, self.spec)
        return w @ kxz

    def spectral_transform(self):
        """Filtered feature maps of the equivalent Bayesian linear model.

        Returns ``(I+D)^-1 D Phi + (I+D)^-1 (I - L) Phi`` with
        ``Phi = sqrt(variance) X``, computed term by term; only defined
        when the base kernel has an explicit finite feature map.
        """
        if self.spec.family != "linear":
            raise UnsupportedOperationError(
                "spectral_transform requires the linear kernel (explicit feature map)"
            )
        phi = np.asarray(self.features.matrix.todense()) * np.sqrt(self.spec.variance)
        deg = self.graph.degrees.astype(np.float64)
        inv = 1.0 / (1.0 + deg)
        lap_phi = self.graph.laplacian() @ phi
        return inv[:, None] * deg[:, None] * phi + inv[:, None] * (phi - lap_phi)

    def node_blocks(self, idx):
        """Static arrays the variational objective needs for a node set.

        Everything here depends only on the graph, the raw features and
        ``idx`` -- not on the kernel hyperparameters -- so the training
        loop builds it once and re-applies the kernel transform per step.
        """
        idx = self._check_idx(idx)
        family = self.spec.family
        if family == "linear":
            mu = self.mean_embeddings()[idx]
            h_rows = np.asarray(mu.todense())
            return {
                "family": "linear",
                "idx": idx,
                "h_rows": h_rows,
                "h_sqnorm": np.einsum("ij,ij->i", h_rows, h_rows),
            }
        p = self.graph.averaging_matrix()
        weights, active = _restrict_rows(p, idx)
        x = self.features.matrix
        pair_vals, pair_seg = [], []
        for i, n in enumerate(idx):
            closed = self.graph.closed_neighborhood(n)
            raw = (x[closed] @ x[closed].T).toarray().ravel()
            pair_vals.append(raw)
            pair_seg.append(np.full(raw.size, i, dtype=np.int32))
        return {
            "family": "polynomial",
            "idx": idx,
            "x_active": np.asarray(x[active].todense()),
            "weights": weights,
            "pair_vals": np.concatenate(pair_vals) if pair_vals else np.empty(0),
            "pair_seg": np.concatenate(pair_seg) if pair_seg else np.empty(0, dtype=np.int32),
            "inv_count_sq": 1.0 / (1.0 + self.graph.degrees[idx].astype(np.float64)) ** 2,
        }

    def __repr__(self):
        return f"GgpPrior(n_nodes={self.graph.n_nodes}, kernel={self.spec.family})"


def cov_uu(z, spec):
    """Gram matrix of the base kernel on the inducing inputs."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise InputError(f"inducing inputs must be a non-empty 2-D array, got shape {z.shape}")
    return kernel_matrix(z, z, spec)


def _restrict_rows(p, idx):
    """Rows ``idx`` of the averaging operator, restricted to their support.

    Returns ``(weights, active)`` with ``weights`` dense ``(len(idx), len(active))``
    and ``active`` the sorted union of closed neighbourhoods, so that
    ``P[idx] M == weights @ M[active]`` for any matrix ``M``.
    """
    rows = p[idx]
    active = np.unique(rows.indices)
    col_map = np.zeros(p.shape[1], dtype=np.int64)
    col_map[active] = np.arange(active.size)
    weights = np.zeros((idx.size, active.size), dtype=np.float64)
    for i in range(idx.size):
        start, stop = rows.indptr[i], rows.indptr[i + 1]
        weights[i, col_map[rows.indices[start:stop]]] = rows.data[start:stop]
    return weights, active
