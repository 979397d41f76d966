"""Sparse variational inference for the graph GP classifier.

One latent function per class, all sharing the kernel hyperparameters
and the inducing inputs Z. The variational family is whitened: with
``L_z = chol(K_zz + jitter I)`` and ``u = L_z v``, the posterior over
``v`` is ``N(m_k, S_k S_k^T)`` per class, so the KL term is against a
standard normal and stays in closed form.

The math lives in jax.numpy so the same definitions serve both the
eager numpy-facing API below and the jitted training objective.
"""

import math
from dataclasses import dataclass, field

import numpy as np

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp
from jax.scipy.linalg import solve_triangular
from jax.scipy.special import ndtr

from . import ggp_prior
from .errors import InputError, NumericalError

# Cholesky jitter ladder: scales of mean(diag(K_zz)), escalating x10.
JITTER_BASE = 1e-6
JITTER_MAX = 1e-2


def jitter_ladder():
    """The escalation schedule for K_zz Cholesky jitter scales."""
    return [JITTER_BASE * 10.0**i for i in range(5)]

# Conditional variances are clipped here; exact interpolation of an
# inducing point makes h_nn - |a|^2 cancel to rounding noise.
VAR_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class VariationalState:
    """Inducing inputs plus per-class whitened Gaussian parameters.

    z: (M, D) inducing inputs, shared across classes.
    m: (K, M) variational means.
    s: (K, M, M) lower-triangular factors with positive diagonals,
       so each class covariance S_k S_k^T is positive definite.
    """

    z: np.ndarray
    m: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        m = np.asarray(self.m, dtype=np.float64)
        s = np.asarray(self.s, dtype=np.float64)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "s", s)
        if z.ndim != 2 or z.shape[0] < 1:
            raise InputError(f"z must be (M, D) with M >= 1, got {z.shape}")
        n_ind = z.shape[0]
        if m.ndim != 2 or m.shape[1] != n_ind:
            raise InputError(f"m must be (K, {n_ind}), got {m.shape}")
        if s.shape != (m.shape[0], n_ind, n_ind):
            raise InputError(f"s must be (K, {n_ind}, {n_ind}), got {s.shape}")
        for arr, name in ((z, "z"), (m, "m"), (s, "s")):
            if not np.all(np.isfinite(arr)):
                raise InputError(f"non-finite entries in {name}")
        if np.any(s != np.tril(s)):
            raise InputError("s factors must be lower-triangular")
        diags = np.diagonal(s, axis1=1, axis2=2)
        if np.any(diags <= 0):
            raise InputError("s factors must have strictly positive diagonals")

    @property
    def n_inducing(self):
        return self.z.shape[0]

    @property
    def n_classes(self):
        return self.m.shape[0]


@dataclass(frozen=True)
class RobustMaxLikelihood:
    """Multi-class likelihood: probability 1-epsilon on the argmax class.

    p(y = k | f) = 1 - epsilon if k == argmax_j f_j, else epsilon/(K-1).
    """

    n_classes: int
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.n_classes < 2:
            raise InputError(f"robust-max needs at least 2 classes, got {self.n_classes}")
        if not 0.0 < self.epsilon < (self.n_classes - 1) / self.n_classes:
            raise InputError(
                f"epsilon must lie in (0, {(self.n_classes - 1) / self.n_classes}), got {self.epsilon}"
            )


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Gauss-Hermite abscissae and weights (physicists' convention)."""

    n_points: int = 20
    x: np.ndarray = field(init=False, repr=False)
    w: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_points < 1:
            raise InputError(f"quadrature needs at least one point, got {self.n_points}")
        x, w = np.polynomial.hermite.hermgauss(self.n_points)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w)
        assert abs(w.sum() / math.sqrt(math.pi) - 1.0) < 1e-12


# --------------------------------------------------------------------------
# differentiable core (jax.numpy)


def kernel_block_arrays(z, variance, offset, blocks, family):
    """K_zz, K_hz and diag(K_hh) from the static arrays of ``node_blocks``."""
    kzz = _transform(z @ z.T, variance, offset, family)
    if family == "linear":
        khz = variance * (blocks["h_rows"] @ z.T)
        hdiag = variance * blocks["h_sqnorm"]
    else:
        kxz = _transform(blocks["x_active"] @ z.T, variance, offset, family)
        khz = blocks["weights"] @ kxz
        pair_k = _transform(blocks["pair_vals"], variance, offset, family)
        sums = jax.ops.segment_sum(
            pair_k, blocks["pair_seg"], num_segments=blocks["weights"].shape[0]
        )
        hdiag = sums * blocks["inv_count_sq"]
    return kzz, khz, hdiag


def _transform(raw, variance, offset, family):
    if family == "linear":
        return variance * raw
    return (variance * raw + offset) ** 3


def whitened_marginals(kzz, khz, hdiag, m, s, jitter_scale):
    """Per-node marginals of q(h) for every class.

    a_n = L_z^-1 k_{z h_n};  mean_k(n) = a_n^T m_k;
    var_k(n) = K_hh,nn - |a_n|^2 + |S_k^T a_n|^2.
    Returns (means, variances), both (n_nodes, n_classes).
    """
    n_ind = kzz.shape[0]
    jitter = jitter_scale * jnp.mean(jnp.diag(kzz))
    lz = jnp.linalg.cholesky(kzz + jitter * jnp.eye(n_ind))
    a = solve_triangular(lz, khz.T, lower=True)  # (M, L)
    means = a.T @ m.T
    base = hdiag - jnp.sum(a * a, axis=0)
    sta = jnp.einsum("kij,il->kjl", s, a)  # (S_k^T a_n) stacked over classes
    variances = base[None, :] + jnp.sum(sta**2, axis=1)
    return means, jnp.maximum(variances.T, VAR_FLOOR)


def prob_argmax(means, variances, y_onehot, gh_x, gh_w):
    """P(f_y = max_k f_k) under independent Gaussians, per node.

    One-dimensional Gauss-Hermite in the value of the selected latent:
    integrate N(t; mu_y, var_y) prod_{j != y} Phi((t - mu_j)/sd_j) dt.
    """
    mu_sel = jnp.sum(y_onehot * means, axis=1)
    var_sel = jnp.sum(y_onehot * variances, axis=1)
    grid = mu_sel[:, None] + jnp.sqrt(2.0 * var_sel)[:, None] * gh_x[None, :]
    scaled = (grid[:, None, :] - means[:, :, None]) / jnp.sqrt(variances)[:, :, None]
    cdfs = ndtr(scaled)
    cdfs = cdfs * (1.0 - y_onehot[:, :, None]) + y_onehot[:, :, None]
    return jnp.prod(cdfs, axis=1) @ (gh_w / jnp.sqrt(jnp.pi))


def expected_loglik_batch(means, variances, y_onehot, epsilon, gh_x, gh_w):
    """E_q[log p(y_n | f_n)] per node under the robust-max likelihood."""
    n_classes = y_onehot.shape[1]
    p_max = prob_argmax(means, variances, y_onehot, gh_x, gh_w)
    return p_max * jnp.log1p(-epsilon) + (1.0 - p_max) * jnp.log(epsilon / (n_classes - 1))


def kl_whitened(m, s):
    """KL(q(v) || N(0, I)) summed over classes, in closed form."""
    n_ind = m.shape[1]
    log_diags = jnp.log(jnp.diagonal(s, axis1=1, axis2=2))
    per_class = 0.5 * (
        jnp.sum(m**2, axis=1)
        + jnp.sum(s**2, axis=(1, 2))
        - n_ind
        - 2.0 * jnp.sum(log_diags, axis=1)
    )
    return jnp.sum(per_class)


def elbo_from_blocks(variance, offset, z, m, s, blocks, family, y_onehot, epsilon, gh_x, gh_w, jitter_scale):
    """ELBO = sum_n E_q[log p(y_n | f_n)] - KL, from prepared block arrays."""
    kzz, khz, hdiag = kernel_block_arrays(z, variance, offset, blocks, family)
    means, variances = whitened_marginals(kzz, khz, hdiag, m, s, jitter_scale)
    ell = expected_loglik_batch(means, variances, y_onehot, epsilon, gh_x, gh_w)
    return jnp.sum(ell) - kl_whitened(m, s)


def array_blocks(blocks):
    """Split ``node_blocks`` output into (family, jax-traceable arrays)."""
    family = blocks["family"]
    arrays = {k: v for k, v in blocks.items() if k not in ("family", "idx")}
    return family, arrays


# --------------------------------------------------------------------------
# numpy-facing operations


def marginal_q(prior, state, idx):
    """Marginal means and variances of q(h) at the given nodes.

    Returns ``(means, variances)`` of shape ``(len(idx), n_classes)``.
    Escalates the Cholesky jitter x10 from JITTER_BASE to JITTER_MAX on
    non-finite results before giving up with :class:`NumericalError`.
    """
    kzz = ggp_prior.cov_uu(state.z, prior.spec)
    khz = prior.cov_hu(idx, state.z)
    hdiag = prior.cov_hh_diag(idx)
    for scale in jitter_ladder():
        means, variances = whitened_marginals(kzz, khz, hdiag, state.m, state.s, scale)
        means = np.asarray(means)
        variances = np.asarray(variances)
        if np.all(np.isfinite(means)) and np.all(np.isfinite(variances)):
            return means, variances
    raise NumericalError(
        f"Cholesky of K_zz failed for jitter scales {jitter_ladder()} (of mean diagonal)"
    )


def kl_term(state):
    """KL divergence of the whitened variational posterior from its prior."""
    return float(kl_whitened(state.m, state.s))


def expected_loglik(means, variances, y, lik, quad):
    """Expected robust-max log-likelihood for a single node.

    ``means``/``variances`` are length-K arrays of marginal moments, ``y``
    the observed class index.
    """
    means = np.asarray(means, dtype=np.float64).ravel()
    variances = np.asarray(variances, dtype=np.float64).ravel()
    if means.shape != (lik.n_classes,) or variances.shape != (lik.n_classes,):
        raise InputError(f"expected {lik.n_classes} per-class moments")
    if np.any(variances <= 0):
        raise InputError("variances must be strictly positive")
    if not 0 <= y < lik.n_classes:
        raise InputError(f"class index {y} out of range [0, {lik.n_classes})")
    onehot = np.zeros((1, lik.n_classes))
    onehot[0, y] = 1.0
    out = expected_loglik_batch(
        means[None, :], variances[None, :], onehot, lik.epsilon, quad.x, quad.w
    )
    return float(out[0])


def elbo(prior, state, labels, lik, quad):
    """Evidence lower bound for a labelled set of ``(node, class)`` pairs."""
    labels = list(labels)
    if not labels:
        return -kl_term(state)
    idx = np.asarray([n for n, _ in labels], dtype=np.int64)
    y = np.asarray([c for _, c in labels], dtype=np.int64)
    if np.any(y < 0) or np.any(y >= lik.n_classes):
        raise InputError(f"class index out of range [0, {lik.n_classes})")
    means, variances = marginal_q(prior, state, idx)
    onehot = np.eye(lik.n_classes)[y]
    ell = expected_loglik_batch(means, variances, onehot, lik.epsilon, quad.x, quad.w)
    return float(np.sum(np.asarray(ell))) - kl_term(state)


def predict_proba(prior, state, lik, quad, idx):
    """Class probabilities ``p(y_n = k)`` for the given nodes.

    Under robust-max, p(y = k) = P(f_k is max) (1 - eps) + (1 - P) eps/(K-1).
    The K per-class quadratures each carry a small integration error, so
    the argmax probabilities are renormalised to sum to one (this cannot
    change the argmax) before mixing; rows then sum to 1 exactly.
    """
    means, variances = marginal_q(prior, state, idx)
    n, k = means.shape
    p_max = np.empty((n, k))
    for cls in range(k):
        onehot = np.zeros((n, k))
        onehot[:, cls] = 1.0
        p_max[:, cls] = np.asarray(prob_argmax(means, variances, onehot, quad.x, quad.w))
    p_max /= p_max.sum(axis=1, keepdims=True)
    return p_max * (1.0 - lik.epsilon) + (1.0 - p_max) * lik.epsilon / (k - 1)


def predict_labels(prior, state, lik, quad, idx):
    """Argmax class per node, ties broken by the lowest class index."""
    return np.argmax(predict_proba(prior, state, lik, quad, idx), axis=1)
