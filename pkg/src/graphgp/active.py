"""Active-learning simulation: acquisition, baselines, loop and metric.

The greedy variance-sum acquisition works on the inverse of the grounded
Laplacian (the Laplacian restricted to unlabelled nodes), maintained
incrementally with rank-1 downdates; it needs only the graph and the
labelled indices, never the model. Label propagation provides the
model-side baseline via the harmonic solution on the same grounded
system.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import svgp, train
from .errors import InputError
from .features import KernelSpec, tfidf_transform
from .ggp_prior import GgpPrior


@dataclass(frozen=True, eq=False)
class SoptState:
    """Unlabelled indices (sorted, original ids) and the grounded inverse.

    ``c[i, j]`` is the (i, j) entry of ``(L_UU + delta I)^-1`` under the
    ordering of ``unlabelled``; both shrink by one per acquisition.
    """

    unlabelled: np.ndarray
    c: np.ndarray


def sopt_init(g, labelled, delta=0.0):
    """Invert the grounded Laplacian over the unlabelled complement.

    Requires a connected graph (run :func:`graph.largest_connected_component`
    first); with ``delta = 0`` the grounded Laplacian of a connected graph
    with a non-empty labelled set is positive definite. ``delta > 0`` is a
    numerical safety valve only.
    """
    labelled = np.asarray(labelled, dtype=np.int64).ravel()
    if labelled.size == 0:
        raise InputError("labelled set must be non-empty")
    if labelled.min() < 0 or labelled.max() >= g.n_nodes:
        raise InputError(f"labelled index out of range [0, {g.n_nodes})")
    if delta < 0:
        raise InputError(f"delta must be non-negative, got {delta}")
    mask = np.ones(g.n_nodes, dtype=bool)
    mask[labelled] = False
    unlabelled = np.flatnonzero(mask)
    if unlabelled.size == 0:
        return SoptState(unlabelled=unlabelled, c=np.empty((0, 0)))
    l_uu = g.laplacian()[unlabelled][:, unlabelled].toarray()
    l_uu[np.diag_indices_from(l_uu)] += delta
    try:
        factor = scipy.linalg.cho_factor(l_uu, lower=True)
    except np.linalg.LinAlgError:
        raise InputError(
            "grounded Laplacian is singular; the graph is likely disconnected"
            " -- restrict to the largest connected component first"
        ) from None
    c = scipy.linalg.cho_solve(factor, np.eye(unlabelled.size))
    if not np.all(np.isfinite(c)):
        raise InputError(
            "grounded Laplacian inverse is non-finite; the graph is likely disconnected"
            " -- restrict to the largest connected component first"
        )
    c = 0.5 * (c + c.T)  # symmetrize away solve round-off
    return SoptState(unlabelled=unlabelled, c=c)


def sopt_select(state):
    """Greedy pick: maximize (column sum)^2 / variance over candidates.

    Ties break to the smallest original node index (the unlabelled list
    is kept sorted, so the first argmax wins).
    """
    if state.unlabelled.size == 0:
        raise InputError("no unlabelled candidates left to select")
    col_sums = state.c.sum(axis=0)
    scores = col_sums**2 / np.diag(state.c)
    return int(state.unlabelled[np.argmax(scores)])


def sopt_update(state, v):
    """Condition on node ``v``: Schur-complement downdate, then drop it.

    Equals recomputing the grounded inverse on the reduced unlabelled set
    exactly (up to round-off).
    """
    pos = np.searchsorted(state.unlabelled, v)
    if pos >= state.unlabelled.size or state.unlabelled[pos] != v:
        raise InputError(f"node {v} is not an unlabelled candidate")
    c = state.c
    col = c[:, pos]
    c_new = c - np.outer(col, col) / c[pos, pos]
    keep = np.arange(state.unlabelled.size) != pos
    return SoptState(unlabelled=state.unlabelled[keep], c=c_new[np.ix_(keep, keep)])


def lp_scores(g, labelled_pairs, n_classes):
    """Harmonic-function class scores for every node.

    Solves ``L_UU F_U = A_UL Y_L`` with one-hot labelled rows; labelled
    nodes keep their one-hot. Rows of ``F_U`` are convex weights (sum 1).
    """
    idx, y = _check_pairs(labelled_pairs, g.n_nodes, n_classes)
    scores = np.zeros((g.n_nodes, n_classes))
    scores[idx, y] = 1.0
    mask = np.ones(g.n_nodes, dtype=bool)
    mask[idx] = False
    unlabelled = np.flatnonzero(mask)
    if unlabelled.size == 0:
        return scores
    lap = g.laplacian().tocsr()
    l_uu = lap[unlabelled][:, unlabelled].tocsc()
    a_ul = g.adjacency()[unlabelled][:, idx]
    rhs = a_ul @ scores[idx]
    try:
        solver = spla.splu(l_uu)
    except RuntimeError as exc:
        raise InputError(
            f"harmonic system is singular ({exc}); every component needs a labelled node"
        ) from None
    scores[unlabelled] = solver.solve(rhs)
    return scores


def lp_predict(g, labelled_pairs, n_classes):
    """Label-propagation prediction: argmax of the harmonic scores."""
    return np.argmax(lp_scores(g, labelled_pairs, n_classes), axis=1)


def _check_pairs(labelled_pairs, n_nodes, n_classes):
    arr = np.asarray(list(labelled_pairs), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0:
        raise InputError("labelled set must be a non-empty sequence of (node, class) pairs")
    idx, y = arr[:, 0], arr[:, 1]
    if idx.min() < 0 or idx.max() >= n_nodes:
        raise InputError(f"node index out of range [0, {n_nodes})")
    if y.min() < 0 or y.max() >= n_classes:
        raise InputError(f"class index out of range [0, {n_classes})")
    if np.unique(idx).size != idx.size:
        raise InputError("duplicate node in labelled pairs")
    return idx, y


@dataclass(frozen=True, eq=False)
class LearningCurve:
    """Test accuracy after each acquired label, for one seed."""

    labels_acquired: np.ndarray
    test_accuracy: np.ndarray

    def __post_init__(self):
        la = np.asarray(self.labels_acquired, dtype=np.int64)
        acc = np.asarray(self.test_accuracy, dtype=np.float64)
        object.__setattr__(self, "labels_acquired", la)
        object.__setattr__(self, "test_accuracy", acc)
        if la.size != acc.size:
            raise InputError("curve arrays must have equal length")
        if la.size and (la[0] != 1 or np.any(np.diff(la) <= 0)):
            raise InputError("labels_acquired must increase strictly from 1")


def alc(curve):
    """Area under the learning curve: mean accuracy over its points.

    Evaluation points are unit-spaced in labels acquired, so the mean is
    the normalized area, 1.0 for a learner that is always perfect.
    """
    if curve.labels_acquired.size == 0:
        raise InputError("cannot compute ALC of an empty curve")
    return float(curve.test_accuracy.mean())


class GgpLearner:
    """Retrains the graph GP from scratch on the current labelled set.

    The prior (TFIDF features, averaged embeddings) is built once per
    dataset and reused; each call re-fits variational parameters and
    hyperparameters, since the inducing-point count follows the label
    count.
    """

    def __init__(self, config=None, kernel_family="linear"):
        self.config = config if config is not None else train.TrainConfig()
        self.kernel_family = kernel_family
        self._cache = None

    def _prior(self, dataset):
        if self._cache is None or self._cache[0] is not dataset:
            feats = tfidf_transform(dataset.features) if self.config.tfidf else dataset.features
            prior = GgpPrior(dataset.graph, feats, KernelSpec(family=self.kernel_family))
            prior.mean_embeddings()
            self._cache = (dataset, prior)
        return self._cache[1]

    def fit_predict(self, dataset, labelled_idx, labelled_y, seed):
        prior = self._prior(dataset)
        config = self.config.replace(seed=seed)
        pairs = np.column_stack([labelled_idx, labelled_y])
        model = train.fit(prior, pairs, dataset.n_classes, config)
        return model.predict_labels(np.arange(dataset.graph.n_nodes))


class LpLearner:
    """Label-propagation baseline; ignores features and the seed."""

    def fit_predict(self, dataset, labelled_idx, labelled_y, seed):
        pairs = np.column_stack([labelled_idx, labelled_y])
        return lp_predict(dataset.graph, pairs, dataset.n_classes)


def active_loop(dataset, model, acquisition, budget=50, seeds=range(10), delta=0.0):
    """Acquire-retrain-evaluate simulation; one learning curve per seed.

    Per seed: draw one initial labelled node uniformly, then repeat until
    ``budget`` labels are held -- retrain, record accuracy over all
    currently unlabelled nodes, acquire the next node ('sopt' greedy or
    'rand' uniform). The dataset must already be restricted to its
    largest connected component for 'sopt'.
    """
    if acquisition not in ("sopt", "rand"):
        raise InputError(f"unknown acquisition {acquisition!r}, expected 'sopt' or 'rand'")
    n_nodes = dataset.graph.n_nodes
    if budget < 1 or budget > n_nodes:
        raise InputError(f"budget must be in [1, {n_nodes}], got {budget}")
    labels = dataset.labels
    curves = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        labelled = [int(rng.integers(n_nodes))]
        sopt = sopt_init(dataset.graph, labelled, delta=delta) if acquisition == "sopt" else None
        accuracies = []
        for t in range(1, budget + 1):
            idx = np.asarray(labelled, dtype=np.int64)
            preds = model.fit_predict(dataset, idx, labels[idx], seed=seed * 100003 + t)
            mask = np.ones(n_nodes, dtype=bool)
            mask[idx] = False
            unlabelled = np.flatnonzero(mask)
            accuracies.append(float(np.mean(preds[unlabelled] == labels[unlabelled])))
            if t == budget:
                break
            if acquisition == "sopt":
                nxt = sopt_select(sopt)
                sopt = sopt_update(sopt, nxt)
            else:
                nxt = int(rng.choice(unlabelled))
            labelled.append(nxt)
        curves.append(LearningCurve(np.arange(1, budget + 1), np.asarray(accuracies)))
    return curves
