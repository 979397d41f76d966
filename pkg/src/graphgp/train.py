"""Fitting the classifier: initialization, ADAM on the ELBO, gradient checks.

All constrained parameters (kernel variance/offset, the diagonals of the
variational factors) are optimized through a softplus reparameterization,
so plain unconstrained gradient steps cannot leave their domains. The
gradients come from jax; `grad_check` holds them to central finite
differences, which stays the arbiter of correctness.
"""

import dataclasses
import json
import warnings
from dataclasses import dataclass
from functools import partial

import numpy as np

import jax
import jax.numpy as jnp

from . import svgp
from .errors import InputError, NumericalError
from .features import KernelSpec
from .ggp_prior import GgpPrior
from .svgp import JITTER_BASE, QuadratureRule, RobustMaxLikelihood, VariationalState

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of a single fit; mirrors the CLI flags one to one."""

    learning_rate: float = 0.005
    max_iters: int = 2000
    seed: int = 0
    quad_points: int = 20
    epsilon: float = 1e-3
    train_z: bool = True
    tfidf: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InputError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.max_iters < 0:
            raise InputError(f"max_iters must be >= 0, got {self.max_iters}")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_file(cls, path, **overrides):
        """Load from a plain ``key=value`` text file; kwargs win over the file."""
        values = {}
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise InputError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, raw = line.partition("=")
                key, raw = key.strip(), raw.strip()
                if key not in fields:
                    raise InputError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = _coerce(key, raw, fields[key], f"{path}:{lineno}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def _coerce(key, raw, typ, where):
    try:
        if typ in ("bool", bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ in ("int", int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise InputError(f"{where}: cannot parse {raw!r} for {key}") from None


@dataclass(eq=False)
class TrainedModel:
    """A fitted classifier plus its optimization trace."""

    prior: GgpPrior
    state: VariationalState
    elbo_trace: np.ndarray
    final_elbo: float
    config: TrainConfig
    n_classes: int

    def likelihood(self):
        return RobustMaxLikelihood(self.n_classes, self.config.epsilon)

    def quadrature(self):
        return QuadratureRule(self.config.quad_points)

    def predict_proba(self, idx):
        return svgp.predict_proba(self.prior, self.state, self.likelihood(), self.quadrature(), idx)

    def predict_labels(self, idx):
        return np.argmax(self.predict_proba(idx), axis=1)


def initialize(prior, labelled, n_classes, config):
    """Initial variational state: one inducing point per labelled node.

    Inducing inputs start at the averaged (densified) feature rows of the
    labelled nodes plus small seeded Gaussian noise to break ties between
    nodes sharing a neighbourhood; m = 0 and S = I leave q equal to the
    whitened prior.
    """
    labelled = np.asarray(labelled, dtype=np.int64).ravel()
    if labelled.size == 0:
        raise InputError("cannot initialize with an empty labelled set")
    if labelled.min() < 0 or labelled.max() >= prior.graph.n_nodes:
        raise InputError(f"labelled index out of range [0, {prior.graph.n_nodes})")
    base = np.asarray(prior.mean_embeddings()[labelled].todense())
    spread = base.std()
    if spread == 0.0:
        spread = 1.0
    rng = np.random.default_rng(config.seed)
    z = base + rng.normal(0.0, 1e-2 * spread, size=base.shape)
    n_ind = labelled.size
    m = np.zeros((n_classes, n_ind))
    s = np.broadcast_to(np.eye(n_ind), (n_classes, n_ind, n_ind)).copy()
    return VariationalState(z=z, m=m, s=s)


def initial_kernel_spec(prior, labelled):
    """Kernel hyperparameters scaled so prior marginal variances are O(1)."""
    labelled = np.asarray(labelled, dtype=np.int64).ravel()
    mu = prior.mean_embeddings()[labelled]
    raw_diag = np.asarray(mu.multiply(mu).sum(axis=1)).ravel()
    mean_sq = raw_diag.mean() if raw_diag.size else 0.0
    variance = 1.0 / mean_sq if mean_sq > 0 else 1.0
    offset = 1.0 if prior.spec.family == "polynomial" else 0.0
    return KernelSpec(family=prior.spec.family, variance=variance, offset=offset)


def fit(prior, labelled, n_classes, config):
    """Maximize the ELBO with full-batch ADAM.

    ``labelled`` is a sequence of ``(node, class)`` pairs. Deterministic
    for fixed seed, config and inputs. Raises :class:`NumericalError`
    with the iteration index if the objective goes non-finite even at
    the top of the jitter ladder.
    """
    idx, y = _as_label_arrays(labelled, n_classes)
    seen = np.unique(y)
    if seen.size < n_classes:
        missing = sorted(set(range(n_classes)) - set(seen.tolist()))
        warnings.warn(f"no labelled examples for classes {missing}", stacklevel=2)

    state0 = initialize(prior, idx, n_classes, config)
    spec0 = initial_kernel_spec(prior, idx)
    family = spec0.family
    params = _raw_params(spec0, state0)

    blocks = {k: jnp.asarray(v) for k, v in svgp.array_blocks(prior.node_blocks(idx))[1].items()}
    quad = QuadratureRule(config.quad_points)
    data = {
        "y_onehot": jnp.asarray(np.eye(n_classes)[y]),
        "gh_x": jnp.asarray(quad.x),
        "gh_w": jnp.asarray(quad.w),
    }

    adam_m = jax.tree_util.tree_map(jnp.zeros_like, params)
    adam_v = jax.tree_util.tree_map(jnp.zeros_like, params)
    trace = []
    ladder = svgp.jitter_ladder()
    rung = 0
    for it in range(config.max_iters):
        while True:
            step = _adam_step(
                params, adam_m, adam_v, it + 1, ladder[rung], config.learning_rate,
                config.epsilon, blocks, data, family=family, train_z=config.train_z,
            )
            new_params, new_m, new_v, elbo_val, finite = step
            if bool(finite):
                break
            if rung == len(ladder) - 1:
                raise NumericalError(
                    f"non-finite ELBO or gradient at iteration {it}"
                    f" with jitter ladder exhausted (scales {ladder});"
                    f" parameter snapshot at iteration start is unchanged"
                )
            rung += 1
        params, adam_m, adam_v = new_params, new_m, new_v
        trace.append(float(elbo_val))

    final_elbo = float(_elbo_eval(params, ladder[rung], config.epsilon, blocks, data, family=family))
    if not np.isfinite(final_elbo):
        raise NumericalError(f"non-finite final ELBO after {config.max_iters} iterations")

    spec_f, state_f = _constrained(params, family)
    return TrainedModel(
        prior=prior.with_spec(spec_f),
        state=state_f,
        elbo_trace=np.asarray(trace),
        final_elbo=final_elbo,
        config=config,
        n_classes=n_classes,
    )


def grad_check(prior, state, labelled, config):
    """Compare jax gradients of the ELBO to central finite differences.

    Works on the unconstrained parameterization with an absolute step of
    1e-4. Returns a report dict with per-block max relative errors
    ``|g - g_fd| / max(|g|, |g_fd|, 1e-8)``.
    """
    idx, y = _as_label_arrays(labelled, state.n_classes)
    family = prior.spec.family
    if family == "polynomial" and prior.spec.offset <= 0:
        raise InputError("grad_check needs a strictly positive polynomial offset")
    params = _raw_params(prior.spec, state)
    blocks = {k: jnp.asarray(v) for k, v in svgp.array_blocks(prior.node_blocks(idx))[1].items()}
    quad = QuadratureRule(config.quad_points)
    data = {
        "y_onehot": jnp.asarray(np.eye(state.n_classes)[y]),
        "gh_x": jnp.asarray(quad.x),
        "gh_w": jnp.asarray(quad.w),
    }

    analytic = _elbo_grad(params, JITTER_BASE, config.epsilon, blocks, data, family=family)
    step = 1e-4
    report = {}
    for name in params:
        flat = np.asarray(params[name], dtype=np.float64)
        grad = np.asarray(analytic[name], dtype=np.float64)
        worst = 0.0
        it = np.nditer(flat, flags=["multi_index"])
        while not it.finished:
            pos = it.multi_index
            fd = _central_difference(params, name, pos, step, scale=JITTER_BASE,
                                     epsilon=config.epsilon, blocks=blocks, data=data, family=family)
            g = grad[pos] if flat.ndim else float(grad)
            rel = abs(g - fd) / max(abs(g), abs(fd), 1e-8)
            worst = max(worst, rel)
            it.iternext()
        report[name] = worst
    worst_block = max(report, key=report.get)
    return {"blocks": report, "worst_block": worst_block, "max_rel_error": report[worst_block]}


def _central_difference(params, name, pos, step, scale, epsilon, blocks, data, family):
    def shifted(delta):
        arr = np.asarray(params[name], dtype=np.float64).copy()
        if arr.ndim:
            arr[pos] += delta
        else:
            arr = arr + delta
        p = dict(params)
        p[name] = jnp.asarray(arr)
        return float(_elbo_eval(p, scale, epsilon, blocks, data, family=family))

    return (shifted(step) - shifted(-step)) / (2.0 * step)


# --------------------------------------------------------------------------
# parameterization and jitted steps


def _as_label_arrays(labelled, n_classes):
    arr = np.asarray(list(labelled), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0:
        raise InputError("labelled set must be a non-empty sequence of (node, class) pairs")
    idx, y = arr[:, 0], arr[:, 1]
    if np.any(y < 0) or np.any(y >= n_classes):
        raise InputError(f"class index out of range [0, {n_classes})")
    return idx, y


def _softplus(x):
    return jnp.logaddexp(0.0, x)


def _softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    out = np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))
    return float(out) if out.ndim == 0 else out


def _constrain_s(s_raw):
    strict = jnp.tril(s_raw, k=-1)
    diag = _softplus(jnp.diagonal(s_raw, axis1=1, axis2=2))
    k, n_ind, _ = s_raw.shape
    return strict + diag[:, :, None] * jnp.eye(n_ind)[None, :, :]


def _raw_params(spec, state):
    diag = np.diagonal(state.s, axis1=1, axis2=2)
    s_raw = np.tril(state.s, k=-1) + np.einsum(
        "ki,ij->kij", _softplus_inverse(diag), np.eye(state.n_inducing)
    )
    params = {
        "variance": jnp.asarray(_softplus_inverse(spec.variance)),
        "z": jnp.asarray(state.z),
        "m": jnp.asarray(state.m),
        "s": jnp.asarray(s_raw),
    }
    if spec.family == "polynomial":
        params["offset"] = jnp.asarray(_softplus_inverse(spec.offset))
    return params


def _constrained(params, family):
    variance = float(_softplus(params["variance"]))
    offset = float(_softplus(params["offset"])) if family == "polynomial" else 0.0
    spec = KernelSpec(family=family, variance=variance, offset=offset)
    state = VariationalState(
        z=np.asarray(params["z"]),
        m=np.asarray(params["m"]),
        s=np.asarray(_constrain_s(params["s"])),
    )
    return spec, state


def _objective(params, jitter_scale, epsilon, blocks, data, family):
    variance = _softplus(params["variance"])
    offset = _softplus(params["offset"]) if "offset" in params else 0.0
    s = _constrain_s(params["s"])
    return svgp.elbo_from_blocks(
        variance, offset, params["z"], params["m"], s, blocks, family,
        data["y_onehot"], epsilon, data["gh_x"], data["gh_w"], jitter_scale,
    )


@partial(jax.jit, static_argnames=("family",))
def _elbo_eval(params, jitter_scale, epsilon, blocks, data, family):
    return _objective(params, jitter_scale, epsilon, blocks, data, family)


@partial(jax.jit, static_argnames=("family",))
def _elbo_grad(params, jitter_scale, epsilon, blocks, data, family):
    return jax.grad(_objective)(params, jitter_scale, epsilon, blocks, data, family)


@partial(jax.jit, static_argnames=("family", "train_z"))
def _adam_step(params, adam_m, adam_v, step_idx, jitter_scale, lr, epsilon, blocks, data, family, train_z):
    loss, grads = jax.value_and_grad(
        lambda p: -_objective(p, jitter_scale, epsilon, blocks, data, family)
    )(params)
    if not train_z:
        grads = dict(grads)
        grads["z"] = jnp.zeros_like(grads["z"])
    tree_map = jax.tree_util.tree_map
    new_m = tree_map(lambda a, g: ADAM_BETA1 * a + (1 - ADAM_BETA1) * g, adam_m, grads)
    new_v = tree_map(lambda a, g: ADAM_BETA2 * a + (1 - ADAM_BETA2) * g * g, adam_v, grads)
    correction1 = 1.0 - ADAM_BETA1**step_idx
    correction2 = 1.0 - ADAM_BETA2**step_idx
    new_params = tree_map(
        lambda p, a, b: p - lr * (a / correction1) / (jnp.sqrt(b / correction2) + ADAM_EPS),
        params, new_m, new_v,
    )
    finite = jnp.all(jnp.isfinite(loss))
    for leaf in jax.tree_util.tree_leaves(new_params):
        finite = jnp.logical_and(finite, jnp.all(jnp.isfinite(leaf)))
    return new_params, new_m, new_v, -loss, finite


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, dataset_fingerprint=None):
    """Single-file checkpoint; arrays round-trip bit-exactly via npz."""
    spec = model.prior.spec
    meta = {
        "kernel": {
            "family": spec.family,
            "variance": spec.variance,
            "offset": spec.offset,
            "degree": spec.degree,
        },
        "epsilon": model.config.epsilon,
        "quad_points": model.config.quad_points,
        "tfidf": model.config.tfidf,
        "n_classes": model.n_classes,
        "graph_hash": model.prior.graph.content_hash(),
        "dataset_fingerprint": dataset_fingerprint,
        "final_elbo": model.final_elbo,
        "config": dataclasses.asdict(model.config),
    }
    np.savez(
        path,
        z=model.state.z,
        m=model.state.m,
        s=model.state.s,
        elbo_trace=model.elbo_trace,
        meta=np.bytes_(json.dumps(meta).encode("utf-8")),
    )


def load_checkpoint(path):
    """Read a checkpoint back as ``(meta dict, arrays dict)``."""
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: np.asarray(data[k]) for k in ("z", "m", "s", "elbo_trace")}
        meta = json.loads(bytes(data["meta"].item()).decode("utf-8"))
    return meta, arrays


def restore_model(path, graph, features):
    """Rebuild a TrainedModel against its dataset; validates the graph hash."""
    meta, arrays = load_checkpoint(path)
    if meta["graph_hash"] != graph.content_hash():
        raise InputError("checkpoint was trained on a different graph (hash mismatch)")
    spec = KernelSpec(**meta["kernel"])
    prior = GgpPrior(graph, features, spec)
    state = VariationalState(z=arrays["z"], m=arrays["m"], s=arrays["s"])
    config = TrainConfig(**meta["config"])
    return TrainedModel(
        prior=prior,
        state=state,
        elbo_trace=arrays["elbo_trace"],
        final_elbo=float(meta["final_elbo"]),
        config=config,
        n_classes=int(meta["n_classes"]),
    )
