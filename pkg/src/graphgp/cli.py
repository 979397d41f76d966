"""Command-line entry point for reproducible experiments.

Commands: train, eval, active, gradcheck, synth, validate-data.
Exit codes: 0 ok, 1 input error, 2 numerical failure, 3 check failure.
Failures emit machine-readable JSON on stderr; metric output is JSON/CSV
(plotting is left to external tools). `--seed`-fixed runs produce
byte-identical metrics.json across runs on one platform (the manifest
additionally carries wall-clock time, so it is excluded from that
guarantee).
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import active as activemod
from . import data as datamod
from . import train as trainmod
from .errors import GraphGpError, InputError, NumericalError
from .features import FeatureMatrix, KernelSpec, from_triples, tfidf_transform
from .ggp_prior import GgpPrior
from .graph import from_edge_list
from .svgp import VariationalState

KERNEL_CHOICES = {"linear": "linear", "poly3": "polynomial"}
DATA_ROOT_ENV = "GRAPHGP_DATA_ROOT"


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        _error_json("input", exc)
        return 1
    except NumericalError as exc:
        _error_json("numerical", exc)
        return 2
    except GraphGpError as exc:
        _error_json("unsupported", exc)
        return 1


def _error_json(kind, exc):
    payload = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _build_parser():
    parser = argparse.ArgumentParser(prog="graphgp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit the classifier on a dataset split")
    _add_data_arg(p_train)
    _add_config_args(p_train)
    p_train.add_argument("--kernel", choices=sorted(KERNEL_CHOICES), default="poly3")
    p_train.add_argument("--restarts", type=int, default=1)
    p_train.add_argument("--use-val-labels", action="store_true",
                         help="train on train+val labels (the extra-label variant)")
    p_train.add_argument("--out", default="runs/train")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p_eval.add_argument("--checkpoint", required=True)
    _add_data_arg(p_eval)
    p_eval.add_argument("--split", choices=datamod.SPLIT_NAMES, default="test")
    p_eval.set_defaults(func=cmd_eval)

    p_active = sub.add_parser("active", help="run the acquire-retrain-evaluate simulation")
    _add_data_arg(p_active)
    _add_config_args(p_active)
    p_active.add_argument("--model", choices=("ggp", "lp"), default="ggp")
    p_active.add_argument("--acq", choices=("sopt", "rand"), default="sopt")
    p_active.add_argument("--kernel", choices=sorted(KERNEL_CHOICES), default="linear")
    p_active.add_argument("--budget", type=int, default=50)
    p_active.add_argument("--seeds", type=int, default=10, help="number of initial-label seeds")
    p_active.add_argument("--delta", type=float, default=0.0,
                          help="grounded-Laplacian regularizer for the sopt acquisition")
    p_active.add_argument("--out", default="runs/active")
    p_active.set_defaults(func=cmd_active)

    p_grad = sub.add_parser("gradcheck", help="check ELBO gradients against finite differences")
    p_grad.add_argument("--nodes", type=int, default=20)
    p_grad.add_argument("--classes", type=int, default=3)
    p_grad.add_argument("--inducing", type=int, default=5)
    p_grad.add_argument("--labels", type=int, default=8)
    p_grad.add_argument("--kernel", choices=sorted(KERNEL_CHOICES), default="poly3")
    p_grad.add_argument("--quad-points", type=int, default=20)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_synth = sub.add_parser("synth", help="generate a stochastic block model dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--n-per-block", type=int, default=10)
    p_synth.add_argument("--blocks", type=int, default=2)
    p_synth.add_argument("--p-in", type=float, default=1.0)
    p_synth.add_argument("--p-out", type=float, default=0.0)
    p_synth.add_argument("--d-per-block", type=int, default=4)
    p_synth.add_argument("--noise", type=float, default=0.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)

    p_val = sub.add_parser("validate-data", help="validate a dataset directory and report counts")
    _add_data_arg(p_val)
    p_val.set_defaults(func=cmd_validate)

    return parser


def _add_data_arg(parser):
    parser.add_argument("--data", required=True,
                        help=f"dataset directory (resolved against ${DATA_ROOT_ENV} if relative)")


def _add_config_args(parser):
    parser.add_argument("--config", help="key=value config file; flags override it")
    parser.add_argument("--learning-rate", type=float, default=None)
    parser.add_argument("--max-iters", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--quad-points", type=int, default=None)
    parser.add_argument("--epsilon", type=float, default=None)
    parser.add_argument("--train-z", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--tfidf", action=argparse.BooleanOptionalAction, default=None)


def _build_config(args):
    overrides = {
        "learning_rate": args.learning_rate,
        "max_iters": args.max_iters,
        "seed": args.seed,
        "quad_points": args.quad_points,
        "epsilon": args.epsilon,
        "train_z": args.train_z,
        "tfidf": args.tfidf,
    }
    if args.config:
        return trainmod.TrainConfig.from_file(args.config, **overrides)
    return trainmod.TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


def _resolve_data_dir(arg):
    if os.path.isdir(arg):
        return arg
    root = os.environ.get(DATA_ROOT_ENV)
    if root:
        candidate = os.path.join(root, arg)
        if os.path.isdir(candidate):
            return candidate
    raise InputError(f"dataset directory {arg!r} not found (also tried ${DATA_ROOT_ENV})")


def _prepared_prior(dataset, kernel_family, use_tfidf):
    feats = tfidf_transform(dataset.features) if use_tfidf else dataset.features
    return GgpPrior(dataset.graph, feats, KernelSpec(family=kernel_family))


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(out_dir, command, config, seeds, fingerprint, artifacts, wall, metrics):
    manifest = {
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "dataset_fingerprint": fingerprint,
        "artifacts": artifacts,
        "wall_clock_sec": wall,
        "metrics": metrics,
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)


# --------------------------------------------------------------------------


def cmd_train(args):
    t0 = time.monotonic()
    config = _build_config(args)
    dataset = datamod.load_dataset(_resolve_data_dir(args.data))
    fingerprint = datamod.dataset_fingerprint(dataset)
    prior = _prepared_prior(dataset, KERNEL_CHOICES[args.kernel], config.tfidf)

    train_idx = dataset.splits["train"]
    if args.use_val_labels:
        train_idx = np.sort(np.concatenate([train_idx, dataset.splits["val"]]))
    pairs = np.column_stack([train_idx, dataset.labels[train_idx]])
    test_idx = dataset.splits["test"]

    os.makedirs(args.out, exist_ok=True)
    seeds = [config.seed + r for r in range(args.restarts)]
    artifacts, test_accs, train_accs, initial_elbos, final_elbos = {}, [], [], [], []
    for seed in seeds:
        model = trainmod.fit(prior, pairs, dataset.n_classes, config.replace(seed=seed))
        ckpt = os.path.join(args.out, f"checkpoint-{seed}.npz")
        trainmod.save_checkpoint(ckpt, model, dataset_fingerprint=fingerprint)
        trace_path = os.path.join(args.out, f"trace-{seed}.csv")
        with open(trace_path, "w", encoding="utf-8") as fh:
            fh.write("iter,elbo\n")
            for i, v in enumerate(model.elbo_trace):
                fh.write(f"{i},{float(v)!r}\n")
        artifacts[f"checkpoint-{seed}"] = ckpt
        artifacts[f"trace-{seed}"] = trace_path
        preds_train = model.predict_labels(train_idx)
        train_accs.append(float(np.mean(preds_train == dataset.labels[train_idx])))
        if test_idx.size:
            preds_test = model.predict_labels(test_idx)
            test_accs.append(float(np.mean(preds_test == dataset.labels[test_idx])))
        initial_elbos.append(float(model.elbo_trace[0]) if model.elbo_trace.size else model.final_elbo)
        final_elbos.append(model.final_elbo)

    metrics = {
        "train_accuracy_per_restart": train_accs,
        "test_accuracy_per_restart": test_accs,
        "test_accuracy_mean": float(np.mean(test_accs)) if test_accs else None,
        "test_accuracy_std": float(np.std(test_accs)) if test_accs else None,
        "initial_elbo_per_restart": initial_elbos,
        "final_elbo_per_restart": final_elbos,
    }
    metrics_path = os.path.join(args.out, "metrics.json")
    _write_json(metrics_path, metrics)
    artifacts["metrics"] = metrics_path
    config_dict = {**config.__dict__, "kernel": args.kernel, "use_val_labels": args.use_val_labels,
                   "restarts": args.restarts}
    _manifest(args.out, "train", config_dict, seeds, fingerprint, artifacts,
              time.monotonic() - t0, metrics)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_eval(args):
    dataset = datamod.load_dataset(_resolve_data_dir(args.data))
    fingerprint = datamod.dataset_fingerprint(dataset)
    meta, _ = trainmod.load_checkpoint(args.checkpoint)
    if meta.get("dataset_fingerprint") not in (None, fingerprint):
        raise InputError("checkpoint/dataset fingerprint mismatch")
    feats = tfidf_transform(dataset.features) if meta["tfidf"] else dataset.features
    model = trainmod.restore_model(args.checkpoint, dataset.graph, feats)
    idx = dataset.splits[args.split]
    if idx.size == 0:
        raise InputError(f"split {args.split!r} is empty")
    preds = model.predict_labels(idx)
    truth = dataset.labels[idx]
    k = dataset.n_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (truth, preds), 1)
    report = {
        "split": args.split,
        "n_nodes": int(idx.size),
        "accuracy": float(np.mean(preds == truth)),
        "confusion": confusion.tolist(),
    }
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_active(args):
    t0 = time.monotonic()
    config = _build_config(args)
    dataset = datamod.load_dataset(_resolve_data_dir(args.data))
    reduced, mapping = datamod.restrict_to_largest_component(dataset)
    fingerprint = datamod.dataset_fingerprint(reduced)

    if args.model == "ggp":
        model = activemod.GgpLearner(config, kernel_family=KERNEL_CHOICES[args.kernel])
    else:
        model = activemod.LpLearner()
    base = config.seed
    seeds = list(range(base, base + args.seeds))
    curves = activemod.active_loop(reduced, model, args.acq, budget=args.budget,
                                   seeds=seeds, delta=args.delta)

    os.makedirs(args.out, exist_ok=True)
    curves_path = os.path.join(args.out, "curves.csv")
    with open(curves_path, "w", encoding="utf-8") as fh:
        fh.write("seed,labels_acquired,test_accuracy\n")
        for seed, curve in zip(seeds, curves):
            for t, acc in zip(curve.labels_acquired, curve.test_accuracy):
                fh.write(f"{seed},{t},{acc!r}\n")
    alcs = [activemod.alc(c) for c in curves]
    stderr = float(np.std(alcs, ddof=1) / np.sqrt(len(alcs))) if len(alcs) > 1 else 0.0
    metrics = {
        "model": args.model,
        "acquisition": args.acq,
        "budget": args.budget,
        "n_nodes_largest_component": reduced.graph.n_nodes,
        "n_nodes_dropped": int(np.sum(mapping < 0)),
        "alc_per_seed": alcs,
        "alc_mean": float(np.mean(alcs)),
        "alc_stderr": stderr,
    }
    metrics_path = os.path.join(args.out, "alc.json")
    _write_json(metrics_path, metrics)
    config_dict = {**config.__dict__, "model": args.model, "acq": args.acq,
                   "kernel": args.kernel, "budget": args.budget, "delta": args.delta}
    _manifest(args.out, "active", config_dict, seeds, fingerprint,
              {"curves": curves_path, "metrics": metrics_path},
              time.monotonic() - t0, metrics)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_gradcheck(args):
    if args.nodes < 2:
        raise InputError("gradcheck needs at least 2 nodes")
    prior, state, pairs = gradcheck_instance(
        n_nodes=args.nodes, n_classes=args.classes, n_inducing=args.inducing,
        n_labels=args.labels, kernel_family=KERNEL_CHOICES[args.kernel], seed=args.seed,
    )
    config = trainmod.TrainConfig(quad_points=args.quad_points, seed=args.seed)
    report = trainmod.grad_check(prior, state, pairs, config)
    print(json.dumps(report, sort_keys=True))
    if report["max_rel_error"] >= 1e-4:
        print(json.dumps({"error": "check", "message":
                          f"gradient check failed in block {report['worst_block']!r}"}),
              file=sys.stderr)
        return 3
    return 0


def gradcheck_instance(n_nodes, n_classes, n_inducing, n_labels, kernel_family, seed):
    """Random small instance (graph, features, state, labels) for gradient checks."""
    rng = np.random.default_rng(seed)
    n_feats = 6
    edges = [(u, v) for u in range(n_nodes) for v in range(u + 1, n_nodes) if rng.random() < 0.3]
    g = from_edge_list(n_nodes, edges)
    dense = rng.normal(size=(n_nodes, n_feats)) * (rng.random((n_nodes, n_feats)) < 0.7)
    feats = from_triples(n_nodes, [(i, j, dense[i, j]) for i, j in zip(*np.nonzero(dense))],
                         n_features=n_feats)
    offset = 0.7 if kernel_family == "polynomial" else 0.0
    prior = GgpPrior(g, feats, KernelSpec(family=kernel_family, variance=0.8, offset=offset))
    z = rng.normal(size=(n_inducing, n_feats))
    m = rng.normal(size=(n_classes, n_inducing)) * 0.5
    s = np.tril(rng.normal(size=(n_classes, n_inducing, n_inducing)) * 0.2)
    for k in range(n_classes):
        s[k][np.diag_indices(n_inducing)] = 0.5 + rng.random(n_inducing)
    state = VariationalState(z=z, m=m, s=s)
    n_labels = min(n_labels, n_nodes)
    idx = rng.choice(n_nodes, size=n_labels, replace=False)
    y = rng.integers(0, n_classes, size=n_labels)
    return prior, state, np.column_stack([idx, y])


def cmd_synth(args):
    dataset = datamod.synth_sbm(
        n_per_block=args.n_per_block, n_blocks=args.blocks, p_in=args.p_in,
        p_out=args.p_out, d_per_block=args.d_per_block, noise=args.noise, seed=args.seed,
    )
    datamod.write_dataset(dataset, args.out)
    print(json.dumps({
        "out": args.out,
        "n_nodes": dataset.graph.n_nodes,
        "n_edges": dataset.graph.n_edges,
        "n_classes": dataset.n_classes,
        "n_features": dataset.features.n_features,
        "fingerprint": datamod.dataset_fingerprint(dataset),
    }, sort_keys=True))
    return 0


def cmd_validate(args):
    dataset = datamod.load_dataset(_resolve_data_dir(args.data))
    print(json.dumps({
        "n_nodes": dataset.graph.n_nodes,
        "n_edges": dataset.graph.n_edges,
        "n_classes": dataset.n_classes,
        "n_features": dataset.features.n_features,
        "splits": {k: int(v.size) for k, v in dataset.splits.items()},
        "fingerprint": datamod.dataset_fingerprint(dataset),
    }, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
