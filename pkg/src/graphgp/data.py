"""Dataset ingestion, the canonical on-disk format, and synthetic benchmarks.

Canonical layout of a dataset directory (UTF-8, LF, 0-based decimal):

  graph.edges      one ``u<TAB>v`` pair per line
  features.sparse  one ``node<TAB>feature<TAB>value`` triple per line
  labels.tsv       one ``node<TAB>class`` pair per line, every node exactly once
  split.json       {"train": [...], "val": [...], "test": [...]}

Labels exist for all nodes (the benchmarks have full ground truth); the
split file alone decides what a model may see.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import graph as graphmod
from .errors import InputError
from .features import FeatureMatrix, from_triples, read_feature_file

FILES = ("graph.edges", "features.sparse", "labels.tsv", "split.json")
SPLIT_NAMES = ("train", "val", "test")


@dataclass(eq=False)
class Dataset:
    graph: graphmod.SparseGraph
    features: FeatureMatrix
    labels: np.ndarray
    splits: dict
    n_classes: int = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.graph.n_nodes
        if self.features.n_nodes != n:
            raise InputError(f"features cover {self.features.n_nodes} nodes, graph has {n}")
        if self.labels.shape != (n,):
            raise InputError(f"labels must cover all {n} nodes, got shape {self.labels.shape}")
        if n and self.labels.min() < 0:
            raise InputError("negative class label")
        self.n_classes = int(self.labels.max()) + 1 if n else 0
        present = np.unique(self.labels)
        if present.size != self.n_classes:
            missing = sorted(set(range(self.n_classes)) - set(present.tolist()))
            raise InputError(f"classes {missing} never appear in the labels")
        clean = {}
        seen = np.zeros(n, dtype=bool)
        for name in SPLIT_NAMES:
            if name not in self.splits:
                raise InputError(f"split {name!r} missing")
            idx = np.asarray(self.splits[name], dtype=np.int64).ravel()
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise InputError(f"split {name!r} has node index out of range [0, {n})")
            if np.unique(idx).size != idx.size:
                raise InputError(f"split {name!r} contains duplicate indices")
            if np.any(seen[idx]):
                raise InputError(f"split {name!r} overlaps another split")
            seen[idx] = True
            clean[name] = idx
        self.splits = clean

    def labelled_pairs(self, split):
        """(node, class) pairs visible under the named split."""
        idx = self.splits[split]
        return np.column_stack([idx, self.labels[idx]])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.graph == other.graph
            and self.features == other.features
            and np.array_equal(self.labels, other.labels)
            and all(np.array_equal(self.splits[k], other.splits[k]) for k in SPLIT_NAMES)
        )


def load_dataset(directory):
    """Load and validate a canonical dataset directory."""
    for name in FILES:
        if not os.path.isfile(os.path.join(directory, name)):
            raise InputError(f"missing dataset file {name} in {directory}")
    labels = _read_labels(os.path.join(directory, "labels.tsv"))
    n = labels.size
    edges = graphmod.read_edge_file(os.path.join(directory, "graph.edges"))
    g = graphmod.from_edge_list(n, edges)
    features = read_feature_file(os.path.join(directory, "features.sparse"), n)
    with open(os.path.join(directory, "split.json"), encoding="utf-8") as fh:
        try:
            splits = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{directory}/split.json: {exc}") from None
    if not isinstance(splits, dict):
        raise InputError(f"{directory}/split.json: expected an object with train/val/test")
    return Dataset(graph=g, features=features, labels=labels, splits=splits)


def _read_labels(path):
    pairs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected 'node<TAB>class', got {line!r}")
            try:
                node, cls = int(parts[0]), int(parts[1])
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-integer entry in {line!r}") from None
            if node in pairs:
                raise InputError(f"{path}:{lineno}: node {node} labelled twice")
            pairs[node] = cls
    n = len(pairs)
    if n == 0:
        raise InputError(f"{path}: no labels found")
    if sorted(pairs) != list(range(n)):
        raise InputError(f"{path}: labels must cover nodes 0..{n - 1} exactly once")
    return np.asarray([pairs[i] for i in range(n)], dtype=np.int64)


def write_dataset(dataset, directory):
    """Write a dataset in canonical form (sorted, %.17g floats)."""
    os.makedirs(directory, exist_ok=True)
    for name, payload in _canonical_payloads(dataset).items():
        with open(os.path.join(directory, name), "wb") as fh:
            fh.write(payload)


def _canonical_payloads(dataset):
    g, feats = dataset.graph, dataset.features
    edge_lines = []
    for u in range(g.n_nodes):
        for v in g.neighbors(u):
            if u < v:
                edge_lines.append(f"{u}\t{v}\n")
    m = feats.matrix
    feat_lines = []
    for node in range(m.shape[0]):
        for k in range(m.indptr[node], m.indptr[node + 1]):
            feat_lines.append(f"{node}\t{m.indices[k]}\t{m.data[k]:.17g}\n")
    label_lines = [f"{n}\t{dataset.labels[n]}\n" for n in range(g.n_nodes)]
    split_obj = {name: dataset.splits[name].tolist() for name in SPLIT_NAMES}
    return {
        "graph.edges": "".join(edge_lines).encode("utf-8"),
        "features.sparse": "".join(feat_lines).encode("utf-8"),
        "labels.tsv": "".join(label_lines).encode("utf-8"),
        "split.json": (json.dumps(split_obj, sort_keys=True) + "\n").encode("utf-8"),
    }


def dataset_fingerprint(dataset):
    """Content hash over the canonical serialization (format-independent)."""
    h = hashlib.sha256()
    for name, payload in sorted(_canonical_payloads(dataset).items()):
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(payload)
    return h.hexdigest()


def restrict_to_largest_component(dataset):
    """Dataset induced on the largest connected component, plus the index map."""
    sub, mapping = graphmod.largest_connected_component(dataset.graph)
    keep = np.flatnonzero(mapping >= 0)
    feats = FeatureMatrix(dataset.features.matrix[keep], n_features=dataset.features.n_features)
    splits = {}
    for name in SPLIT_NAMES:
        old = dataset.splits[name]
        kept = old[mapping[old] >= 0]
        splits[name] = np.sort(mapping[kept])
    reduced = Dataset(graph=sub, features=feats, labels=dataset.labels[keep], splits=splits)
    return reduced, mapping


def synth_sbm(n_per_block, n_blocks, p_in, p_out, d_per_block, noise, seed):
    """Stochastic block model with block-signature features.

    Nodes in block ``b`` get ones on its ``d_per_block`` dedicated feature
    columns, plus Bernoulli(noise) flips on all other columns; labels are
    the block ids. Splits: one seeded train node per block, empty val,
    everything else test.
    """
    if n_per_block < 1 or n_blocks < 2 or d_per_block < 1:
        raise InputError("need n_per_block >= 1, n_blocks >= 2, d_per_block >= 1")
    if not (0.0 <= p_out < p_in <= 1.0):
        raise InputError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if not 0.0 <= noise <= 1.0:
        raise InputError(f"noise must be a probability, got {noise}")
    rng = np.random.default_rng(seed)
    n = n_per_block * n_blocks
    block = np.repeat(np.arange(n_blocks), n_per_block)
    iu, ju = np.triu_indices(n, k=1)
    p_edge = np.where(block[iu] == block[ju], p_in, p_out)
    chosen = rng.random(p_edge.size) < p_edge
    edges = np.column_stack([iu[chosen], ju[chosen]])
    g = graphmod.from_edge_list(n, edges)

    d = n_blocks * d_per_block
    dense = (rng.random((n, d)) < noise).astype(np.float64)
    for b in range(n_blocks):
        dense[block == b, b * d_per_block:(b + 1) * d_per_block] = 1.0
    triples = [(i, j, dense[i, j]) for i, j in zip(*np.nonzero(dense))]
    features = from_triples(n, triples, n_features=d)

    train_idx = np.asarray(
        [rng.integers(b * n_per_block, (b + 1) * n_per_block) for b in range(n_blocks)],
        dtype=np.int64,
    )
    rest = np.setdiff1d(np.arange(n), train_idx)
    splits = {"train": train_idx, "val": np.empty(0, dtype=np.int64), "test": rest}
    return Dataset(graph=g, features=features, labels=block, splits=splits)
