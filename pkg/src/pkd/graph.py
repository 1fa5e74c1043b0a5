"""Text-attributed graph data model, synthetic generation, splits, statistics.

Graphs are undirected, stored as a canonical edge list (u < v, sorted, no
duplicates, no self-loops). Dense matrices are used throughout; the library
targets desk-scale graphs (N up to a couple of thousand nodes).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

GRAPH_KEYS = ("n", "c", "edges", "features", "labels", "texts")


def subseed(seed: int, *tags: int) -> int:
    """Stable derived seed for a pipeline stage, mixed via SeedSequence."""
    return int(np.random.SeedSequence((int(seed),) + tuple(int(t) for t in tags)).generate_state(1)[0])


@dataclass
class TagGraph:
    """Undirected text-attributed graph: nodes, edges, features, labels, texts."""

    n: int
    c: int
    edges: np.ndarray          # (E, 2) int, canonical u < v, lexicographically sorted
    features: np.ndarray       # (N, F) float64
    labels: np.ndarray         # (N,) int in [0, C)
    texts: list[str]
    _ops: "GraphOperators | None" = field(default=None, repr=False, compare=False)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def edge_count(self) -> int:
        return self.edges.shape[0]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        if self.edge_count:
            np.add.at(deg, self.edges[:, 0], 1)
            np.add.at(deg, self.edges[:, 1], 1)
        return deg

    def neighbor_lists(self) -> list[np.ndarray]:
        """Sorted neighbor ids per node."""
        nbrs: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            nbrs[u].append(int(v))
            nbrs[v].append(int(u))
        return [np.array(sorted(b), dtype=np.int64) for b in nbrs]

    def operators(self) -> "GraphOperators":
        """Dense aggregation operators, built once and cached on the graph."""
        if self._ops is None:
            self._ops = GraphOperators.build(self)
        return self._ops


@dataclass
class GraphOperators:
    """Precomputed dense operators shared by the model forward passes."""

    a_hat: np.ndarray       # sym-normalized adjacency with self-loops
    a_hat_x: np.ndarray     # a_hat @ features, cached for the common GCN path
    hop1_mean: np.ndarray   # row-normalized 1-hop adjacency (no self)
    hop2_mean: np.ndarray   # row-normalized exact-2-hop adjacency
    att_mask: np.ndarray    # bool (N, N), neighbors plus self

    @staticmethod
    def build(g: TagGraph) -> "GraphOperators":
        a = adjacency_matrix(g)
        a_hat = _sym_normalize(a + np.eye(g.n))
        hop2 = (a @ a > 0) & (a == 0) & ~np.eye(g.n, dtype=bool)
        return GraphOperators(
            a_hat=a_hat,
            a_hat_x=a_hat @ g.features,
            hop1_mean=_row_mean_normalize(a),
            hop2_mean=_row_mean_normalize(hop2.astype(np.float64)),
            att_mask=(a > 0) | np.eye(g.n, dtype=bool),
        )


@dataclass
class Split:
    """Disjoint train/validation/test node index sets."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def pool(self, n: int) -> np.ndarray:
        """Selection pool: every node outside train, validation, and test."""
        taken = np.zeros(n, dtype=bool)
        taken[self.train] = True
        taken[self.val] = True
        taken[self.test] = True
        return np.flatnonzero(~taken)


@dataclass
class SbmConfig:
    """Stochastic-block-model generator settings."""

    node_count: int = 300
    class_count: int = 5
    p_in: float = 0.1
    p_out: float = 0.01
    feature_dim: int = 32
    separation: float = 1.0
    noise_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.p_out <= self.p_in <= 1.0):
            raise ValueError(f"need 0 <= p_out <= p_in <= 1, got p_in={self.p_in}, p_out={self.p_out}")
        if self.feature_dim < self.class_count:
            raise ValueError(f"feature_dim must be >= class_count for orthonormal class centers, "
                             f"got {self.feature_dim} < {self.class_count}")
        if self.node_count < 1 or self.class_count < 2:
            raise ValueError(f"need node_count >= 1 and class_count >= 2, got {self.node_count}, {self.class_count}")


def build_graph(edges, features, labels, texts=None, class_count=None) -> TagGraph:
    """Validate and canonicalize raw inputs into a TagGraph.

    Edges are deduplicated and stored with u < v in sorted order; self-loops
    and out-of-range endpoints are rejected.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2:
        raise ValueError(f"features must be 2-d, got shape {features.shape}")
    n = features.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels length {labels.shape} does not match {n} nodes")
    if texts is None:
        texts = [""] * n
    texts = [str(t) for t in texts]
    if len(texts) != n:
        raise ValueError(f"texts length {len(texts)} does not match {n} nodes")
    if labels.size and labels.min() < 0:
        raise ValueError("negative label")
    c = int(class_count) if class_count is not None else int(labels.max()) + 1 if labels.size else 2
    if c < 2:
        raise ValueError(f"class_count must be >= 2, got {c}")
    if labels.size and labels.max() >= c:
        raise ValueError(f"label {labels.max()} out of range for {c} classes")

    edge_arr = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    if edge_arr.size:
        if edge_arr.min() < 0 or edge_arr.max() >= n:
            raise ValueError(f"edge endpoint out of range [0, {n})")
        if np.any(edge_arr[:, 0] == edge_arr[:, 1]):
            raise ValueError("self-loop in edge list")
        lo = np.minimum(edge_arr[:, 0], edge_arr[:, 1])
        hi = np.maximum(edge_arr[:, 0], edge_arr[:, 1])
        edge_arr = np.unique(np.stack([lo, hi], axis=1), axis=0)
    else:
        edge_arr = np.zeros((0, 2), dtype=np.int64)
    return TagGraph(n=n, c=c, edges=edge_arr, features=features, labels=labels, texts=texts)


def sbm_class_names(c: int) -> list[str]:
    """Canonical class names used by synthetic texts and prompt rendering."""
    return [f"subject-{k}" for k in range(c)]


def generate_sbm(cfg: SbmConfig) -> TagGraph:
    """Deterministic stochastic-block-model graph with Gaussian-mixture features.

    Nodes are split across classes as evenly as possible. Features sit around
    per-class centers (random orthonormal directions scaled by `separation`)
    with isotropic noise. Texts are templated strings embedding the class name
    so annotators and prompt renderers have material to work with.
    """
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 91)))
    n, c, f = cfg.node_count, cfg.class_count, cfg.feature_dim

    sizes = [n // c + (1 if k < n % c else 0) for k in range(c)]
    labels = np.repeat(np.arange(c), sizes)

    # Upper-triangle Bernoulli draws; probability picked per same/cross block.
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    p = np.where(same, cfg.p_in, cfg.p_out)
    keep = rng.random(iu.size) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    # Orthonormal class centers via QR of a random Gaussian matrix.
    basis, _ = np.linalg.qr(rng.standard_normal((f, max(c, 2))))
    centers = cfg.separation * basis[:, :c].T
    features = centers[labels] + cfg.noise_scale * rng.standard_normal((n, f))

    names = sbm_class_names(c)
    fillers = rng.integers(0, 9999, size=n)
    texts = [f"topic {names[labels[i]]} document {i} entry {fillers[i]:04d}" for i in range(n)]
    return build_graph(edges, features, labels, texts, class_count=c)


def homophily_ratio(g: TagGraph) -> float:
    """Fraction of edges whose endpoints share a label."""
    if g.edge_count == 0:
        raise ValueError("homophily_ratio needs at least one edge")
    same = g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]
    return float(np.mean(same))


def split_nodes(g: TagGraph, labels_per_class: int, val_frac: float, test_frac: float, seed: int) -> Split:
    """Stratified few-shot split: exactly labels_per_class train nodes per class.

    Validation and test sizes are floor(frac * N) drawn from the non-train
    remainder; everything left over is the unlabeled pool.
    """
    if labels_per_class < 1:
        raise ValueError(f"labels_per_class must be >= 1, got {labels_per_class}")
    if val_frac < 0 or test_frac < 0 or val_frac + test_frac >= 1:
        raise ValueError(f"val_frac + test_frac must stay below 1, got {val_frac} + {test_frac}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    train: list[int] = []
    for k in range(g.c):
        members = np.flatnonzero(g.labels == k)
        if members.size < labels_per_class:
            raise ValueError(f"class {k} has {members.size} nodes, needs {labels_per_class}")
        train.extend(rng.permutation(members)[:labels_per_class].tolist())
    train_arr = np.sort(np.array(train, dtype=np.int64))

    rest = np.setdiff1d(np.arange(g.n), train_arr)
    rest = rng.permutation(rest)
    n_val = int(np.floor(val_frac * g.n))
    n_test = int(np.floor(test_frac * g.n))
    if n_val + n_test > rest.size:
        raise ValueError(f"split fractions leave no room: {n_val}+{n_test} > {rest.size} non-train nodes")
    val = np.sort(rest[:n_val].astype(np.int64))
    test = np.sort(rest[n_val:n_val + n_test].astype(np.int64))
    return Split(train=train_arr, val=val, test=test)


def adjacency_matrix(g: TagGraph) -> np.ndarray:
    """Dense symmetric 0/1 adjacency without self-loops."""
    a = np.zeros((g.n, g.n), dtype=np.float64)
    if g.edge_count:
        a[g.edges[:, 0], g.edges[:, 1]] = 1.0
        a[g.edges[:, 1], g.edges[:, 0]] = 1.0
    return a


def normalized_adjacency(g: TagGraph) -> np.ndarray:
    """Symmetric degree-normalized adjacency with self-loops added."""
    return _sym_normalize(adjacency_matrix(g) + np.eye(g.n))


def _sym_normalize(a: np.ndarray) -> np.ndarray:
    deg = a.sum(axis=1)
    inv_sqrt = np.where(deg > 0, deg, 1.0) ** -0.5
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def _row_mean_normalize(a: np.ndarray) -> np.ndarray:
    deg = a.sum(axis=1, keepdims=True)
    return a / np.where(deg > 0, deg, 1.0)


def save_graph(g: TagGraph, path) -> None:
    """Write the UTF-8 JSON graph format (full float precision)."""
    payload = {
        "n": g.n,
        "c": g.c,
        "edges": [[int(u), int(v)] for u, v in g.edges],
        "features": [[float(x) for x in row] for row in g.features],
        "labels": [int(y) for y in g.labels],
        "texts": list(g.texts),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, separators=(",", ":"))


def load_graph(path) -> TagGraph:
    """Load the JSON graph format; unknown keys are rejected."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise ValueError("graph file must contain a JSON object")
    unknown = set(payload) - set(GRAPH_KEYS)
    if unknown:
        raise ValueError(f"unknown graph keys: {sorted(unknown)}")
    missing = set(GRAPH_KEYS) - set(payload)
    if missing:
        raise ValueError(f"missing graph keys: {sorted(missing)}")
    g = build_graph(payload["edges"], payload["features"], payload["labels"],
                    payload["texts"], class_count=payload["c"])
    if g.n != int(payload["n"]):
        raise ValueError(f"declared n={payload['n']} but found {g.n} feature rows")
    return g
