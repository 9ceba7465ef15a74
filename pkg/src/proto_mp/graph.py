"""Graph container, adjacency normalization and homophily statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

SPLIT_TAGS = ("train", "val", "test", "none")
SEGMENTS = ("SHet", "WHet", "WHom", "SHom")
SEGMENT_BOUNDS = (0.25, 0.5, 0.75, 1.0)


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Graph:
    """A labelled node-classification graph.

    ``edges`` is the directed edge list used for message passing
    (undirected graphs carry both directions). ``raw_edges`` keeps the
    edge list as loaded, before symmetrization; homophily is measured
    over its out-neighbours. Self-loops are never stored.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray = field(default=None)
    raw_edges: np.ndarray = field(default=None)
    name: str = "graph"

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        raw = edges if self.raw_edges is None else np.asarray(self.raw_edges, dtype=np.int64).reshape(-1, 2)
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        split = np.full(self.num_nodes, "none", dtype="<U5") if self.split is None else np.asarray(self.split, dtype="<U5")
        n = self.num_nodes
        for arr, what in ((edges, "edge"), (raw, "raw edge")):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise GraphError(f"{what} endpoint outside [0, {n})")
            if arr.size and np.any(arr[:, 0] == arr[:, 1]):
                raise GraphError(f"{what} list contains self-loops")
        if feats.ndim != 2 or feats.shape[0] != n:
            raise GraphError(f"features must have {n} rows, got shape {feats.shape}")
        if labels.shape != (n,):
            raise GraphError(f"labels must have length {n}, got {labels.shape}")
        if labels.size and labels.min() < 0:
            raise GraphError("labels must be non-negative")
        if split.shape != (n,) or not np.all(np.isin(split, SPLIT_TAGS)):
            raise GraphError(f"split tags must be one of {SPLIT_TAGS} for every node")
        for arr in (edges, raw, feats, labels, split):
            arr.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "raw_edges", raw)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "split", split)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def X(self) -> Tensor:
        return Tensor(self.features)

    def mask(self, tag: str) -> np.ndarray:
        return self.split == tag

    def with_split(self, split) -> "Graph":
        return Graph(self.num_nodes, self.edges, self.features, self.labels, split, self.raw_edges, self.name)

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.num_nodes, self.num_nodes))
        if self.edges.size:
            A[self.edges[:, 0], self.edges[:, 1]] = 1.0
        return A

    def undirected_edge_count(self) -> int:
        if not self.edges.size:
            return 0
        lo = np.minimum(self.edges[:, 0], self.edges[:, 1])
        hi = np.maximum(self.edges[:, 0], self.edges[:, 1])
        return len(set(zip(lo.tolist(), hi.tolist())))


def symmetrize(edges: np.ndarray) -> np.ndarray:
    """Add reverse edges, drop self-loops and duplicates; sorted output."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    both = np.vstack([edges, edges[:, ::-1]])
    both = both[both[:, 0] != both[:, 1]]
    return np.unique(both, axis=0)


@dataclass(frozen=True)
class NormalizedAdjacency:
    matrix: Tensor
    kind: str = "plain"


def normalize_adjacency(A, kind: str = "plain") -> NormalizedAdjacency:
    """D^-1/2 (A + I) D^-1/2 with D_ii = 1 + sum_j A_ij."""
    A = A.data if isinstance(A, Tensor) else np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise GraphError(f"adjacency must be square, got shape {A.shape}")
    n = A.shape[0]
    deg = 1.0 + A.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    A_hat = inv_sqrt[:, None] * (A + np.eye(n)) * inv_sqrt[None, :]
    return NormalizedAdjacency(Tensor(A_hat), kind)


def expand_for_prototypes(A, num_prototypes: int) -> tuple[np.ndarray, np.ndarray]:
    """Block-expand A for K prototype pseudo-nodes appended after the V nodes.

    Returns (A_base, A_P): A_base keeps A in the top-left block; A_P links
    every node to every prototype (prototypes send, never receive).
    """
    A = A.data if isinstance(A, Tensor) else np.asarray(A, dtype=np.float64)
    if num_prototypes < 1:
        raise ValueError("expand_for_prototypes needs at least one prototype; skip expansion instead")
    V, K = A.shape[0], num_prototypes
    A_base = np.zeros((V + K, V + K))
    A_base[:V, :V] = A
    A_P = np.zeros((V + K, V + K))
    A_P[:V, V:] = 1.0
    return A_base, A_P


@dataclass(frozen=True)
class HomophilyStats:
    ratios: np.ndarray  # NaN for nodes without out-neighbours
    mean: float


def node_homophily(g: Graph) -> HomophilyStats:
    """Per-node fraction of out-neighbours sharing the node's label."""
    edges = g.raw_edges
    if edges.size == 0:
        raise GraphError("node homophily is undefined: every node is isolated")
    src, dst = edges[:, 0], edges[:, 1]
    same = (g.labels[src] == g.labels[dst]).astype(np.float64)
    deg = np.bincount(src, minlength=g.num_nodes).astype(np.float64)
    agree = np.bincount(src, weights=same, minlength=g.num_nodes)
    ratios = np.full(g.num_nodes, np.nan)
    has = deg > 0
    ratios[has] = agree[has] / deg[has]
    return HomophilyStats(ratios, float(ratios[has].mean()))


def edge_homophily(g: Graph) -> float:
    if g.edges.size == 0:
        raise GraphError("edge homophily is undefined for an edgeless graph")
    return float(np.mean(g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]))


def segment_by_homophily(ratios) -> np.ndarray:
    """Map ratios to SHet (<=.25), WHet (<=.5), WHom (<=.75), SHom (<=1)."""
    r = np.atleast_1d(np.asarray(ratios, dtype=np.float64))
    if np.any(np.isnan(r)) or np.any((r < 0) | (r > 1)):
        raise ValueError("homophily ratios must lie in [0, 1]")
    idx = np.searchsorted(np.asarray(SEGMENT_BOUNDS), r, side="left")
    return np.asarray(SEGMENTS, dtype="<U4")[idx]
