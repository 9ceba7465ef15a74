"""Dataset files, splits, the planted-partition generator and embedding export.

On-disk layout of a dataset directory::

    manifest.ini    [dataset] name, num_nodes, feature_dim, num_classes,
                    edges, features, labels, directed, normalize_features,
                    optional splits
    edges.tsv       src<TAB>dst per line
    features.tsv    node_id<TAB>x_1<TAB>...<TAB>x_d per line
    labels.tsv      node_id<TAB>class per line
    splits.tsv      node_id<TAB>{train,val,test,none} per line (optional)

Lines that are blank or start with ``#`` are ignored. Numbers are
written with 17 significant digits, LF line endings, UTF-8.
"""

from __future__ import annotations

import configparser
import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import SPLIT_TAGS, Graph, symmetrize

log = logging.getLogger(__name__)

DATA_DIR_ENV = "PROTO_MP_DATA_DIR"
MANIFEST_NAME = "manifest.ini"


class DataError(ValueError):
    pass


def fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    num_nodes: int
    feature_dim: int
    num_classes: int
    edges: Path
    features: Path
    labels: Path
    directed: bool = False
    normalize_features: bool = True
    splits: Path | None = None

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read(path, encoding="utf-8")
            sec = cp["dataset"]
            root = path.parent
            splits = sec.get("splits", "").strip()
            return cls(
                name=sec.get("name", root.name),
                num_nodes=sec.getint("num_nodes"),
                feature_dim=sec.getint("feature_dim"),
                num_classes=sec.getint("num_classes"),
                edges=root / sec["edges"],
                features=root / sec["features"],
                labels=root / sec["labels"],
                directed=sec.getboolean("directed", False),
                normalize_features=sec.getboolean("normalize_features", True),
                splits=root / splits if splits else None,
            )
        except (KeyError, ValueError, TypeError, configparser.Error) as e:
            raise DataError(f"{path}: bad manifest ({e})") from None

    def write(self, directory) -> Path:
        directory = Path(directory)
        cp = configparser.ConfigParser(interpolation=None)
        cp["dataset"] = {
            "name": self.name,
            "num_nodes": str(self.num_nodes),
            "feature_dim": str(self.feature_dim),
            "num_classes": str(self.num_classes),
            "edges": self.edges.name,
            "features": self.features.name,
            "labels": self.labels.name,
            "directed": str(self.directed).lower(),
            "normalize_features": str(self.normalize_features).lower(),
        }
        if self.splits is not None:
            cp["dataset"]["splits"] = self.splits.name
        out = directory / MANIFEST_NAME
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            cp.write(fh)
        return out


def resolve_dataset(ref: str) -> Path:
    """A dataset reference is a directory/manifest path or a name under $PROTO_MP_DATA_DIR."""
    p = Path(ref)
    if p.exists():
        return p
    root = os.environ.get(DATA_DIR_ENV)
    if root and (Path(root) / ref).exists():
        return Path(root) / ref
    raise DataError(f"dataset {ref!r} not found (checked path and ${DATA_DIR_ENV})")


def _rows(path: Path):
    try:
        fh = open(path, encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def _int(tok: str, path: Path, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise DataError(f"{path}:{lineno}: expected an integer, got {tok!r}") from None


def load_dataset(manifest, normalize_features: bool | None = None) -> Graph:
    """Read a dataset into a :class:`Graph`.

    Self-loops are dropped, duplicate edges removed, and the edge list is
    symmetrized for message passing (the raw directed list is kept on
    ``Graph.raw_edges``). Labels are remapped to 0..C-1 and, unless
    disabled, nonzero feature rows are divided by their L1 norm.
    """
    m = manifest if isinstance(manifest, DatasetManifest) else DatasetManifest.read(manifest)
    V, d = m.num_nodes, m.feature_dim

    X = np.zeros((V, d))
    seen = np.zeros(V, dtype=bool)
    for lineno, toks in _rows(m.features):
        if len(toks) != d + 1:
            raise DataError(f"{m.features}:{lineno}: expected {d + 1} fields, got {len(toks)}")
        i = _int(toks[0], m.features, lineno)
        if not 0 <= i < V or seen[i]:
            raise DataError(f"{m.features}:{lineno}: node id {i} out of range or repeated")
        try:
            X[i] = [float(t) for t in toks[1:]]
        except ValueError:
            raise DataError(f"{m.features}:{lineno}: non-numeric feature value") from None
        seen[i] = True
    if not seen.all():
        raise DataError(f"{m.features}: {int((~seen).sum())} of {V} nodes have no feature row")

    raw_labels = np.full(V, -1, dtype=np.int64)
    for lineno, toks in _rows(m.labels):
        if len(toks) != 2:
            raise DataError(f"{m.labels}:{lineno}: expected 2 fields, got {len(toks)}")
        i = _int(toks[0], m.labels, lineno)
        if not 0 <= i < V:
            raise DataError(f"{m.labels}:{lineno}: node id {i} out of range")
        raw_labels[i] = _int(toks[1], m.labels, lineno)
    if (raw_labels < 0).any():
        raise DataError(f"{m.labels}: missing or negative labels for {int((raw_labels < 0).sum())} nodes")
    classes, labels = np.unique(raw_labels, return_inverse=True)
    if len(classes) != m.num_classes:
        raise DataError(f"{m.labels}: found {len(classes)} classes, manifest declares {m.num_classes}")

    pairs = []
    for lineno, toks in _rows(m.edges):
        if len(toks) != 2:
            raise DataError(f"{m.edges}:{lineno}: expected 2 fields, got {len(toks)}")
        u, v = _int(toks[0], m.edges, lineno), _int(toks[1], m.edges, lineno)
        if not (0 <= u < V and 0 <= v < V):
            raise DataError(f"{m.edges}:{lineno}: endpoint outside [0, {V})")
        if u != v:
            pairs.append((u, v))
    raw = np.unique(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=0)
    edges = symmetrize(raw)
    if not m.directed:
        raw = edges

    normalize = m.normalize_features if normalize_features is None else normalize_features
    if normalize:
        X = l1_normalize_rows(X)

    split = None
    if m.splits is not None:
        split = read_split_file(m.splits, V)
    return Graph(V, edges, X, labels, split, raw, m.name)


def l1_normalize_rows(X: np.ndarray) -> np.ndarray:
    norms = np.abs(X).sum(axis=1, keepdims=True)
    return np.where(norms > 0, X / np.where(norms > 0, norms, 1.0), X)


def read_split_file(path, num_nodes: int) -> np.ndarray:
    path = Path(path)
    split = np.full(num_nodes, "none", dtype="<U5")
    for lineno, toks in _rows(path):
        if len(toks) != 2 or toks[1] not in SPLIT_TAGS:
            raise DataError(f"{path}:{lineno}: expected node_id<TAB>{{train,val,test,none}}")
        i = _int(toks[0], path, lineno)
        if not 0 <= i < num_nodes:
            raise DataError(f"{path}:{lineno}: node id {i} out of range")
        split[i] = toks[1]
    return split


def save_dataset(g: Graph, directory, name: str | None = None, with_split: bool = True) -> Path:
    """Write ``g`` in the dataset layout; the result reloads to the same Graph."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {k: directory / f"{k}.tsv" for k in ("edges", "features", "labels")}
    same = g.raw_edges.shape == g.edges.shape and np.array_equal(g.raw_edges, g.edges)
    directed = not same
    with open(paths["edges"], "w", encoding="utf-8", newline="\n") as fh:
        edges = g.raw_edges if directed else g.edges[g.edges[:, 0] < g.edges[:, 1]]
        fh.writelines(f"{u}\t{v}\n" for u, v in edges.tolist())
    with open(paths["features"], "w", encoding="utf-8", newline="\n") as fh:
        for i, row in enumerate(g.features):
            fh.write(str(i) + "\t" + "\t".join(fmt(x) for x in row) + "\n")
    with open(paths["labels"], "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{i}\t{c}\n" for i, c in enumerate(g.labels.tolist()))
    split_path = None
    if with_split and np.any(g.split != "none"):
        split_path = directory / "splits.tsv"
        with open(split_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(f"{i}\t{t}\n" for i, t in enumerate(g.split.tolist()))
    m = DatasetManifest(name or g.name, g.num_nodes, g.feature_dim, g.num_classes,
                        paths["edges"], paths["features"], paths["labels"],
                        directed=directed, normalize_features=False, splits=split_path)
    return m.write(directory)


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    mode: str = "random_fraction"
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.mode not in ("random_fraction", "fixed_file"):
            raise ValueError(f"split mode must be random_fraction or fixed_file, got {self.mode!r}")
        if self.mode == "random_fraction":
            if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
                raise ValueError("split fractions must be three positive numbers")
            if abs(sum(self.fractions) - 1.0) > 1e-9:
                raise ValueError(f"split fractions sum to {sum(self.fractions)}, not 1")


def make_split(g: Graph, spec: SplitSpec) -> Graph:
    """Tag nodes train/val/test.

    ``fixed_file`` reads ``spec.path``, or keeps the dataset's own split
    tags when no path is given. ``random_fraction`` is stratified by class: nodes are shuffled within
    their class and interleaved by relative position, so every prefix of
    the ordering keeps class proportions to within one node.
    """
    if spec.mode == "fixed_file":
        if spec.path:
            return g.with_split(read_split_file(spec.path, g.num_nodes))
        if not np.any(g.split != "none"):
            raise DataError(f"{g.name}: fixed_file split without a path needs a dataset splits file")
        return g
    n = g.num_nodes
    rng = np.random.default_rng(spec.seed)
    counts = np.bincount(g.labels, minlength=g.num_classes)
    if np.any(counts[counts > 0] < 3):
        warnings.warn("a class has fewer than 3 nodes; falling back to an unstratified split", stacklevel=2)
        order = rng.permutation(n)
    else:
        pos = np.empty(n)
        for c in range(g.num_classes):
            members = np.flatnonzero(g.labels == c)
            if members.size == 0:
                continue
            members = rng.permutation(members)
            pos[members] = (np.arange(members.size) + rng.random()) / members.size
        order = np.lexsort((np.arange(n), pos))
    n_train = int(round(spec.fractions[0] * n))
    n_val = int(round(spec.fractions[1] * n))
    split = np.full(n, "test", dtype="<U5")
    split[order[:n_train]] = "train"
    split[order[n_train:n_train + n_val]] = "val"
    return g.with_split(split)


# --------------------------------------------------------------------------
# Synthetic graphs
# --------------------------------------------------------------------------

def generate_planted_partition(n: int, classes: int, h_target: float, d0: int, feature_noise: float,
                               seed: int = 0, mean_degree: float = 10.0) -> Graph:
    """Random graph whose expected within-class edge fraction is ``h_target``.

    Labels are balanced. Pairs are linked independently with probability
    p_in (same class) or p_out (different class), solved so the expected
    mean degree is ``mean_degree``. Features are an orthonormal class
    mean plus isotropic Gaussian noise scaled by ``feature_noise``.
    """
    if not 0.0 <= h_target <= 1.0:
        raise ValueError(f"h_target must lie in [0, 1], got {h_target}")
    if classes < 2 or n < 4 * classes:
        raise ValueError(f"need classes >= 2 and n >= 4*classes, got n={n}, classes={classes}")
    if d0 < classes:
        raise ValueError(f"feature dim {d0} cannot hold {classes} orthogonal class means")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    sizes = np.bincount(labels, minlength=classes)
    within_pairs = float((sizes * (sizes - 1) // 2).sum())
    cross_pairs = n * (n - 1) / 2 - within_pairs
    m = n * mean_degree / 2
    p_in = h_target * m / within_pairs
    p_out = (1.0 - h_target) * m / cross_pairs
    if p_in > 1.0 or p_out > 1.0:
        raise ValueError(f"mean degree {mean_degree} infeasible at h={h_target} (p_in={p_in:.3f}, p_out={p_out:.3f})")

    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    keep = rng.random(iu.size) < np.where(same, p_in, p_out)
    edges = symmetrize(np.column_stack([iu[keep], ju[keep]]))

    means, _ = np.linalg.qr(rng.standard_normal((d0, classes)))
    X = means.T[labels] + feature_noise * rng.standard_normal((n, d0))
    return Graph(n, edges, X, labels, name=f"planted-n{n}-c{classes}-h{h_target:g}-s{seed}")


# --------------------------------------------------------------------------
# Embedding export
# --------------------------------------------------------------------------

def export_embeddings(g: Graph, embeddings, path) -> Path:
    """Write node_id, label, split and the embedding columns as TSV with a header."""
    emb = embeddings.penultimate() if hasattr(embeddings, "penultimate") else np.asarray(embeddings)
    if emb.shape[0] != g.num_nodes:
        raise ValueError(f"embedding rows {emb.shape[0]} != nodes {g.num_nodes}")
    path = Path(path)
    try:
        fh = open(path, "w", encoding="utf-8", newline="\n")
    except OSError as e:
        raise DataError(f"cannot write embeddings to {path}: {e.strerror}") from None
    with fh:
        fh.write("\t".join(["node_id", "label", "split"] + [f"h{j}" for j in range(emb.shape[1])]) + "\n")
        for i in range(g.num_nodes):
            fields = [str(i), str(int(g.labels[i])), str(g.split[i])] + [fmt(x) for x in emb[i]]
            fh.write("\t".join(fields) + "\n")
    return path


def read_embeddings(path) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`export_embeddings`: (header, labels, splits, values)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    labels = np.array([int(r[1]) for r in rows])
    splits = np.array([r[2] for r in rows])
    values = np.array([[float(x) for x in r[3:]] for r in rows])
    return header, labels, splits, values
