"""Synthetic graph generators, file formats and connected-component restriction.

File formats (all UTF-8 text, 0-based node ids):

* edges: one undirected edge per line, ``src<TAB>dst<TAB>weight``
* features: headerless CSV, one row per node
* labels: one integer per line
* splits: three lines of space-separated node ids (train, val, test)
"""

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .graph import Graph, seminorm

logger = logging.getLogger(__name__)

EDGES_FILE = "edges.tsv"
FEATURES_FILE = "features.csv"
LABELS_FILE = "labels.csv"
SPLITS_FILE = "splits.txt"


@dataclass(frozen=True)
class GeometricConfig:
    n: int = 1000
    threshold: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or not self.threshold > 0:
            raise ValueError("geometric graph needs n >= 1 and a positive threshold")


@dataclass(frozen=True)
class PlantedPartitionConfig:
    n: int = 600
    classes: int = 3
    p_in: float = 0.05
    p_out: float = 0.005
    feature_dim: int = 16
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        # p_in == p_out is allowed as a control without community structure
        if not (0 <= self.p_out <= self.p_in <= 1):
            raise ValueError("need 0 <= p_out <= p_in <= 1")
        if self.classes < 2 or self.feature_dim < self.classes:
            raise ValueError("need at least 2 classes and feature_dim >= classes")


def _symmetric_from_pairs(i, j, n, w=None):
    w = np.ones(len(i)) if w is None else np.asarray(w, dtype=np.float64)
    A = sparse.coo_matrix((w, (i, j)), shape=(n, n))
    A = (A + A.T).tocsr()
    A.sort_indices()
    return A


def random_geometric_graph(cfg):
    """Uniform points in the unit square, unit edges between pairs closer than the threshold.

    The point coordinates are attached as node features.
    """
    rng = np.random.default_rng(cfg.seed)
    pts = rng.random((cfg.n, 2))
    pairs = cKDTree(pts).query_pairs(cfg.threshold, output_type="ndarray")
    if pairs.size:
        d = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
        pairs = pairs[d < cfg.threshold]
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    else:
        pairs = np.empty((0, 2), dtype=np.int64)
    A = _symmetric_from_pairs(pairs[:, 0], pairs[:, 1], cfg.n)
    return Graph(adjacency=A, features=pts)


def quadrant_labels(points):
    """Four spatial classes for geometric graphs: the quadrant of each point."""
    return (points[:, 0] >= 0.5).astype(np.int64) + 2 * (points[:, 1] >= 0.5).astype(np.int64)


def stratified_masks(labels, rng, fractions=(0.1, 0.2, 0.7)):
    """Per-class train/val/test split with the given fractions."""
    N = labels.size
    masks = [np.zeros(N, dtype=bool) for _ in fractions]
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        cuts = np.round(np.cumsum(fractions) * idx.size).astype(int)
        start = 0
        for m, stop in zip(masks, cuts):
            m[idx[start:stop]] = True
            start = stop
    return tuple(masks)


def planted_partition_graph(cfg):
    """Balanced planted-partition graph with noisy class-prototype features.

    Node ``i`` belongs to class ``i % classes``. Features are the one-hot class
    indicator padded to ``feature_dim`` plus N(0, noise_sigma^2) noise. Masks
    split every class 10/20/70 into train/val/test.
    """
    rng = np.random.default_rng(cfg.seed)
    n, c = cfg.n, cfg.classes
    labels = np.arange(n) % c
    P = np.where(labels[:, None] == labels[None, :], cfg.p_in, cfg.p_out)
    draw = rng.random((n, n)) < P
    i, j = np.nonzero(np.triu(draw, k=1))
    A = _symmetric_from_pairs(i, j, n)
    X = np.zeros((n, cfg.feature_dim))
    X[np.arange(n), labels] = 1.0
    X += cfg.noise_sigma * rng.standard_normal(X.shape)
    train, val, test = stratified_masks(labels, rng)
    return Graph(adjacency=A, features=X, labels=labels, train_mask=train, val_mask=val, test_mask=test)


def principal_connected_component(g):
    """Restrict a graph to its largest connected component (ties: smallest node id)."""
    ncomp, comp = csgraph.connected_components(g.adjacency, directed=False)
    if ncomp == 1:
        return g
    sizes = np.bincount(comp)
    # components are numbered in order of their smallest node, so argmax breaks ties correctly
    keep = np.flatnonzero(comp == np.argmax(sizes))
    return subgraph(g, keep)


def subgraph(g, nodes):
    nodes = np.asarray(nodes)
    A = g.adjacency[nodes][:, nodes].tocsr()

    def take(a):
        return None if a is None else a[nodes]

    return Graph(
        adjacency=A,
        features=take(g.features),
        labels=take(g.labels),
        train_mask=take(g.train_mask),
        val_mask=take(g.val_mask),
        test_mask=take(g.test_mask),
    )


# sqrt of a roundoff-level quadratic form is about sqrt(eps) relative to ||x|| sqrt(lambda_max)
_ZERO_SEMINORM_RTOL = 1e-6


def _zero_seminorm(norms, X, ctx):
    scale = np.linalg.norm(X, axis=0) * np.sqrt(max(float(ctx.eigenvalues[-1]), 0.0))
    return norms <= _ZERO_SEMINORM_RTOL * scale


def random_smooth_signal(basis, ctx, seed, max_tries=10):
    """A random x = V a in the preserved subspace, scaled to ||x||_L = 1."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        x = basis.V @ rng.standard_normal(basis.K)
        norm = seminorm(x, ctx)
        if not _zero_seminorm(norm, x, ctx):
            return x / norm
    raise RuntimeError("could not draw a signal with nonzero seminorm; is the subspace in ker(L)?")


def random_smooth_signals(basis, ctx, count, seed):
    """``count`` signals as the columns of an (N, count) matrix, each of unit L-seminorm."""
    rng = np.random.default_rng(seed)
    X = basis.V @ rng.standard_normal((basis.K, count))
    norms = seminorm(X, ctx)
    if np.any(_zero_seminorm(norms, X, ctx)):
        raise RuntimeError("drew a signal with zero seminorm")
    return X / norms


# -- file formats ----------------------------------------------------------


class DatasetFormatError(ValueError):
    pass


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def _parse_edges(path):
    src, dst, wts = [], [], []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise DatasetFormatError(f"{path}:{lineno}: expected 'src<TAB>dst<TAB>weight'")
        try:
            a, b = int(parts[0]), int(parts[1])
            w = float(parts[2]) if len(parts) == 3 else 1.0
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
        if a < 0 or b < 0:
            raise DatasetFormatError(f"{path}:{lineno}: negative node id")
        if a == b:
            raise DatasetFormatError(f"{path}:{lineno}: self-loop")
        src.append(a)
        dst.append(b)
        wts.append(w)
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), np.array(wts)


def _parse_features(path):
    rows = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
        if len(rows[-1]) != len(rows[0]):
            raise DatasetFormatError(f"{path}:{lineno}: expected {len(rows[0])} columns")
    return np.array(rows, dtype=np.float64)


def _parse_labels(path):
    out = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            out.append(int(line))
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
    return np.array(out, dtype=np.int64)


def _parse_splits(path, N):
    lines = _read_lines(path)
    if len(lines) < 3:
        raise DatasetFormatError(f"{path}: expected three lines (train, val, test)")
    masks = []
    for lineno, line in enumerate(lines[:3], start=1):
        try:
            ids = np.array([int(v) for v in line.split()], dtype=np.int64)
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
        if ids.size and (ids.min() < 0 or ids.max() >= N):
            raise DatasetFormatError(f"{path}:{lineno}: node id out of range")
        m = np.zeros(N, dtype=bool)
        m[ids] = True
        masks.append(m)
    return masks


def load_dataset(edge_path, feature_path=None, label_path=None, split_path=None, num_nodes=None):
    """Assemble a Graph from the text formats described in the module docstring.

    The node count is taken from ``num_nodes``, the feature rows, the label
    count, or the largest edge endpoint, in that order, and all present
    sources must agree. A missing split file gives a graph without masks.
    """
    src, dst, w = _parse_edges(edge_path)
    X = _parse_features(feature_path) if feature_path else None
    y = _parse_labels(label_path) if label_path else None
    counts = {}
    if num_nodes is not None:
        counts["num_nodes"] = num_nodes
    if X is not None:
        counts["features"] = X.shape[0]
    if y is not None:
        counts["labels"] = y.size
    if len(set(counts.values())) > 1:
        raise DatasetFormatError(f"inconsistent node counts: {counts}")
    max_id = int(max(src.max(initial=-1), dst.max(initial=-1)))
    N = next(iter(counts.values())) if counts else max_id + 1
    if max_id >= N:
        raise DatasetFormatError(f"edge endpoint {max_id} out of range for {N} nodes")
    A = sparse.coo_matrix((w, (src, dst)), shape=(N, N)).tocsr()
    A = A.maximum(A.T).tocsr()
    A.sort_indices()
    masks = [None, None, None]
    if split_path is not None and Path(split_path).exists():
        masks = _parse_splits(split_path, N)
    elif split_path is not None or y is not None:
        warnings.warn("no split file; graph has no train/val/test masks", UserWarning)
    return Graph(adjacency=A, features=X, labels=y, train_mask=masks[0], val_mask=masks[1], test_mask=masks[2])


def load_directory(directory):
    """Load a graph saved by :func:`save_dataset`; missing optional files are skipped."""
    d = Path(directory)

    def opt(name):
        return d / name if (d / name).exists() else None

    return load_dataset(d / EDGES_FILE, opt(FEATURES_FILE), opt(LABELS_FILE), opt(SPLITS_FILE))


def save_dataset(g, directory):
    """Write ``g`` in the text formats; returns the written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    U = sparse.triu(g.adjacency, k=1).tocoo()
    order = np.lexsort((U.col, U.row))
    written = []
    with open(d / EDGES_FILE, "w", encoding="utf-8") as fh:
        for r, c, v in zip(U.row[order], U.col[order], U.data[order]):
            fh.write(f"{r}\t{c}\t{float(v)!r}\n")
    written.append(d / EDGES_FILE)
    if g.features is not None:
        with open(d / FEATURES_FILE, "w", encoding="utf-8") as fh:
            for row in g.features:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        written.append(d / FEATURES_FILE)
    if g.labels is not None:
        with open(d / LABELS_FILE, "w", encoding="utf-8") as fh:
            fh.writelines(f"{int(v)}\n" for v in g.labels)
        written.append(d / LABELS_FILE)
    if g.has_splits:
        with open(d / SPLITS_FILE, "w", encoding="utf-8") as fh:
            for m in (g.train_mask, g.val_mask, g.test_mask):
                m = np.zeros(g.num_nodes, dtype=bool) if m is None else m
                fh.write(" ".join(str(i) for i in np.flatnonzero(m)) + "\n")
        written.append(d / SPLITS_FILE)
    return written
