"""Graph bundles, on-disk format, partitioning and client shards."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .tensor import SparseMatrix

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
BUNDLE_FILES = ("meta.json", "edges.tsv", "features.f32", "labels.u16", "splits.json")


class BundleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GraphBundle:
    num_nodes: int
    num_features: int
    num_classes: int
    adjacency: SparseMatrix
    features: np.ndarray
    labels: np.ndarray
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.num_nodes
        if self.adjacency.shape != (n, n):
            raise BundleError(f"adjacency shape {self.adjacency.shape} != ({n}, {n})")
        if self.features.shape != (n, self.num_features):
            raise BundleError(f"features shape {self.features.shape} != ({n}, {self.num_features})")
        if self.labels.shape != (n,):
            raise BundleError("labels must have one entry per node")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise BundleError("label outside [0, num_classes)")
        a = self.adjacency.to_scipy()
        if (a != a.T).nnz:
            raise BundleError("adjacency must be symmetric")
        if a.diagonal().any():
            raise BundleError("self-loops must not be stored")
        splits = {}
        seen = np.zeros(n, dtype=bool)
        for name in SPLITS:
            idx = np.asarray(self.splits.get(name, ()), dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise BundleError(f"{name} split index out of range")
            if seen[idx].any() or len(np.unique(idx)) != len(idx):
                raise BundleError("splits must be pairwise disjoint")
            seen[idx] = True
            splits[name] = idx
        object.__setattr__(self, "splits", splits)

    @property
    def num_edges(self) -> int:
        return self.adjacency.nnz // 2

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an (E, 2) array with ``u < v``."""
        a = sp.triu(self.adjacency.to_scipy(), k=1).tocoo()
        order = np.lexsort((a.col, a.row))
        return np.stack([a.row[order], a.col[order]], axis=1).astype(np.int64)

    @cached_property
    def norm_adj(self) -> SparseMatrix:
        return normalize_adjacency(self)

    @cached_property
    def mean_adj(self) -> SparseMatrix:
        """Row-normalized adjacency without self-loops (isolated rows stay 0)."""
        a = self.adjacency.to_scipy()
        deg = np.asarray(a.sum(axis=1)).ravel()
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return SparseMatrix.from_scipy(sp.diags(inv) @ a)

    @cached_property
    def attention_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(src, dst) of every edge of A+I, grouped by destination row."""
        s = self.norm_adj
        return s.indices.copy(), s.row_ids()


def normalize_adjacency(g: GraphBundle) -> SparseMatrix:
    """Symmetric normalization ``D^-1/2 (A + I) D^-1/2``."""
    a = g.adjacency.to_scipy() + sp.identity(g.num_nodes, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    d = sp.diags(1.0 / np.sqrt(deg))
    return SparseMatrix.from_scipy(d @ a @ d)


def adjacency_from_edges(n: int, edges) -> SparseMatrix:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise BundleError("edge endpoint out of range")
    keep = edges[:, 0] != edges[:, 1]
    if not keep.all():
        logger.info("dropping %d self-loop entries", int((~keep).sum()))
    edges = edges[keep]
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.data[:] = 1.0  # duplicates were summed
    return SparseMatrix.from_scipy(a)


def make_bundle(features, labels, edges, splits, num_classes=None) -> GraphBundle:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, f = features.shape
    return GraphBundle(
        num_nodes=n,
        num_features=f,
        num_classes=int(num_classes if num_classes is not None else labels.max() + 1),
        adjacency=adjacency_from_edges(n, edges),
        features=features,
        labels=labels,
        splits=dict(splits),
    )


# --- on-disk format ------------------------------------------------------


def load_bundle(path) -> GraphBundle:
    path = Path(path)
    for name in BUNDLE_FILES:
        if not (path / name).is_file():
            raise BundleError(f"missing {name} in {path}")
    meta = json.loads((path / "meta.json").read_text())
    n, f, c = int(meta["num_nodes"]), int(meta["num_features"]), int(meta["num_classes"])

    text = (path / "edges.tsv").read_text().split()
    edges = np.array(text, dtype=np.int64).reshape(-1, 2) if text else np.zeros((0, 2), np.int64)

    raw = (path / "features.f32").read_bytes()
    if len(raw) != 4 * n * f:
        raise BundleError(f"features.f32 has {len(raw)} bytes, expected {4 * n * f}")
    features = np.frombuffer(raw, dtype="<f4").reshape(n, f).astype(np.float64)

    raw = (path / "labels.u16").read_bytes()
    if len(raw) != 2 * n:
        raise BundleError(f"labels.u16 has {len(raw)} bytes, expected {2 * n}")
    labels = np.frombuffer(raw, dtype="<u2").astype(np.int64)
    if n and labels.max() >= c:
        raise BundleError(f"label {labels.max()} out of range for {c} classes")

    splits = json.loads((path / "splits.json").read_text())
    return GraphBundle(
        num_nodes=n,
        num_features=f,
        num_classes=c,
        adjacency=adjacency_from_edges(n, edges),
        features=features,
        labels=labels,
        splits={k: splits.get(k, []) for k in SPLITS},
    )


def write_bundle(g: GraphBundle, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"num_nodes": g.num_nodes, "num_features": g.num_features, "num_classes": g.num_classes}
    (path / "meta.json").write_text(json.dumps(meta))
    (path / "edges.tsv").write_text("".join(f"{u}\t{v}\n" for u, v in g.edge_list()))
    (path / "features.f32").write_bytes(g.features.astype("<f4").tobytes())
    (path / "labels.u16").write_bytes(g.labels.astype("<u2").tobytes())
    (path / "splits.json").write_text(json.dumps({k: g.splits[k].tolist() for k in SPLITS}))
    return path


# --- partitioning ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: np.ndarray
    num_clients: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.size and (a.min() < 0 or a.max() >= self.num_clients):
            raise ValueError("client id out of range")
        if len(np.unique(a)) != self.num_clients:
            raise ValueError("every client must own at least one node")
        object.__setattr__(self, "assignment", a)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_clients)


def edge_cut(g: GraphBundle, p: Partition) -> int:
    e = g.edge_list()
    return int(np.sum(p.assignment[e[:, 0]] != p.assignment[e[:, 1]]))


def _check_k(g: GraphBundle, k: int) -> None:
    if k < 1:
        raise ValueError("need at least one client")
    if k > g.num_nodes:
        raise ValueError(f"cannot split {g.num_nodes} nodes into {k} nonempty parts")


def balance_bounds(n: int, k: int) -> tuple[int, int]:
    lo = max(1, int(np.ceil(0.8 * n / k - 1e-9)))
    hi = max(int(np.ceil(n / k)), int(np.floor(1.2 * n / k + 1e-9)))
    return min(lo, n // k), hi


def _bfs_dist(nbrs, sources, n) -> np.ndarray:
    dist = np.full(n, np.inf)
    q = deque()
    for s in sources:
        dist[s] = 0
        q.append(s)
    while q:
        u = q.popleft()
        for v in nbrs[u]:
            if dist[v] == np.inf:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def partition_edgecut(g: GraphBundle, k: int, seed=0, max_passes: int = 50) -> Partition:
    """Balanced low-edge-cut partition.

    Seeds are placed far apart (farthest-first by BFS distance), parts grow
    smallest-first by absorbing the frontier node with the most edges into
    the part, then a label-propagation pass moves single nodes while that
    strictly lowers the cut and keeps every part inside the balance bounds.
    """
    _check_k(g, k)
    n = g.num_nodes
    rng = np.random.default_rng(seed)
    a = g.adjacency.to_scipy()
    nbrs = [a.indices[a.indptr[i]:a.indptr[i + 1]] for i in range(n)]

    seeds = [int(rng.integers(n))]
    while len(seeds) < k:
        dist = _bfs_dist(nbrs, seeds, n)
        dist[seeds] = -1
        far = np.flatnonzero(dist == dist.max())
        seeds.append(int(rng.choice(far)))

    assign = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(k, dtype=np.int64)
    frontier: list[dict[int, int]] = [dict() for _ in range(k)]

    def claim(v, part):
        assign[v] = part
        sizes[part] += 1
        for f in frontier:
            f.pop(v, None)
        for u in nbrs[v]:
            if assign[u] == -1:
                frontier[part][u] = frontier[part].get(u, 0) + 1

    for part, s in enumerate(seeds):
        claim(s, part)
    tiebreak = rng.random(n)
    while sizes.sum() < n:
        part = int(np.argmin(sizes))
        if frontier[part]:
            def score(v):
                inside = frontier[part][v]
                outside = sum(1 for u in nbrs[v] if assign[u] not in (-1, part))
                return (inside - outside, -len(nbrs[v]), tiebreak[v])

            v = max(frontier[part], key=score)
        else:
            v = int(rng.choice(np.flatnonzero(assign == -1)))
        claim(v, part)

    lo, hi = balance_bounds(n, k)
    for _ in range(max_passes):
        moved = 0
        for v in rng.permutation(n):
            p = assign[v]
            if sizes[p] - 1 < lo or not len(nbrs[v]):
                continue
            counts = np.bincount(assign[nbrs[v]], minlength=k)
            gains = counts - counts[p]
            gains[p] = 0
            gains[sizes + 1 > hi] = 0
            q = int(np.argmax(gains))
            if gains[q] > 0:
                assign[v] = q
                sizes[p] -= 1
                sizes[q] += 1
                moved += 1
        if not moved:
            break
    return Partition(assign, k)


def partition_random(g: GraphBundle, k: int, seed=0) -> Partition:
    _check_k(g, k)
    rng = np.random.default_rng(seed)
    assign = rng.integers(0, k, size=g.num_nodes)
    first = rng.permutation(g.num_nodes)[:k]
    assign[first] = np.arange(k)
    return Partition(assign, k)


# --- shards ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GraphShard:
    client_id: int
    bundle: GraphBundle
    global_ids: np.ndarray

    def split_size(self, name: str) -> int:
        return len(self.bundle.splits[name])


def induce_shards(g: GraphBundle, p: Partition) -> list[GraphShard]:
    a = g.adjacency.to_scipy()
    shards = []
    for cid in range(p.num_clients):
        nodes = np.flatnonzero(p.assignment == cid)
        local = np.full(g.num_nodes, -1, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        splits = {}
        for name in SPLITS:
            idx = g.splits[name]
            splits[name] = local[idx[p.assignment[idx] == cid]]
        sub = GraphBundle(
            num_nodes=len(nodes),
            num_features=g.num_features,
            num_classes=g.num_classes,
            adjacency=SparseMatrix.from_scipy(a[nodes][:, nodes]),
            features=g.features[nodes],
            labels=g.labels[nodes],
            splits=splits,
        )
        shards.append(GraphShard(cid, sub, nodes))
    dropped = g.num_edges - sum(s.bundle.num_edges for s in shards)
    logger.info("induced %d shards, dropped %d cross-partition edges", len(shards), dropped)
    return shards


def write_shards(shards, out) -> list[Path]:
    out = Path(out)
    paths = []
    for s in shards:
        d = write_bundle(s.bundle, out / f"client_{s.client_id}")
        (d / "idmap.json").write_text(json.dumps(s.global_ids.tolist()))
        paths.append(d)
    return paths


def load_shard(path, client_id: int) -> GraphShard:
    path = Path(path)
    bundle = load_bundle(path)
    idmap = path / "idmap.json"
    ids = json.loads(idmap.read_text()) if idmap.exists() else list(range(bundle.num_nodes))
    return GraphShard(client_id, bundle, np.asarray(ids, dtype=np.int64))
