"""Temporal bipartite graphs and the subgraph primitives built on them.

Nodes live in one global id space per dynamic graph: user u is node u,
item i is node user_count + i. Snapshots store undirected user-item
edges; self-loops never appear in storage, the (A+I) identity term is
added only inside row-stochastic propagation.

Graphs are immutable after construction by convention: no method
mutates edges or counts, so concurrent reads are safe.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .tensor import Tensor, record_op

__all__ = [
    "SnapshotGraph",
    "DynamicGraph",
    "Subgraph",
    "extract_khop",
    "normalized_propagate",
    "fuse_subgraphs",
    "edge_perturb",
    "build_dynamic",
    "accumulate",
    "parse_granularity",
    "read_interactions",
    "write_manifest",
    "read_manifest",
    "verify_manifest",
]

GRANULARITIES = {"daily": 86_400, "weekly": 604_800}


def parse_granularity(value) -> int:
    if isinstance(value, str) and value in GRANULARITIES:
        return GRANULARITIES[value]
    seconds = int(value)
    if seconds <= 0:
        raise ValueError(f"granularity must be positive, got {value!r}")
    return seconds


def _canonical_edges(edges, user_count: int, item_count: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if arr.size:
        if arr[:, 0].min() < 0 or arr[:, 0].max() >= user_count:
            raise ValueError(
                f"user id out of range for user_count={user_count}")
        if arr[:, 1].min() < 0 or arr[:, 1].max() >= item_count:
            raise ValueError(
                f"item id out of range for item_count={item_count}")
        arr = np.unique(arr, axis=0)
    return arr


@dataclass
class SnapshotGraph:
    """One time step of the interaction sequence."""

    time_index: int
    user_count: int
    item_count: int
    edges: np.ndarray  # [E, 2] (user, item), sorted, deduplicated

    def __post_init__(self):
        self.edges = _canonical_edges(self.edges, self.user_count,
                                      self.item_count)

    @property
    def n_nodes(self) -> int:
        return self.user_count + self.item_count

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def item_node(self, item_id: int) -> int:
        return self.user_count + item_id

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric adjacency over global node ids (users then items)."""
        n = self.n_nodes
        if not len(self.edges):
            return sparse.csr_matrix((n, n), dtype=np.float64)
        u = self.edges[:, 0]
        v = self.edges[:, 1] + self.user_count
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        data = np.ones(len(rows), dtype=np.float64)
        return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))

    @cached_property
    def user_items(self) -> dict:
        """user id -> sorted array of interacted item ids."""
        out: dict = {}
        for u, i in self.edges:
            out.setdefault(int(u), []).append(int(i))
        return {u: np.array(sorted(items), dtype=np.int64)
                for u, items in out.items()}


@dataclass
class DynamicGraph:
    """Time-ordered snapshots plus the pretrain/fine-tune split."""

    snapshots: list
    pretrain_split: int
    user_ids: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    item_ids: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def __post_init__(self):
        times = [s.time_index for s in self.snapshots]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"snapshot time indices not increasing: {times}")
        if not 0 < self.pretrain_split < len(self.snapshots):
            raise ValueError(
                f"pretrain_split {self.pretrain_split} outside "
                f"(0, {len(self.snapshots)})")

    @property
    def user_count(self) -> int:
        return self.snapshots[0].user_count

    @property
    def item_count(self) -> int:
        return self.snapshots[0].item_count

    def pretrain_snapshots(self) -> list:
        return self.snapshots[: self.pretrain_split]

    def test_snapshots(self) -> list:
        return self.snapshots[self.pretrain_split:]

    def history_until(self, position: int) -> SnapshotGraph:
        """Union of snapshots strictly before list position `position`."""
        return accumulate(self.snapshots[:position])


def accumulate(snapshots: Sequence[SnapshotGraph]) -> SnapshotGraph:
    """Union the edge sets of consecutive snapshots into one graph."""
    if not snapshots:
        raise ValueError("accumulate: no snapshots")
    edges = np.concatenate([s.edges for s in snapshots]) \
        if any(s.n_edges for s in snapshots) else np.empty((0, 2), np.int64)
    return SnapshotGraph(time_index=snapshots[-1].time_index,
                         user_count=snapshots[0].user_count,
                         item_count=snapshots[0].item_count,
                         edges=edges)


@dataclass
class Subgraph:
    """A k-hop neighborhood in local coordinates.

    nodes maps local id -> global id; the central node is local 0.
    edges are local (a, b) pairs with a < b, sorted, deduplicated.
    """

    central: int
    nodes: np.ndarray
    edges: np.ndarray
    hop: int

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if not len(self.nodes) or self.nodes[0] != self.central:
            raise ValueError("subgraph central must be local node 0")
        if len(self.edges):
            if self.edges.max() >= len(self.nodes) or self.edges.min() < 0:
                raise ValueError("subgraph edge references missing node")
            if np.any(self.edges[:, 0] >= self.edges[:, 1]):
                raise ValueError("subgraph edges must satisfy a < b")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @cached_property
    def local_adjacency(self) -> sparse.csr_matrix:
        n = self.n_nodes
        if not len(self.edges):
            return sparse.csr_matrix((n, n), dtype=np.float64)
        a, b = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([a, b])
        cols = np.concatenate([b, a])
        return sparse.csr_matrix(
            (np.ones(len(rows), dtype=np.float64), (rows, cols)),
            shape=(n, n))

    def global_edges(self) -> set:
        pairs = self.nodes[self.edges]
        return {(int(min(a, b)), int(max(a, b))) for a, b in pairs}


def _canonical_subgraph(central: int, node_set, edge_set, hop: int) -> Subgraph:
    rest = sorted(n for n in node_set if n != central)
    nodes = np.array([central] + rest, dtype=np.int64)
    local = {int(g): i for i, g in enumerate(nodes)}
    pairs = sorted((min(local[a], local[b]), max(local[a], local[b]))
                   for a, b in edge_set)
    edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return Subgraph(central=central, nodes=nodes, edges=edges, hop=hop)


def extract_khop(graph: SnapshotGraph, center: int, k: int,
                 cap: int = 256, seed: int = 0) -> Subgraph:
    """BFS closure of radius k around `center`, induced edges included.

    When a BFS level would push the node count past `cap`, that level's
    new nodes are sampled uniformly (seeded, deterministic) to fill the
    remaining budget and expansion stops. An isolated center yields the
    singleton subgraph.
    """
    if not 0 <= center < graph.n_nodes:
        raise ValueError(f"center {center} outside graph with "
                         f"{graph.n_nodes} nodes")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    adj = graph.adjacency
    selected = [center]
    seen = {center}
    frontier = [center]
    truncated = False
    for _ in range(k):
        if truncated or not frontier:
            break
        nxt = set()
        for node in frontier:
            nxt.update(adj.indices[adj.indptr[node]: adj.indptr[node + 1]])
        fresh = sorted(int(n) for n in nxt if n not in seen)
        if not fresh:
            break
        budget = cap - len(selected)
        if budget <= 0:
            break
        if len(fresh) > budget:
            rng = np.random.default_rng([seed, center])
            fresh = sorted(rng.choice(fresh, size=budget, replace=False))
            truncated = True
        selected.extend(fresh)
        seen.update(fresh)
        frontier = fresh
    rest = sorted(n for n in selected if n != center)
    nodes = np.array([center] + rest, dtype=np.int64)
    induced = adj[nodes][:, nodes].tocoo()
    pairs = sorted({(int(min(r, c)), int(max(r, c)))
                    for r, c in zip(induced.row, induced.col)})
    return Subgraph(central=center, nodes=nodes,
                    edges=np.array(pairs, dtype=np.int64).reshape(-1, 2),
                    hop=k)


def fuse_subgraphs(q: Subgraph, r: Subgraph) -> Subgraph:
    """Union of two subgraphs plus one undirected edge joining their
    central nodes (omitted when the centrals coincide). The fused graph
    keeps q's central."""
    node_set = set(int(n) for n in q.nodes) | set(int(n) for n in r.nodes)
    edge_set = q.global_edges() | r.global_edges()
    if q.central != r.central:
        a, b = sorted((q.central, r.central))
        edge_set.add((a, b))
    return _canonical_subgraph(q.central, node_set, edge_set,
                               max(q.hop, r.hop))


def edge_perturb(graph: SnapshotGraph, drop_rate: float,
                 seed: int) -> SnapshotGraph:
    """Keep each edge independently with probability 1 - drop_rate.

    drop_rate follows the configuration convention: it is the fraction
    removed, not the Bernoulli keep parameter.
    """
    if not 0.0 <= drop_rate <= 1.0:
        raise ValueError(f"drop_rate must be in [0, 1], got {drop_rate}")
    rng = np.random.default_rng(seed)
    keep = rng.random(graph.n_edges) >= drop_rate
    return SnapshotGraph(time_index=graph.time_index,
                         user_count=graph.user_count,
                         item_count=graph.item_count,
                         edges=graph.edges[keep])


def _propagate_arrays(adjacency: sparse.spmatrix, x64: np.ndarray,
                      mode: str, keep_isolated: bool):
    """Shared forward/vjp math in float64. Returns (out, vjp)."""
    a = adjacency.tocsr().astype(np.float64)
    n = a.shape[0]
    if mode == "row-stochastic":
        deg = np.asarray(a.sum(axis=1)).ravel() + 1.0
        a_plus = a + sparse.identity(n, format="csr", dtype=np.float64)
        out = (a_plus @ x64) / deg[:, None]

        def vjp(g64):
            return a_plus.T @ (g64 / deg[:, None])

        return out, vjp
    if mode == "symmetric":
        deg = np.asarray(a.sum(axis=1)).ravel()
        dinv = np.zeros(n, dtype=np.float64)
        nz = deg > 0
        dinv[nz] = 1.0 / np.sqrt(deg[nz])
        mask = (~nz).astype(np.float64)[:, None] if keep_isolated else None
        out = dinv[:, None] * (a @ (dinv[:, None] * x64))
        if mask is not None:
            out = out + mask * x64

        def vjp(g64):
            gx = dinv[:, None] * (a.T @ (dinv[:, None] * g64))
            if mask is not None:
                gx = gx + mask * g64
            return gx

        return out, vjp
    raise ValueError(f"unknown propagation mode {mode!r}")


def normalized_propagate(adjacency: sparse.spmatrix, features,
                         mode: str, keep_isolated: bool = False):
    """One step of degree-normalized message passing.

    row-stochastic: D^-1 (A+I) X, D the degree matrix of A+I. Preserves
    constant columns exactly.
    symmetric: D^-1/2 A D^-1/2 X; zero-degree rows yield zeros unless
    keep_isolated passes their features through unchanged (the encoder
    uses that so inactive nodes retain their embeddings).

    `features` may be a plain array or a taped Tensor; the op is
    differentiable in the latter case.
    """
    is_tensor = isinstance(features, Tensor)
    data = features.data if is_tensor else np.asarray(features)
    if data.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {data.shape}")
    if adjacency.shape[0] != adjacency.shape[1]:
        raise ValueError(f"adjacency must be square, got {adjacency.shape}")
    if adjacency.shape[0] != data.shape[0]:
        raise ValueError(
            f"feature rows {data.shape[0]} != node count {adjacency.shape[0]}")
    out64, vjp64 = _propagate_arrays(adjacency, data.astype(np.float64),
                                     mode, keep_isolated)
    out = out64.astype(data.dtype)
    if not is_tensor:
        return out

    def vjp(g):
        return (vjp64(g.astype(np.float64)).astype(g.dtype),)

    return record_op("propagate", out, (features,), vjp)


# ---------------------------------------------------------------------------
# construction from an interaction stream


def build_dynamic(interactions, granularity, split: int) -> DynamicGraph:
    """Bucket a (user, item, timestamp) stream into snapshot graphs.

    Ids are compacted to contiguous ranges (ascending raw order); the
    raw-id maps ride along on the DynamicGraph. Duplicate (user, item)
    events within one bucket collapse to a single edge. Empty buckets
    between occupied ones are dropped; snapshot time indices are the
    occupied bucket ordinals.
    """
    arr = np.asarray(list(interactions) if not isinstance(
        interactions, np.ndarray) else interactions, dtype=np.int64)
    if arr.size == 0:
        raise ValueError("interaction stream is empty")
    arr = arr.reshape(-1, 3)
    seconds = parse_granularity(granularity)
    user_ids = np.unique(arr[:, 0])
    item_ids = np.unique(arr[:, 1])
    u_compact = {int(raw): i for i, raw in enumerate(user_ids)}
    i_compact = {int(raw): i for i, raw in enumerate(item_ids)}
    ts = arr[:, 2]
    bucket = (ts - ts.min()) // seconds
    snapshots = []
    for t_idx, b in enumerate(np.unique(bucket)):
        rows = arr[bucket == b]
        edges = np.array([[u_compact[int(u)], i_compact[int(i)]]
                          for u, i, _ in rows], dtype=np.int64)
        snapshots.append(SnapshotGraph(time_index=int(t_idx),
                                       user_count=len(user_ids),
                                       item_count=len(item_ids),
                                       edges=edges))
    return DynamicGraph(snapshots=snapshots, pretrain_split=split,
                        user_ids=user_ids, item_ids=item_ids)


def read_interactions(path) -> np.ndarray:
    """Parse the interaction file: one `user_id,item_id,timestamp` record
    per line, all integers. Blank lines are ignored; anything else is an
    error naming the line."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 3 comma-separated fields")
            try:
                rows.append([int(p) for p in parts])
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: non-integer field in {line!r}") from None
    if not rows:
        raise ValueError(f"{path}: no interaction records")
    return np.array(rows, dtype=np.int64)


def _idmap_checksum(ids: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(
        ids.astype("<i8")).tobytes()).hexdigest()


def write_manifest(path, dg: DynamicGraph, granularity) -> None:
    lines = [
        f"snapshots {len(dg.snapshots)}",
        f"granularity {parse_granularity(granularity)}",
        f"split {dg.pretrain_split}",
        f"users {dg.user_count}",
        f"items {dg.item_count}",
        f"user_map_sha256 {_idmap_checksum(dg.user_ids)}",
        f"item_map_sha256 {_idmap_checksum(dg.item_ids)}",
    ]
    for s in dg.snapshots:
        lines.append(f"snapshot {s.time_index} edges {s.n_edges}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out: dict = {"snapshots_detail": []}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "snapshot":
                out["snapshots_detail"].append(
                    (int(parts[1]), int(parts[3])))
            elif parts[0] in ("user_map_sha256", "item_map_sha256"):
                out[parts[0]] = parts[1]
            else:
                out[parts[0]] = int(parts[1])
    return out


def verify_manifest(dg: DynamicGraph, manifest: dict) -> None:
    """Raise when a rebuilt graph disagrees with a stored manifest."""
    checks = [
        ("snapshots", len(dg.snapshots)),
        ("split", dg.pretrain_split),
        ("users", dg.user_count),
        ("items", dg.item_count),
        ("user_map_sha256", _idmap_checksum(dg.user_ids)),
        ("item_map_sha256", _idmap_checksum(dg.item_ids)),
    ]
    for key, actual in checks:
        if manifest.get(key) != actual:
            raise ValueError(f"manifest mismatch on {key}: stored "
                             f"{manifest.get(key)!r}, rebuilt {actual!r}")
    detail = [(s.time_index, s.n_edges) for s in dg.snapshots]
    if manifest.get("snapshots_detail") != detail:
        raise ValueError("manifest mismatch on per-snapshot edge counts")
