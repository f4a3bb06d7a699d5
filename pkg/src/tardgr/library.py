"""The retrieval resource pool: k-hop subgraphs keyed by their encodings.

Retrieval is exact squared-L2 over the keys. Distances are computed per
key with the expansion q.q + k.k - 2 k.q in 64-bit, one BLAS dot per
term, so results are reproducible scalar-for-scalar against a naive
scan; ties break by ascending index. Desk scale keeps the per-key loop
cheap, and exactness here is a contract, not an optimization target.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .checkpoint import MAGIC, load_checkpoint, save_checkpoint
from .encoder import EmbeddingTable, encode_subgraph
from .graph import DynamicGraph, Subgraph, accumulate, extract_khop

__all__ = ["SubgraphLibrary", "build_library", "l2_topk",
           "save_library", "load_library"]


@dataclass
class SubgraphLibrary:
    keys: np.ndarray            # [R x d] float32 subgraph encodings
    values: list                # Subgraph per row
    source_hash: str            # binds keys to the encoder checkpoint
    hop: int

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.float32)
        if len(self.keys) != len(self.values):
            raise ValueError(
                f"keys rows {len(self.keys)} != values {len(self.values)}")

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def centers(self) -> np.ndarray:
        return np.array([sg.central for sg in self.values], dtype=np.int64)

    @cached_property
    def _keys64(self) -> np.ndarray:
        return self.keys.astype(np.float64)

    @cached_property
    def _key_sq(self) -> np.ndarray:
        k64 = self._keys64
        return np.array([np.dot(k64[i], k64[i]) for i in range(len(k64))])

    @cached_property
    def row_of_center(self) -> dict:
        return {int(sg.central): row for row, sg in enumerate(self.values)}


def _active_centers(union) -> np.ndarray:
    """Global ids of every node appearing in the pretrain interactions,
    users first, each group ascending."""
    users = np.unique(union.edges[:, 0])
    items = np.unique(union.edges[:, 1]) + union.user_count
    return np.concatenate([users, items])


def build_library(graph: DynamicGraph, table: EmbeddingTable, k: int,
                  cap: int = 256, seed: int = 0, source_hash: str = "",
                  max_entries: int | None = None) -> SubgraphLibrary:
    """One entry per center active in the pretraining window, extracted
    over the accumulated pretrain history. With max_entries set, the
    highest-degree centers are kept (ties by ascending id)."""
    union = accumulate(graph.pretrain_snapshots())
    if union.n_edges == 0:
        raise ValueError("pretrain window has no edges to index")
    centers = _active_centers(union)
    if max_entries is not None and len(centers) > max_entries:
        degrees = np.asarray(union.adjacency.sum(axis=1)).ravel()
        order = np.lexsort((centers, -degrees[centers]))
        centers = np.sort(centers[order[:max_entries]])
    values = [extract_khop(union, int(c), k, cap=cap, seed=seed)
              for c in centers]
    keys = np.stack([encode_subgraph(table, sg) for sg in values])
    return SubgraphLibrary(keys=keys, values=values,
                           source_hash=source_hash, hop=k)


def l2_topk(library: SubgraphLibrary, query_key, K: int):
    """Exact squared-L2 top-K: list of (row index, distance), distance
    ascending, ties by ascending index."""
    if not 1 <= K <= len(library):
        raise ValueError(
            f"K={K} outside [1, library size {len(library)}]")
    q = np.asarray(query_key, dtype=np.float64).ravel()
    if q.shape[0] != library.keys.shape[1]:
        raise ValueError(f"query width {q.shape[0]} != key width "
                         f"{library.keys.shape[1]}")
    qq = np.dot(q, q)
    k64 = library._keys64
    kk = library._key_sq
    dists = np.empty(len(library), dtype=np.float64)
    for i in range(len(library)):
        d = qq + kk[i] - 2.0 * np.dot(k64[i], q)
        dists[i] = d if d > 0.0 else 0.0
    order = np.lexsort((np.arange(len(dists)), dists))[:K]
    return [(int(i), float(dists[i])) for i in order]


# ---------------------------------------------------------------------------
# persistence: checkpoint container + delta-encoded subgraph section


def _encode_deltas(values) -> str:
    out = []
    prev = None
    for v in values:
        v = int(v)
        out.append(str(v if prev is None else v - prev))
        prev = v
    return " ".join(out)


def _decode_deltas(text: str) -> list:
    out = []
    prev = 0
    for tok in text.split():
        prev = int(tok) if not out else prev + int(tok)
        out.append(prev)
    return out


def save_library(path, library: SubgraphLibrary) -> None:
    save_checkpoint(path, {"keys": library.keys},
                    meta={"source_hash": library.source_hash,
                          "hop": library.hop,
                          "entries": len(library)})
    lines = [f"SUBGRAPHS {len(library)}"]
    for sg in library.values:
        lines.append(f"S {sg.central} {sg.hop} {sg.n_nodes} {len(sg.edges)}")
        # central first, remaining ascending: deltas stay small
        lines.append(_encode_deltas(sg.nodes))
        lines.append(_encode_deltas(sg.edges.ravel()))
    with open(path, "ab") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))


def _checkpoint_extent(path) -> int:
    """Byte length of the checkpoint proper (before any appended section)."""
    with open(path, "rb") as fh:
        head = fh.read(64)
        if not head.startswith(MAGIC + b"\n"):
            raise ValueError(f"{path}: not a {MAGIC.decode()} checkpoint")
        nl = head.index(b"\n", len(MAGIC) + 1)
        size_line = head[len(MAGIC) + 1: nl].decode("ascii")
        msize = int(size_line.split()[1])
        fh.seek(nl + 1)
        manifest = fh.read(msize).decode("utf-8")
    floats = 0
    for line in manifest.splitlines():
        parts = line.split()
        if parts[0] == "array":
            shape = tuple(int(s) for s in parts[2].split("x"))
            floats = max(floats, int(parts[3])
                         + int(np.prod(shape, dtype=np.int64)))
    return nl + 1 + msize + floats * 4


def load_library(path) -> SubgraphLibrary:
    arrays, meta = load_checkpoint(path)
    extent = _checkpoint_extent(path)
    with open(path, "rb") as fh:
        fh.seek(extent)
        section = fh.read().decode("ascii")
    lines = section.splitlines()
    if not lines or not lines[0].startswith("SUBGRAPHS "):
        raise ValueError(f"{path}: missing subgraph section")
    count = int(lines[0].split()[1])
    values = []
    pos = 1
    for _ in range(count):
        _, central, hop, n_nodes, n_edges = lines[pos].split()
        nodes = _decode_deltas(lines[pos + 1])
        flat = _decode_deltas(lines[pos + 2])
        if len(nodes) != int(n_nodes) or len(flat) != 2 * int(n_edges):
            raise ValueError(f"{path}: subgraph section count mismatch "
                             f"for center {central}")
        values.append(Subgraph(
            central=int(central), nodes=np.array(nodes, dtype=np.int64),
            edges=np.array(flat, dtype=np.int64).reshape(-1, 2),
            hop=int(hop)))
        pos += 3
    lib = SubgraphLibrary(keys=arrays["keys"], values=values,
                          source_hash=meta.get("source_hash", ""),
                          hop=int(meta["hop"]))
    if len(lib) != int(meta["entries"]):
        raise ValueError(f"{path}: entry count mismatch")
    return lib
