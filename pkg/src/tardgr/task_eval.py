"""Automatic task-relevance labeling.

A candidate subgraph is scored by how much fusing it into a query
subgraph moves the query's encoding toward the query's positive set:
C_r = Sim_after - Sim_before, where Sim is mean cosine similarity to
the positives' encodings and the fused graph is re-encoded at the
query's own center. Thresholding C_r yields beneficial / irrelevant /
harmful labels, and the emitted rows form the relevance model's
training set.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .encoder import EmbeddingTable, encode_subgraph
from .graph import DynamicGraph, SnapshotGraph, Subgraph, accumulate, \
    extract_khop, fuse_subgraphs
from .library import SubgraphLibrary, l2_topk
from .seeds import stream_rng

__all__ = [
    "LABELS",
    "TaskTriple",
    "PositiveSet",
    "classify",
    "positive_set",
    "sim_to_positives",
    "delta_rel",
    "build_task_dataset",
    "write_task_dataset",
    "read_task_dataset",
]

log = logging.getLogger(__name__)

LABELS = ("beneficial", "irrelevant", "harmful")


def classify(c_r: float, eps: float) -> str:
    if c_r > eps:
        return "beneficial"
    if c_r < -eps:
        return "harmful"
    return "irrelevant"


@dataclass
class TaskTriple:
    query_center: int
    candidate_center: int
    c_r: float
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")


@dataclass
class PositiveSet:
    query_center: int
    positives: list  # Subgraph per positive partner

    def __post_init__(self):
        if not self.positives:
            raise ValueError("positive set must not be empty")

    @property
    def n_pos(self) -> int:
        return len(self.positives)

    def partner_centers(self) -> set:
        return {sg.central for sg in self.positives}


def _partners(history: SnapshotGraph, center: int) -> list:
    """Global ids of the nodes the center interacted with."""
    if center < history.user_count:
        mask = history.edges[:, 0] == center
        return sorted(int(i) + history.user_count
                      for i in np.unique(history.edges[mask, 1]))
    item = center - history.user_count
    mask = history.edges[:, 1] == item
    return sorted(int(u) for u in np.unique(history.edges[mask, 0]))


def positive_set(history: SnapshotGraph, center: int, *, k: int,
                 cap: int = 256, n_pos: int = 8,
                 seed: int = 0):
    """Subgraphs of the center's interaction partners within `history`,
    sampled down to n_pos. Returns None when the center has none; the
    query's own subgraph is never a positive because positives are
    centered on partner nodes."""
    partners = _partners(history, center)
    if not partners:
        return None
    if len(partners) > n_pos:
        rng = stream_rng(seed, f"task.positives.c{center}")
        partners = sorted(rng.choice(partners, size=n_pos, replace=False))
    return PositiveSet(query_center=center,
                       positives=[extract_khop(history, p, k, cap=cap,
                                               seed=seed) for p in partners])


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    na = math.sqrt(float(np.dot(a64, a64)))
    nb = math.sqrt(float(np.dot(b64, b64)))
    if na == 0.0 or nb == 0.0:
        log.info("zero-norm embedding in similarity; contribution is 0")
        return 0.0
    return float(np.dot(a64, b64)) / (na * nb)


def sim_to_positives(emb: np.ndarray, positives: PositiveSet,
                     table: EmbeddingTable) -> float:
    """Mean cosine similarity between `emb` and each positive subgraph's
    encoding. Zero-norm operands contribute 0."""
    sims = [_cosine(emb, encode_subgraph(table, p))
            for p in positives.positives]
    return math.fsum(sims) / len(sims)


def delta_rel(q: Subgraph, r: Subgraph, positives: PositiveSet,
              table: EmbeddingTable, eps: float) -> TaskTriple:
    """Label one candidate: encode the query, fuse the candidate in,
    re-encode at the query's center, and compare similarities to the
    positive set."""
    before = sim_to_positives(encode_subgraph(table, q), positives, table)
    fused = fuse_subgraphs(q, r)
    after = sim_to_positives(encode_subgraph(table, fused), positives, table)
    c_r = after - before
    return TaskTriple(query_center=q.central, candidate_center=r.central,
                      c_r=c_r, label=classify(c_r, eps))


def build_task_dataset(graph: DynamicGraph, library: SubgraphLibrary,
                       table: EmbeddingTable, *, n_q: int, r_sample: int,
                       n_pos: int = 8, eps: float = 1e-3, cap: int = 256,
                       seed: int = 0, include_positives: bool = False):
    """Sample query centers from the library and label candidates.

    Candidates are stratified per query: the nearer half by key distance
    (hard cases), the rest uniform over the library (easy cases). The
    query's own entry is never a candidate; positive partners are
    excluded unless include_positives. Per-query randomness derives from
    (seed, center), so any evaluation order yields the same rows; rows
    are ordered by query center.

    Returns (triples, skipped count).
    """
    history = accumulate(graph.pretrain_snapshots())
    centers = library.centers
    rng = stream_rng(seed, "task.queries")
    n_take = min(n_q, len(centers))
    chosen = sorted(int(c) for c in
                    rng.choice(centers, size=n_take, replace=False))
    triples = []
    skipped = 0
    for center in chosen:
        positives = positive_set(history, center, k=library.hop, cap=cap,
                                 n_pos=n_pos, seed=seed)
        if positives is None:
            skipped += 1
            log.info("query center %d skipped: no positives", center)
            continue
        row = library.row_of_center[center]
        banned = {row}
        if not include_positives:
            banned |= {library.row_of_center[p]
                       for p in positives.partner_centers()
                       if p in library.row_of_center}
        n_near = r_sample - r_sample // 2
        ranked = l2_topk(library, library.keys[row], K=len(library))
        near = [i for i, _ in ranked if i not in banned][:n_near]
        pool = [i for i in range(len(library))
                if i not in banned and i not in set(near)]
        rng_q = stream_rng(seed, f"task.candidates.c{center}")
        n_unif = min(r_sample // 2, len(pool))
        uniform = list(rng_q.choice(pool, size=n_unif, replace=False)) \
            if n_unif else []
        q_sg = library.values[row]
        for cand_row in near + [int(i) for i in uniform]:
            triples.append(delta_rel(q_sg, library.values[cand_row],
                                     positives, table, eps))
    return triples, skipped


def write_task_dataset(path, triples, *, seed: int, eps: float, n_pos: int,
                       checkpoint_hash: str, skipped: int = 0) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"seed {seed}\n")
        fh.write(f"epsilon {eps!r}\n")
        fh.write(f"n_pos {n_pos}\n")
        fh.write(f"checkpoint {checkpoint_hash}\n")
        fh.write(f"skipped {skipped}\n")
        fh.write("query_center,candidate_center,C_r,label\n")
        for t in triples:
            fh.write(f"{t.query_center},{t.candidate_center},"
                     f"{t.c_r!r},{t.label}\n")


def read_task_dataset(path):
    header: dict = {}
    triples = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body_at = None
    for idx, line in enumerate(lines):
        if line.startswith("query_center,"):
            body_at = idx + 1
            break
        key, value = line.split(" ", 1)
        header[key] = value
    if body_at is None:
        raise ValueError(f"{path}: missing column header row")
    for line in lines[body_at:]:
        if not line:
            continue
        q, c, c_r, label = line.split(",")
        triples.append(TaskTriple(query_center=int(q),
                                  candidate_center=int(c),
                                  c_r=float(c_r), label=label))
    return triples, header
