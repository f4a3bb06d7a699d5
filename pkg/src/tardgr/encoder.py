"""Pretrained dynamic graph encoder.

A plain embedding-propagation collaborative filter: node embeddings,
symmetric normalized propagation, layer averaging, trained with BPR on
the pretraining snapshots. Provides the temporally rolled tables and the
subgraph encodings every later stage consumes.

Isolated nodes keep their embeddings through propagation here
(keep_isolated), so a snapshot that never mentions a node leaves that
node's representation alone.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .graph import DynamicGraph, SnapshotGraph, Subgraph, accumulate, \
    normalized_propagate
from .seeds import stream_rng

__all__ = [
    "EmbeddingTable",
    "init_table",
    "temporal_forward",
    "encode_subgraph",
    "encode_subgraph_rows",
    "propagate_mean_layers",
    "rowwise_dot",
    "bpr_loss",
    "reg_penalty",
    "sample_negative",
    "user_item_sets",
    "bpr_epoch",
    "pretrain_bpr",
    "save_table",
    "load_table",
]

log = logging.getLogger(__name__)


@dataclass
class EmbeddingTable:
    """Per-node embeddings plus the propagation depth they were trained
    with. user_embeddings [U x d], item_embeddings [I x d], float32."""

    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    layers: int

    def __post_init__(self):
        self.user_embeddings = np.asarray(self.user_embeddings, np.float32)
        self.item_embeddings = np.asarray(self.item_embeddings, np.float32)
        if self.user_embeddings.shape[1] != self.item_embeddings.shape[1]:
            raise ValueError("user/item embedding widths differ")
        if not (np.all(np.isfinite(self.user_embeddings))
                and np.all(np.isfinite(self.item_embeddings))):
            raise ValueError("embedding table contains non-finite rows")

    @property
    def d(self) -> int:
        return self.user_embeddings.shape[1]

    @property
    def user_count(self) -> int:
        return len(self.user_embeddings)

    @property
    def item_count(self) -> int:
        return len(self.item_embeddings)

    def all_rows(self) -> np.ndarray:
        """Global node-id order: users, then items."""
        return np.concatenate([self.user_embeddings, self.item_embeddings])


def init_table(user_count: int, item_count: int, d: int, layers: int,
               seed: int) -> EmbeddingTable:
    rng = stream_rng(seed, "encoder.init")
    return EmbeddingTable(
        user_embeddings=rng.uniform(-0.1, 0.1,
                                    (user_count, d)).astype(np.float32),
        item_embeddings=rng.uniform(-0.1, 0.1,
                                    (item_count, d)).astype(np.float32),
        layers=layers)


def temporal_forward(table: EmbeddingTable,
                     prev: SnapshotGraph) -> EmbeddingTable:
    """Roll the table one step: propagate over the previous snapshot and
    average the layer outputs (layer 0 included). An edgeless snapshot is
    the identity map."""
    if prev.user_count != table.user_count \
            or prev.item_count != table.item_count:
        raise ValueError("snapshot node counts do not match the table")
    x = table.all_rows()
    outs = [x.astype(np.float64)]
    cur = x
    for _ in range(table.layers):
        cur = normalized_propagate(prev.adjacency, cur, "symmetric",
                                   keep_isolated=True)
        outs.append(cur.astype(np.float64))
    mean = np.mean(np.stack(outs), axis=0).astype(np.float32)
    return EmbeddingTable(user_embeddings=mean[: table.user_count],
                          item_embeddings=mean[table.user_count:],
                          layers=table.layers)


def _local_rows(table: EmbeddingTable, sg: Subgraph) -> np.ndarray:
    return table.all_rows()[sg.nodes]


def encode_subgraph(table: EmbeddingTable, sg: Subgraph,
                    first_layer: int = 0) -> np.ndarray:
    """Sum over layers first_layer..L of the central node's row after l
    propagation steps on the subgraph's own adjacency. A singleton
    subgraph therefore encodes to a scaled copy of its embedding."""
    x = _local_rows(table, sg)
    acc = np.zeros(table.d, dtype=np.float64)
    cur = x
    for layer in range(table.layers + 1):
        if layer > 0:
            cur = normalized_propagate(sg.local_adjacency, cur, "symmetric",
                                       keep_isolated=True)
        if layer >= first_layer:
            acc += cur[0].astype(np.float64)
    return acc.astype(np.float32)


def encode_subgraph_rows(all_rows: T.Tensor, sg: Subgraph, layers: int,
                         first_layer: int = 0) -> T.Tensor:
    """Taped twin of encode_subgraph operating on the live global row
    tensor, for paths that need gradients to reach the table."""
    x = T.gather_rows(all_rows, sg.nodes)
    acc = None
    cur = x
    for layer in range(layers + 1):
        if layer > 0:
            cur = normalized_propagate(sg.local_adjacency, cur, "symmetric",
                                       keep_isolated=True)
        if layer >= first_layer:
            central = T.gather_rows(cur, [0])
            acc = central if acc is None else T.add(acc, central)
    return T.reshape(acc, (acc.shape[-1],))


def propagate_mean_layers(adjacency, rows: T.Tensor, layers: int) -> T.Tensor:
    """Mean of layer outputs 0..L over a full graph, on the tape."""
    outs = [rows]
    cur = rows
    for _ in range(layers):
        cur = normalized_propagate(adjacency, cur, "symmetric",
                                   keep_isolated=True)
        outs.append(cur)
    acc = outs[0]
    for o in outs[1:]:
        acc = T.add(acc, o)
    return T.scale(acc, 1.0 / (layers + 1))


def rowwise_dot(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    return T.reduce_sum(T.mul(a, b), axis=1)


def bpr_loss(s_pos: T.Tensor, s_neg: T.Tensor) -> T.Tensor:
    """Mean over the batch of -log sigmoid(s_pos - s_neg)."""
    margin = T.add(s_pos, T.scale(s_neg, -1.0))
    return T.reduce_mean(T.scale(T.log(T.sigmoid(margin)), -1.0))


def reg_penalty(u_raw: T.Tensor, pos_raw: T.Tensor,
                neg_raw: T.Tensor) -> T.Tensor:
    """(1/2N) (sum ||h_u||^2 + sum ||h_i+||^2 + sum ||h_i-||^2), N the
    batch size; applied to raw embedding rows, not propagated outputs."""
    n = u_raw.shape[0]
    total = T.add(T.add(T.reduce_sum(T.mul(u_raw, u_raw)),
                        T.reduce_sum(T.mul(pos_raw, pos_raw))),
                  T.reduce_sum(T.mul(neg_raw, neg_raw)))
    return T.scale(total, 1.0 / (2.0 * n))


def user_item_sets(graph: SnapshotGraph) -> dict:
    """user id -> frozenset of item ids interacted with in `graph`."""
    return {u: frozenset(int(i) for i in items)
            for u, items in graph.user_items.items()}


def sample_negative(rng, item_count: int, banned) -> int:
    while True:
        j = int(rng.integers(0, item_count))
        if j not in banned:
            return j


def _sample_triplets(edges: np.ndarray, user_sets: dict, item_count: int,
                     rng, batch_size: int):
    """Shared draw-order contract for BPR-style epochs: one permutation
    of the edge list, then one negative per triplet in batch order.
    Users who have interacted with every item are skipped."""
    perm = rng.permutation(len(edges))
    for start in range(0, len(edges), batch_size):
        batch = edges[perm[start: start + batch_size]]
        triplets = []
        for u, i in batch:
            banned = user_sets.get(int(u), frozenset())
            if len(banned) >= item_count:
                continue
            triplets.append((int(u), int(i),
                             sample_negative(rng, item_count, banned)))
        if triplets:
            yield np.array(triplets, dtype=np.int64)


def bpr_epoch(table: EmbeddingTable, graph: SnapshotGraph, *, lr: float,
              mu: float, batch_size: int, rng) -> float:
    """One pass of BPR minibatch SGD over `graph`'s edges, updating the
    table in place. Returns the mean per-triplet loss."""
    user_sets = user_item_sets(graph)
    total, count = 0.0, 0
    for triplets in _sample_triplets(graph.edges, user_sets,
                                     table.item_count, rng, batch_size):
        u, pos, neg = triplets[:, 0], triplets[:, 1], triplets[:, 2]
        tape = T.Tape()
        u_leaf = tape.leaf(table.user_embeddings)
        i_leaf = tape.leaf(table.item_embeddings)
        rows = T.concat([u_leaf, i_leaf], axis=0)
        reps = propagate_mean_layers(graph.adjacency, rows, table.layers)
        h_u = T.gather_rows(reps, u)
        h_pos = T.gather_rows(reps, table.user_count + pos)
        h_neg = T.gather_rows(reps, table.user_count + neg)
        loss = T.add(
            bpr_loss(rowwise_dot(h_u, h_pos), rowwise_dot(h_u, h_neg)),
            T.scale(reg_penalty(T.gather_rows(u_leaf, u),
                                T.gather_rows(i_leaf, pos),
                                T.gather_rows(i_leaf, neg)), mu))
        grads = T.backward(tape, loss)
        T.optimizer_step({"user_embeddings": u_leaf,
                          "item_embeddings": i_leaf}, grads, lr)
        total += float(loss.data) * len(triplets)
        count += len(triplets)
    if count == 0:
        raise ValueError("bpr_epoch: no trainable triplets in graph")
    return total / count


def pretrain_bpr(graph: DynamicGraph, *, d: int = 64, layers: int = 3,
                 epochs: int = 20, lr: float = 1e-3, mu: float = 1e-4,
                 batch_size: int = 1024, seed: int = 0):
    """Train a fresh table on the union of the pretraining snapshots.

    Returns (table, per-epoch mean losses). Negative sampling is uniform
    over items the user has not touched within the pretraining window.
    """
    union = accumulate(graph.pretrain_snapshots())
    if union.n_edges == 0:
        raise ValueError("pretrain window has no edges")
    table = init_table(graph.user_count, graph.item_count, d, layers, seed)
    losses = []
    for epoch in range(epochs):
        rng = stream_rng(seed, f"bpr.t{union.time_index}.e{epoch}")
        losses.append(bpr_epoch(table, union, lr=lr, mu=mu,
                                batch_size=batch_size, rng=rng))
    return table, losses


def save_table(path, table: EmbeddingTable, meta: dict | None = None) -> None:
    payload = {"user_embeddings": table.user_embeddings,
               "item_embeddings": table.item_embeddings}
    full_meta = {"layers": table.layers, "d": table.d}
    full_meta.update(meta or {})
    save_checkpoint(path, payload, full_meta)


def load_table(path):
    arrays, meta = load_checkpoint(path)
    table = EmbeddingTable(user_embeddings=arrays["user_embeddings"],
                           item_embeddings=arrays["item_embeddings"],
                           layers=int(meta["layers"]))
    return table, meta
