"""Retrieval-augmented fusion and fine-tuning.

Inference path: encode the user's query subgraph, pull the coarse
nearest library entries by exact L2, re-rank them with the relevance
model, aggregate the survivors' propagated-layer encodings under simplex
weights, and blend the result into the query embedding through a learned
sigmoid gate. Fine-tuning runs BPR over the most recent snapshot with
the fused user embeddings, plus a margin ranking term scored by the
relevance model and the shared norm penalty; the gate and the scoring
head train jointly with the tables.

Setting top_m to 0 disables retrieval entirely: the fused embedding is
the plain propagated one and no gate parameter enters the computation,
so a disabled run is the vanilla baseline, not a zero-weighted copy.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .encoder import EmbeddingTable, bpr_loss, encode_subgraph, \
    encode_subgraph_rows, propagate_mean_layers, reg_penalty, rowwise_dot, \
    temporal_forward, user_item_sets, _sample_triplets
from .graph import DynamicGraph, SnapshotGraph, Subgraph, edge_perturb, \
    extract_khop
from .library import SubgraphLibrary, l2_topk
from .seeds import stream_rng, stream_seed
from .tam import HEAD_PARAMS, PAIR_ADJACENCY, TamParams, \
    forward_scores_tokens, make_leaves, score_pairs

__all__ = [
    "FusionConfig",
    "topm_indices",
    "alpha_weights",
    "relevance_scores",
    "rerank_topm",
    "aggregate_retrieved",
    "fuse_query",
    "fuse_query_rows",
    "rag_embedding_rows",
    "finetune_losses",
    "FinetuneResult",
    "finetune_position",
    "InferenceState",
    "build_inference_state",
    "Recommendation",
    "recommend",
    "write_recommendations",
    "read_recommendations",
]

log = logging.getLogger(__name__)

ALPHA_MODES = ("uniform", "softmax")


@dataclass(frozen=True)
class FusionConfig:
    """Knobs for the retrieval, fusion, and fine-tune loss paths.

    top_m = 0 switches retrieval off; otherwise 1 <= top_m <= coarse_k.
    beta_param is the pre-sigmoid gate value, so 0.0 starts the blend at
    an even split. margin_weight scales the ranking term, reg_weight the
    norm penalty.
    """

    coarse_k: int = 5
    top_m: int = 3
    alpha_mode: str = "softmax"
    temperature: float = 1.0
    beta_param: float = 0.0
    margin: float = 1.0
    margin_weight: float = 0.3
    reg_weight: float = 1e-4
    use_semantic: bool = True
    use_structure: bool = True

    def __post_init__(self):
        if self.coarse_k < 1:
            raise ValueError(f"coarse_k must be >= 1, got {self.coarse_k}")
        if self.top_m != 0 and not 1 <= self.top_m <= self.coarse_k:
            raise ValueError(
                f"top_m {self.top_m} outside 0 or [1, {self.coarse_k}]")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}, "
                             f"got {self.alpha_mode!r}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be > 0, "
                             f"got {self.temperature}")
        if self.margin < 0.0 or self.margin_weight < 0.0 \
                or self.reg_weight < 0.0:
            raise ValueError("margin, margin_weight, and reg_weight must "
                             "be non-negative")

    @property
    def retrieval_disabled(self) -> bool:
        return self.top_m == 0


def topm_indices(scores, m: int) -> np.ndarray:
    """Indices of the m largest scores, score-descending, ties broken by
    ascending index. Invariant under strictly increasing transforms."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if not 1 <= m <= len(s):
        raise ValueError(f"m={m} outside [1, {len(s)}]")
    return np.lexsort((np.arange(len(s)), -s))[:m]


def alpha_weights(scores, mode: str = "softmax",
                  temperature: float = 1.0) -> np.ndarray:
    """Simplex weights over the selected candidates."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if len(s) == 0:
        raise ValueError("alpha_weights: no scores")
    if mode == "uniform":
        return np.full(len(s), 1.0 / len(s))
    if mode != "softmax":
        raise ValueError(f"alpha_weights: unknown mode {mode!r}")
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = s / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def relevance_scores(tam: TamParams, table: EmbeddingTable,
                     query_sg: Subgraph, candidates, *,
                     use_semantic: bool = True,
                     use_structure: bool = True) -> np.ndarray:
    """Score each candidate subgraph against the query, as (query,
    candidate) encoding pairs."""
    if not candidates:
        raise ValueError("relevance_scores: no candidates")
    z_q = encode_subgraph(table, query_sg)
    tokens = np.stack([np.stack([z_q, encode_subgraph(table, sg)])
                       for sg in candidates])
    return score_pairs(tam, tokens, use_semantic=use_semantic,
                       use_structure=use_structure)


def rerank_topm(query_sg: Subgraph, candidates, tam: TamParams,
                table: EmbeddingTable, m: int, *,
                use_semantic: bool = True, use_structure: bool = True):
    """Relevance-model re-ranking of a coarse candidate list.

    Returns (selected positions into `candidates`, all candidate scores).
    """
    scores = relevance_scores(tam, table, query_sg, candidates,
                              use_semantic=use_semantic,
                              use_structure=use_structure)
    return topm_indices(scores, m), scores


def aggregate_retrieved(table: EmbeddingTable, selected, selected_scores,
                        config: FusionConfig) -> np.ndarray:
    """Weighted sum of the selected subgraphs' propagated-layer central
    encodings (propagation outputs only, the raw embedding excluded)."""
    if not selected:
        raise ValueError("aggregate_retrieved: nothing selected")
    h = np.stack([encode_subgraph(table, sg, first_layer=1)
                  for sg in selected]).astype(np.float64)
    alpha = alpha_weights(selected_scores, config.alpha_mode,
                          config.temperature)
    if len(alpha) != len(h):
        raise ValueError(f"{len(alpha)} weights for {len(h)} subgraphs")
    return (alpha[:, None] * h).sum(axis=0).astype(np.float32)


def fuse_query(h_q: np.ndarray, h_rag: np.ndarray,
               beta_param: float) -> np.ndarray:
    """sigmoid(beta_param) * h_q + (1 - sigmoid(beta_param)) * h_rag."""
    b = 1.0 / (1.0 + math.exp(-float(beta_param)))
    fused = b * h_q.astype(np.float64) + (1.0 - b) * h_rag.astype(np.float64)
    return fused.astype(np.float32)


def fuse_query_rows(h_q: T.Tensor, h_rag: T.Tensor,
                    beta: T.Tensor) -> T.Tensor:
    """Taped gate blend; `beta` is the persisted shape-(1,) parameter."""
    b = T.sigmoid(T.reshape(beta, ()))
    rest = T.add(T.Tensor(np.float32(1.0)), T.scale(b, -1.0))
    return T.add(T.mul(h_q, b), T.mul(h_rag, rest))


def _tam_dims(tam: TamParams) -> dict:
    return {"heads": tam.heads, "structure_layers": tam.structure_layers,
            "d_hid": tam.d_hid, "hidden": tam.hidden}


def _stack_rows(pieces, d: int) -> T.Tensor:
    rows = [T.reshape(p, (1, d)) for p in pieces]
    return rows[0] if len(rows) == 1 else T.concat(rows, axis=0)


def rag_embedding_rows(rows: T.Tensor, query_sg: Subgraph, candidates,
                       config: FusionConfig, layers: int, tam_leaves: dict,
                       tam_dims: dict):
    """Taped retrieval aggregate for one query over a fixed candidate
    list.

    The candidate scores stay on the tape, so softmax weights pass
    gradients to the relevance model and, through the pair tokens, to the
    embedding tables. Only the top-m choice itself is discrete. Returns
    ([1 x d] aggregate, selected positions).
    """
    if not candidates:
        raise ValueError("rag_embedding_rows: no candidates")
    m = min(config.top_m, len(candidates))
    d = rows.shape[1]
    z_q = encode_subgraph_rows(rows, query_sg, layers)
    z_c = _stack_rows([encode_subgraph_rows(rows, sg, layers)
                       for sg in candidates], d)
    k = len(candidates)
    q_rep = T.gather_rows(T.reshape(z_q, (1, d)), np.zeros(k, np.int64))
    tokens = T.concat([T.reshape(q_rep, (k, 1, d)),
                       T.reshape(z_c, (k, 1, d))], axis=1)
    scores = forward_scores_tokens(tam_leaves, tokens, PAIR_ADJACENCY,
                                   **tam_dims,
                                   use_semantic=config.use_semantic,
                                   use_structure=config.use_structure)
    sel = topm_indices(scores.data, m)
    h_stack = _stack_rows([encode_subgraph_rows(rows, candidates[j], layers,
                                                first_layer=1)
                           for j in sel], d)
    if config.alpha_mode == "softmax":
        picked = T.gather_rows(scores, sel)
        alpha = T.row_softmax(T.reshape(
            T.scale(picked, 1.0 / config.temperature), (1, m)))
    else:
        alpha = T.Tensor(np.full((1, m), 1.0 / m, dtype=np.float32))
    return T.matmul(alpha, h_stack), sel


def _margin_ranking(h_u: T.Tensor, h_pos: T.Tensor, h_neg: T.Tensor,
                    tam_leaves: dict, tam_dims: dict,
                    config: FusionConfig) -> T.Tensor:
    """mean relu(margin - (score(u, i+) - score(u, i-))), pairs scored by
    the relevance model on fused-user/item token pairs."""
    b, d = h_u.shape
    u3 = T.reshape(h_u, (b, 1, d))
    x_pos = T.concat([u3, T.reshape(h_pos, (b, 1, d))], axis=1)
    x_neg = T.concat([u3, T.reshape(h_neg, (b, 1, d))], axis=1)
    kw = dict(tam_dims, use_semantic=config.use_semantic,
              use_structure=config.use_structure)
    s_pos = forward_scores_tokens(tam_leaves, x_pos, PAIR_ADJACENCY, **kw)
    s_neg = forward_scores_tokens(tam_leaves, x_neg, PAIR_ADJACENCY, **kw)
    gap = T.add(s_pos, T.scale(s_neg, -1.0))
    viol = T.relu(T.add(T.scale(gap, -1.0),
                        T.Tensor(np.float32(config.margin))))
    return T.reduce_mean(viol)


def finetune_losses(h_u: T.Tensor, h_pos: T.Tensor, h_neg: T.Tensor,
                    u_leaf: T.Tensor, i_leaf: T.Tensor,
                    triplets: np.ndarray, config: FusionConfig, *,
                    tam_leaves: dict | None = None,
                    tam_dims: dict | None = None):
    """Total fine-tune objective for one batch.

    BPR on the (possibly fused) embeddings, margin_weight times the
    ranking term when it is positive, reg_weight times the norm penalty
    over the raw embedding rows. With margin_weight 0 the ranking term is
    absent from the computation, not merely scaled away, so the reduced
    objective matches plain BPR training operation for operation.
    """
    u, pos, neg = triplets[:, 0], triplets[:, 1], triplets[:, 2]
    l_bpr = bpr_loss(rowwise_dot(h_u, h_pos), rowwise_dot(h_u, h_neg))
    parts = {"l_bpr": float(l_bpr.data), "l_mrl": 0.0}
    main = l_bpr
    if config.margin_weight > 0.0:
        if tam_leaves is None or tam_dims is None:
            raise ValueError("margin ranking loss needs the relevance "
                             "model's leaves")
        l_mrl = _margin_ranking(h_u, h_pos, h_neg, tam_leaves, tam_dims,
                                config)
        parts["l_mrl"] = float(l_mrl.data)
        main = T.add(l_bpr, T.scale(l_mrl, config.margin_weight))
    l_reg = reg_penalty(T.gather_rows(u_leaf, u),
                        T.gather_rows(i_leaf, pos),
                        T.gather_rows(i_leaf, neg))
    parts["l_reg"] = float(l_reg.data)
    loss = T.add(main, T.scale(l_reg, config.reg_weight))
    parts["l_total"] = float(loss.data)
    return loss, parts


TRAIN_TAM_MODES = ("head", "all", "none")


@dataclass
class FinetuneResult:
    table: EmbeddingTable
    tam: TamParams | None
    beta_param: float
    history: list = field(default_factory=list)


def _clone_tam(tam: TamParams) -> TamParams:
    return TamParams(arrays={k: v.copy() for k, v in tam.arrays.items()},
                     d=tam.d, heads=tam.heads,
                     structure_layers=tam.structure_layers,
                     d_hid=tam.d_hid, hidden=tam.hidden)


def _coarse_candidates(table: EmbeddingTable, library: SubgraphLibrary,
                       query_sg: Subgraph, kc: int):
    key = encode_subgraph(table, query_sg)
    hits = l2_topk(library, key, kc)
    return [library.values[i] for i, _ in hits], [i for i, _ in hits]


def finetune_position(graph: DynamicGraph, position: int,
                      table: EmbeddingTable,
                      library: SubgraphLibrary | None,
                      tam: TamParams | None, config: FusionConfig, *,
                      hop: int = 2, cap: int = 256, epochs: int = 5,
                      lr: float = 1e-3, batch_size: int = 1024,
                      drop_rate: float = 0.5, seed: int = 0,
                      train_tam: str = "head") -> FinetuneResult:
    """Fine-tune for serving at snapshot list position `position`.

    Trains on snapshots[position - 1]; query subgraphs come from the full
    accumulated history before `position`. Inputs are copied, never
    mutated. Each epoch optionally drops a fraction of the training edges
    (fresh seeded draw per epoch) before sampling BPR triplets. The gate
    parameter trains whenever retrieval is on; the relevance model's
    scoring head (or all of it, per `train_tam`) trains whenever the
    model participates in the objective.
    """
    if not 1 <= position <= len(graph.snapshots):
        raise ValueError(f"position {position} outside "
                         f"[1, {len(graph.snapshots)}]")
    if train_tam not in TRAIN_TAM_MODES:
        raise ValueError(f"train_tam must be one of {TRAIN_TAM_MODES}, "
                         f"got {train_tam!r}")
    retrieving = not config.retrieval_disabled
    needs_tam = retrieving or config.margin_weight > 0.0
    if retrieving and (library is None or len(library) == 0):
        raise ValueError("retrieval is enabled but the subgraph library "
                         "is missing or empty")
    if needs_tam and tam is None:
        raise ValueError("the configured objective needs a relevance "
                         "model")
    train = graph.snapshots[position - 1]
    if train.n_edges == 0:
        raise ValueError(f"snapshot at position {position - 1} has no "
                         f"edges to fine-tune on")

    work = EmbeddingTable(user_embeddings=table.user_embeddings.copy(),
                          item_embeddings=table.item_embeddings.copy(),
                          layers=table.layers)
    work_tam = _clone_tam(tam) if needs_tam else None
    beta = np.array([config.beta_param], dtype=np.float32)
    dims = _tam_dims(work_tam) if needs_tam else None
    if retrieving:
        kc = min(config.coarse_k, len(library))
        history = graph.history_until(position)
        q_cache: dict = {}
    history_log = []
    for epoch in range(epochs):
        rng = stream_rng(seed, f"bpr.t{train.time_index}.e{epoch}")
        if drop_rate > 0.0:
            egraph = edge_perturb(
                train, drop_rate,
                stream_seed(seed, f"perturb.t{train.time_index}.e{epoch}"))
        else:
            egraph = train
        if egraph.n_edges == 0:
            log.warning("epoch %d: every edge dropped, skipping", epoch)
            history_log.append({"epoch": epoch, "l_total": math.nan,
                                "l_bpr": math.nan, "l_mrl": math.nan,
                                "triplets": 0})
            continue
        user_sets = user_item_sets(egraph)
        sums = {"l_total": 0.0, "l_bpr": 0.0, "l_mrl": 0.0}
        count = 0
        for triplets in _sample_triplets(egraph.edges, user_sets,
                                         work.item_count, rng, batch_size):
            u, pos, neg = triplets[:, 0], triplets[:, 1], triplets[:, 2]
            tape = T.Tape()
            u_leaf = tape.leaf(work.user_embeddings)
            i_leaf = tape.leaf(work.item_embeddings)
            beta_leaf = tape.leaf(beta, name="beta_param") \
                if retrieving else None
            tam_leaves = make_leaves(tape, work_tam.arrays) \
                if needs_tam else None
            rows = T.concat([u_leaf, i_leaf], axis=0)
            reps = propagate_mean_layers(egraph.adjacency, rows, work.layers)
            h_u = T.gather_rows(reps, u)
            h_pos = T.gather_rows(reps, work.user_count + pos)
            h_neg = T.gather_rows(reps, work.user_count + neg)
            if retrieving:
                uniq, inv = np.unique(u, return_inverse=True)
                pieces = []
                for uu in uniq:
                    if int(uu) not in q_cache:
                        q_cache[int(uu)] = extract_khop(
                            history, int(uu), hop, cap=cap, seed=seed)
                    cands, _ = _coarse_candidates(work, library,
                                                  q_cache[int(uu)], kc)
                    h_rag, _ = rag_embedding_rows(rows, q_cache[int(uu)],
                                                  cands, config,
                                                  work.layers, tam_leaves,
                                                  dims)
                    pieces.append(h_rag)
                rag = pieces[0] if len(pieces) == 1 \
                    else T.concat(pieces, axis=0)
                h_u = fuse_query_rows(h_u, T.gather_rows(rag, inv),
                                      beta_leaf)
            loss, parts = finetune_losses(h_u, h_pos, h_neg, u_leaf,
                                          i_leaf, triplets, config,
                                          tam_leaves=tam_leaves,
                                          tam_dims=dims)
            grads = T.backward(tape, loss)
            step = {"user_embeddings": u_leaf, "item_embeddings": i_leaf}
            if retrieving:
                step["beta_param"] = beta_leaf
            if needs_tam and train_tam == "head":
                step.update({n: tam_leaves[n] for n in HEAD_PARAMS})
            elif needs_tam and train_tam == "all":
                step.update(tam_leaves)
            T.optimizer_step(step, grads, lr)
            n = len(triplets)
            for k in sums:
                sums[k] += parts[k] * n
            count += n
        if count == 0:
            raise ValueError("fine-tune epoch produced no trainable "
                             "triplets")
        entry = {k: v / count for k, v in sums.items()}
        entry.update(epoch=epoch, triplets=count)
        history_log.append(entry)
    return FinetuneResult(table=work, tam=work_tam,
                          beta_param=float(beta[0]), history=history_log)


# ---------------------------------------------------------------------------
# serving


@dataclass
class Recommendation:
    user: int
    item_ids: list
    scores: list
    fallback: bool = False
    retrieved: list = field(default_factory=list)  # library rows used


@dataclass
class InferenceState:
    """Everything recommend() needs for one snapshot position, built
    once: rolled representations over the accumulated history, the
    per-user exclusion sets, and item popularity for the cold-start
    fallback."""

    table: EmbeddingTable
    library: SubgraphLibrary | None
    tam: TamParams | None
    config: FusionConfig
    history: SnapshotGraph
    reps: np.ndarray
    seen: dict
    popularity: np.ndarray
    hop: int = 2
    cap: int = 256
    seed: int = 0


def build_inference_state(graph: DynamicGraph, position: int,
                          table: EmbeddingTable,
                          library: SubgraphLibrary | None,
                          tam: TamParams | None, config: FusionConfig, *,
                          hop: int = 2, cap: int = 256,
                          seed: int = 0) -> InferenceState:
    if not 1 <= position <= len(graph.snapshots):
        raise ValueError(f"position {position} outside "
                         f"[1, {len(graph.snapshots)}]")
    if not config.retrieval_disabled:
        if library is None or len(library) == 0:
            raise ValueError("retrieval is enabled but the subgraph "
                             "library is missing or empty")
        if tam is None:
            raise ValueError("retrieval is enabled but no relevance model "
                             "was given")
    history = graph.history_until(position)
    reps = temporal_forward(table, history).all_rows()
    seen = {u: set(int(i) for i in items)
            for u, items in history.user_items.items()}
    popularity = np.bincount(history.edges[:, 1],
                             minlength=table.item_count) \
        if history.n_edges else np.zeros(table.item_count, np.int64)
    return InferenceState(table=table, library=library, tam=tam,
                          config=config, history=history, reps=reps,
                          seen=seen, popularity=popularity, hop=hop,
                          cap=cap, seed=seed)


def _ranked_items(values: np.ndarray, top_k: int):
    order = np.lexsort((np.arange(len(values)), -values))
    return order[:top_k]


def recommend(state: InferenceState, user: int,
              top_k: int = 20) -> Recommendation:
    """Top-k items for one user, history items excluded.

    A user outside the table is an error. A user with no history at all
    falls back to popularity ranking and says so. Retrieval (when
    enabled) fuses the aggregated library neighbors into the query before
    scoring.
    """
    if not 0 <= user < state.table.user_count:
        raise ValueError(f"unknown user {user}")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    seen = state.seen.get(user, set())
    if not seen:
        chosen = _ranked_items(state.popularity.astype(np.float64), top_k)
        return Recommendation(
            user=user, item_ids=[int(j) for j in chosen],
            scores=[float(state.popularity[j]) for j in chosen],
            fallback=True)
    config = state.config
    h_u = state.reps[user]
    retrieved = []
    if not config.retrieval_disabled:
        q_sg = extract_khop(state.history, user, state.hop, cap=state.cap,
                            seed=state.seed)
        kc = min(config.coarse_k, len(state.library))
        m = min(config.top_m, kc)
        cands, rows = _coarse_candidates(state.table, state.library,
                                         q_sg, kc)
        sel, scores = rerank_topm(q_sg, cands, state.tam, state.table, m,
                                  use_semantic=config.use_semantic,
                                  use_structure=config.use_structure)
        h_rag = aggregate_retrieved(state.table, [cands[j] for j in sel],
                                    scores[sel], config)
        h_u = fuse_query(h_u, h_rag, config.beta_param)
        retrieved = [rows[j] for j in sel]
    item_reps = state.reps[state.table.user_count:].astype(np.float64)
    raw = item_reps @ h_u.astype(np.float64)
    raw[sorted(seen)] = -np.inf
    chosen = [int(j) for j in _ranked_items(raw, top_k)
              if np.isfinite(raw[j])]
    return Recommendation(user=user, item_ids=chosen,
                          scores=[float(raw[j]) for j in chosen],
                          retrieved=retrieved)


# ---------------------------------------------------------------------------
# recommendation files


def write_recommendations(path, recs, meta: dict) -> None:
    """Metadata lines, a column header, then one row per ranked item."""
    lines = [f"{k} {v}" for k, v in meta.items()]
    lines.append("user_id,rank,item_id,score")
    for rec in recs:
        for rank, (item, s) in enumerate(zip(rec.item_ids, rec.scores),
                                         start=1):
            lines.append(f"{rec.user},{rank},{item},{s!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_recommendations(path):
    """Returns ((user, rank, item, score) rows, metadata dict)."""
    with open(path, encoding="utf-8") as fh:
        raw = [line.rstrip("\n") for line in fh if line.strip()]
    meta: dict = {}
    rows = []
    header_seen = False
    for line in raw:
        if line == "user_id,rank,item_id,score":
            header_seen = True
            continue
        if not header_seen:
            key, _, value = line.partition(" ")
            meta[key] = value
            continue
        u, rank, item, s = line.split(",")
        rows.append((int(u), int(rank), int(item), float(s)))
    if not header_seen:
        raise ValueError(f"{path}: missing column header row")
    return rows, meta
