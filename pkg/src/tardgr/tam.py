"""Task-aware relevance model.

Scores a (query, candidate) subgraph-encoding pair with two paths over
the 2-token sequence: a multi-head attention semantic path, and a
structure path that projects to a narrow width, runs attention layers
with residual + layer-norm, applies a position-wise FFN, propagates over
the normalized pair adjacency, and mean-pools. A ReLU head maps the
concatenated paths to one scalar. Pretraining fits labeled relevance
values with a bi-level loss: squared-error magnitude fitting plus a
pairwise ordinal term that penalizes score inversions.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .seeds import stream_rng

__all__ = [
    "PAIR_ADJACENCY",
    "HEAD_PARAMS",
    "PairBatch",
    "TamParams",
    "init_tam",
    "make_leaves",
    "forward_scores_tokens",
    "semantic_encode",
    "structure_encode",
    "score",
    "score_pairs",
    "biscl_loss",
    "train_relevance_model",
    "resolve_tokens",
    "pretrain_tam",
    "write_training_log",
    "save_tam",
    "load_tam",
]

log = logging.getLogger(__name__)

# the pair graph is complete on two tokens
PAIR_ADJACENCY = np.array([[0.0, 1.0], [1.0, 0.0]])


@dataclass
class PairBatch:
    """Token 0 is the query encoding, token 1 the candidate; targets are
    optional (scoring a batch needs none)."""

    tokens: np.ndarray  # [B x 2 x d]
    targets: np.ndarray | None = None
    adjacency: np.ndarray = field(
        default_factory=lambda: PAIR_ADJACENCY.copy())

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        if self.tokens.ndim != 3 or self.tokens.shape[1] != 2:
            raise ValueError(
                f"pair tokens must be [B x 2 x d], got {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("pair tokens contain non-finite values")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape != (len(self.tokens),):
                raise ValueError(
                    f"targets shape {self.targets.shape} != "
                    f"({len(self.tokens)},)")


@dataclass
class TamParams:
    arrays: dict
    d: int
    heads: int
    structure_layers: int
    d_hid: int
    hidden: int

    def __post_init__(self):
        self.arrays = {k: np.asarray(v, dtype=np.float32)
                       for k, v in self.arrays.items()}
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} contains non-finite "
                                 f"values")
        if self.d % self.heads or self.d_hid % self.heads:
            raise ValueError(
                f"head count {self.heads} must divide widths "
                f"{self.d} and {self.d_hid}")


def _head_names(prefix: str, heads: int):
    for i in range(heads):
        yield (f"{prefix}.h{i}.wq", f"{prefix}.h{i}.wk", f"{prefix}.h{i}.wv")


def init_tam(d: int, *, heads: int = 4, structure_layers: int = 2,
             d_hid: int = 32, hidden: int = 64, seed: int = 0) -> TamParams:
    """Weight matrices uniform(-0.1, 0.1); biases and layer-norm shifts
    zero; layer-norm gains one."""
    rng = stream_rng(seed, "tam.init")

    def u(*shape):
        return rng.uniform(-0.1, 0.1, shape).astype(np.float32)

    arrays = {"pos": u(2, d)}
    dk = d // heads
    for wq, wk, wv in _head_names("sem", heads):
        arrays[wq], arrays[wk], arrays[wv] = u(d, dk), u(d, dk), u(d, dk)
    arrays["sem.wo"] = u(d, d)
    arrays["str.proj.w"] = u(d, d_hid)
    arrays["str.proj.b"] = np.zeros(d_hid, np.float32)
    dk2 = d_hid // heads
    for layer in range(structure_layers):
        for wq, wk, wv in _head_names(f"str.l{layer}", heads):
            arrays[wq] = u(d_hid, dk2)
            arrays[wk] = u(d_hid, dk2)
            arrays[wv] = u(d_hid, dk2)
        arrays[f"str.l{layer}.wo"] = u(d_hid, d_hid)
        arrays[f"str.l{layer}.ln.g"] = np.ones(d_hid, np.float32)
        arrays[f"str.l{layer}.ln.b"] = np.zeros(d_hid, np.float32)
    arrays["str.ffn.w1"] = u(d_hid, d_hid)
    arrays["str.ffn.b1"] = np.zeros(d_hid, np.float32)
    arrays["str.ffn.w2"] = u(d_hid, d_hid)
    arrays["str.ffn.b2"] = np.zeros(d_hid, np.float32)
    arrays["str.out.w"] = u(d_hid, d)
    arrays["score.w"] = u(3 * d, hidden)
    arrays["score.b"] = np.zeros(hidden, np.float32)
    arrays["score.v"] = u(hidden)
    return TamParams(arrays=arrays, d=d, heads=heads,
                     structure_layers=structure_layers, d_hid=d_hid,
                     hidden=hidden)


# ---------------------------------------------------------------------------
# taped forward


def _attention(h: T.Tensor, leaves: dict, prefix: str, heads: int,
               width: int) -> T.Tensor:
    dk = width // heads
    outs = []
    for wq, wk, wv in _head_names(prefix, heads):
        q = T.matmul(h, leaves[wq])
        k = T.matmul(h, leaves[wk])
        v = T.matmul(h, leaves[wv])
        logits = T.scale(T.matmul(q, T.transpose_last(k)), 1.0 / math.sqrt(dk))
        outs.append(T.matmul(T.row_softmax(logits), v))
    return T.matmul(T.concat(outs, axis=-1), leaves[f"{prefix}.wo"])


def _with_position(leaves: dict, tokens: np.ndarray) -> T.Tensor:
    return T.add(T.Tensor(tokens), leaves["pos"])


def _semantic_path(leaves: dict, h_pos: T.Tensor, heads: int,
                   d: int) -> T.Tensor:
    att = _attention(h_pos, leaves, "sem", heads, d)
    return T.reshape(att, (att.shape[0], 2 * d))


def _propagation_matrix(adjacency: np.ndarray) -> np.ndarray:
    a_plus = np.asarray(adjacency, dtype=np.float64) + np.eye(2)
    return a_plus / a_plus.sum(axis=1, keepdims=True)


def _structure_path(leaves: dict, h_pos: T.Tensor, adjacency: np.ndarray,
                    layers: int, heads: int, d_hid: int) -> T.Tensor:
    h = T.add(T.matmul(h_pos, leaves["str.proj.w"]), leaves["str.proj.b"])
    for layer in range(layers):
        att = _attention(h, leaves, f"str.l{layer}", heads, d_hid)
        normed = T.layer_norm(T.add(h, att))
        h = T.add(T.mul(normed, leaves[f"str.l{layer}.ln.g"]),
                  leaves[f"str.l{layer}.ln.b"])
    f = T.relu(T.add(T.matmul(h, leaves["str.ffn.w1"]), leaves["str.ffn.b1"]))
    f = T.add(T.matmul(f, leaves["str.ffn.w2"]), leaves["str.ffn.b2"])
    prop = T.matmul(T.Tensor(_propagation_matrix(adjacency)), f)
    out = T.matmul(prop, leaves["str.out.w"])
    return T.reduce_mean(out, axis=1)


def _score_head(leaves: dict, h_sem: T.Tensor, h_str: T.Tensor,
                hidden: int) -> T.Tensor:
    h_task = T.concat([h_sem, h_str], axis=-1)
    pre = T.relu(T.add(T.matmul(h_task, leaves["score.w"]),
                       leaves["score.b"]))
    s = T.matmul(pre, T.reshape(leaves["score.v"], (hidden, 1)))
    return T.reshape(s, (s.shape[0],))


def make_leaves(tape: T.Tape, arrays: dict) -> dict:
    """One leaf per parameter array; storage is shared, so optimizer
    steps write through."""
    return {name: tape.leaf(arr, name=name) for name, arr in arrays.items()}


HEAD_PARAMS = ("score.w", "score.b", "score.v")


def forward_scores_tokens(leaves: dict, tokens: T.Tensor,
                          adjacency: np.ndarray, *, heads: int,
                          structure_layers: int, d_hid: int, hidden: int,
                          use_semantic: bool = True,
                          use_structure: bool = True) -> T.Tensor:
    """Score a [B x 2 x d] token tensor (taped or constant). A disabled
    path contributes zeros and receives no gradient."""
    b, _, d = tokens.shape
    h_pos = T.add(tokens, leaves["pos"])
    if use_semantic:
        h_sem = _semantic_path(leaves, h_pos, heads, d)
    else:
        h_sem = T.Tensor(np.zeros((b, 2 * d), dtype=np.float32))
    if use_structure:
        h_str = _structure_path(leaves, h_pos, adjacency,
                                structure_layers, heads, d_hid)
    else:
        h_str = T.Tensor(np.zeros((b, d), dtype=np.float32))
    return _score_head(leaves, h_sem, h_str, hidden)


def forward_scores(leaves: dict, batch: PairBatch, *, heads: int,
                   structure_layers: int, d_hid: int,
                   hidden: int) -> T.Tensor:
    return forward_scores_tokens(leaves, T.Tensor(batch.tokens),
                                 batch.adjacency, heads=heads,
                                 structure_layers=structure_layers,
                                 d_hid=d_hid, hidden=hidden)


def score_pairs(params: TamParams, tokens: np.ndarray, *,
                use_semantic: bool = True,
                use_structure: bool = True) -> np.ndarray:
    """Relevance scores for raw [B x 2 x d] tokens, with optional path
    ablation."""
    batch = PairBatch(tokens=tokens)
    tape = T.Tape()
    leaves = make_leaves(tape, params.arrays)
    out = forward_scores_tokens(leaves, T.Tensor(batch.tokens),
                                batch.adjacency, heads=params.heads,
                                structure_layers=params.structure_layers,
                                d_hid=params.d_hid, hidden=params.hidden,
                                use_semantic=use_semantic,
                                use_structure=use_structure)
    return out.data.copy()


def _run(params: TamParams, batch: PairBatch):
    tape = T.Tape()
    leaves = make_leaves(tape, params.arrays)
    h_pos = _with_position(leaves, batch.tokens)
    return tape, leaves, h_pos


def semantic_encode(batch: PairBatch, params: TamParams) -> np.ndarray:
    """[B x 2d]: the two attended token outputs, concatenated."""
    _, leaves, h_pos = _run(params, batch)
    return _semantic_path(leaves, h_pos, params.heads,
                          params.d).data.copy()


def structure_encode(batch: PairBatch, params: TamParams) -> np.ndarray:
    """[B x d]: projected attention stack, FFN, pair propagation, mean
    pool."""
    _, leaves, h_pos = _run(params, batch)
    return _structure_path(leaves, h_pos, batch.adjacency,
                           params.structure_layers, params.heads,
                           params.d_hid).data.copy()


def score(batch: PairBatch, params: TamParams) -> np.ndarray:
    """Relevance score per pair. Pure: batch order does not matter."""
    _, leaves, h_pos = _run(params, batch)
    h_sem = _semantic_path(leaves, h_pos, params.heads, params.d)
    h_str = _structure_path(leaves, h_pos, batch.adjacency,
                            params.structure_layers, params.heads,
                            params.d_hid)
    return _score_head(leaves, h_sem, h_str, params.hidden).data.copy()


# ---------------------------------------------------------------------------
# bi-level loss


def ordered_pairs(targets: np.ndarray):
    """Index arrays (ks, ls) with targets[k] > targets[l]."""
    c = np.asarray(targets, dtype=np.float64)
    ks, ls = np.nonzero(c[:, None] > c[None, :])
    return ks, ls


def biscl_loss(scores: T.Tensor, targets: np.ndarray, *, rho: float,
               tau: float):
    """Returns (loss, magnitude term, ordinal term).

    magnitude: mean squared error against the targets.
    ordinal: log[1 + sum over pairs with C_k > C_l of exp((s_l - s_k)/tau)];
    zero when no pair is strictly ordered.
    loss: rho * ordinal + (1 - rho) * magnitude.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho {rho} outside [0, 1]")
    if tau <= 0:
        raise ValueError(f"temperature {tau} must be positive")
    diff = T.add(scores, T.Tensor(-np.asarray(targets, dtype=np.float64)))
    l_mtl = T.reduce_mean(T.mul(diff, diff))
    ks, ls = ordered_pairs(targets)
    if len(ks):
        s_l = T.gather_rows(scores, ls)
        s_k = T.gather_rows(scores, ks)
        z = T.scale(T.add(s_l, T.scale(s_k, -1.0)), 1.0 / tau)
        l_ocl = T.log(T.add(T.reduce_sum(T.exp(z)), T.Tensor(1.0)))
    else:
        l_ocl = T.scale(T.reduce_sum(scores), 0.0)
    loss = T.add(T.scale(l_ocl, rho), T.scale(l_mtl, 1.0 - rho))
    return loss, l_mtl, l_ocl


# ---------------------------------------------------------------------------
# training


def train_relevance_model(tokens: np.ndarray, targets: np.ndarray, *,
                          epochs: int, lr: float = 1e-3, rho: float = 0.6,
                          tau: float = 1.0, batch_size: int = 64,
                          seed: int = 0, heads: int = 4,
                          structure_layers: int = 2, d_hid: int = 32,
                          hidden: int = 64, params: TamParams | None = None):
    """Minibatch training against the bi-level loss.

    Returns (params, history); history rows are dicts with epoch and the
    batch-size-weighted mean of each loss term.
    """
    data = PairBatch(tokens=tokens, targets=targets)
    n = len(data.tokens)
    if n == 0:
        raise ValueError("no training pairs")
    if params is None:
        params = init_tam(data.tokens.shape[2], heads=heads,
                          structure_layers=structure_layers, d_hid=d_hid,
                          hidden=hidden, seed=seed)
    history = []
    for epoch in range(epochs):
        rng = stream_rng(seed, f"tam.e{epoch}")
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, batch_size):
            take = order[start: start + batch_size]
            batch = PairBatch(tokens=data.tokens[take],
                              targets=data.targets[take])
            tape = T.Tape()
            leaves = make_leaves(tape, params.arrays)
            scores = forward_scores(
                leaves, batch, heads=params.heads,
                structure_layers=params.structure_layers,
                d_hid=params.d_hid, hidden=params.hidden)
            loss, l_mtl, l_ocl = biscl_loss(scores, batch.targets,
                                            rho=rho, tau=tau)
            grads = T.backward(tape, loss)
            T.optimizer_step(leaves, grads, lr)
            sums += len(take) * np.array([float(l_mtl.data),
                                          float(l_ocl.data),
                                          float(loss.data)])
        l_mtl_m, l_ocl_m, l_m = sums / n
        history.append({"epoch": epoch, "l_mtl": l_mtl_m, "l_ocl": l_ocl_m,
                        "l_biscl": l_m})
        log.info("epoch %d l_mtl %.6f l_ocl %.6f l_biscl %.6f",
                 epoch, l_mtl_m, l_ocl_m, l_m)
    return params, history


def resolve_tokens(triples, library):
    """Pair tokens from library keys. Rows whose centers are not in the
    library are skipped and counted."""
    tokens, targets, skipped = [], [], 0
    lookup = library.row_of_center
    for t in triples:
        qrow = lookup.get(t.query_center)
        crow = lookup.get(t.candidate_center)
        if qrow is None or crow is None:
            skipped += 1
            continue
        tokens.append(np.stack([library.keys[qrow], library.keys[crow]]))
        targets.append(t.c_r)
    if not tokens:
        raise ValueError("no labeled rows resolve against the library")
    if skipped:
        log.warning("%d labeled rows did not resolve against the library",
                    skipped)
    return (np.stack(tokens), np.array(targets, dtype=np.float64), skipped)


def pretrain_tam(triples, library, **train_kw):
    """Resolve labeled rows against the library and train.

    Returns (params, history, skipped row count).
    """
    tokens, targets, skipped = resolve_tokens(triples, library)
    params, history = train_relevance_model(tokens, targets, **train_kw)
    return params, history, skipped


def write_training_log(path, history) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for row in history:
            fh.write(f"epoch {row['epoch']} l_mtl {row['l_mtl']!r} "
                     f"l_ocl {row['l_ocl']!r} l_biscl {row['l_biscl']!r}\n")


# ---------------------------------------------------------------------------
# persistence


def save_tam(path, params: TamParams, extra_meta: dict | None = None) -> None:
    meta = {"d": params.d, "heads": params.heads,
            "structure_layers": params.structure_layers,
            "d_hid": params.d_hid, "hidden": params.hidden}
    if extra_meta:
        overlap = set(meta) & set(extra_meta)
        if overlap:
            raise ValueError(f"extra meta shadows {sorted(overlap)}")
        meta.update(extra_meta)
    save_checkpoint(path, params.arrays, meta)


def load_tam(path):
    """Returns (params, meta)."""
    arrays, meta = load_checkpoint(path)
    params = TamParams(arrays=arrays, d=int(meta["d"]),
                       heads=int(meta["heads"]),
                       structure_layers=int(meta["structure_layers"]),
                       d_hid=int(meta["d_hid"]), hidden=int(meta["hidden"]))
    return params, meta
