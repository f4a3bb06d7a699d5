"""Dense tensors with taped reverse-mode differentiation.

Values are stored in 32-bit floats by default; reductions accumulate in
64-bit before casting back. Every forward op checks its output for
NaN/Inf so a numeric fault surfaces at the op that produced it rather
than three modules later.

Gradients are exact reverse-mode: ops append nodes to a `Tape` in
creation order, which is already a topological order, and `backward`
walks it once in reverse. No graph search, no re-visits, bit-identical
across runs.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NumericsError",
    "Tensor",
    "Tape",
    "Gradients",
    "backward",
    "forward_op",
    "record_op",
    "optimizer_step",
    "grad_check",
    "matmul",
    "add",
    "mul",
    "scale",
    "concat",
    "row_softmax",
    "relu",
    "sigmoid",
    "layer_norm",
    "reduce_sum",
    "reduce_mean",
    "cosine_similarity",
    "squared_error",
    "log",
    "exp",
    "gather_rows",
    "reshape",
    "transpose_last",
]

_FLOAT_KINDS = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's algebra."""


class NumericsError(ArithmeticError):
    """A forward op produced NaN/Inf, or a gradient went non-finite."""


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in _FLOAT_KINDS:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense array plus its position on a tape, if it has one.

    Constants (no tape) and recorded values share this type; ops accept
    either and only record when some input carries a tape.
    """

    __slots__ = ("data", "requires_grad", "tape", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False,
                 tape: "Tape | None" = None, node_id: int | None = None,
                 name: str | None = None):
        self.data = _as_float_array(data)
        self.requires_grad = requires_grad
        self.tape = tape
        self.node_id = node_id
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"

    # arithmetic sugar; python scalars become 0-d constants
    def __add__(self, other):
        return add(self, _ensure_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_ensure_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_ensure_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _ensure_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _ensure_tensor(other))

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis: int | None = None):
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _ensure_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("kind", "input_ids", "vjp", "shape")

    def __init__(self, kind: str, input_ids: tuple, vjp, shape: tuple):
        self.kind = kind
        self.input_ids = input_ids
        self.vjp = vjp
        self.shape = shape


class Tape:
    """Ordered record of ops. Creation order doubles as topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, data, name: str | None = None) -> Tensor:
        """Register a trainable leaf. Wraps `data` without copying when it
        is already a float array, so optimizer updates write through to
        the caller's storage."""
        arr = _as_float_array(data)
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, arr.shape))
        return Tensor(arr, requires_grad=True, tape=self,
                      node_id=node_id, name=name)

    def _record(self, kind: str, input_ids: tuple, vjp, shape: tuple) -> int:
        node_id = len(self.nodes)
        self.nodes.append(_Node(kind, input_ids, vjp, shape))
        return node_id


def _check_finite(kind: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NumericsError(f"{kind}: forward produced non-finite values")


def _common_tape(kind: str, inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError(f"{kind}: inputs recorded on different tapes")
    return tape


def record_op(kind: str, out: np.ndarray, inputs: Sequence[Tensor],
              vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Finish an op: guard the output, and append a node when any input
    is on a tape. `vjp(grad_out)` must return one gradient (or None) per
    entry of `inputs`, aligned by position.

    Exposed so graph code can record ops whose kernels live outside this
    module (sparse propagation).
    """
    _check_finite(kind, out)
    tape = _common_tape(kind, inputs)
    if tape is None:
        return Tensor(out)
    input_ids = tuple(t.node_id if t.tape is tape else None for t in inputs)
    node_id = tape._record(kind, input_ids, vjp, out.shape)
    return Tensor(out, requires_grad=True, tape=tape, node_id=node_id)


class Gradients:
    """Gradient lookup for one backward pass, keyed by tape position."""

    def __init__(self, tape: Tape, per_node: list):
        self._tape = tape
        self._per_node = per_node

    def wrt(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is not self._tape or tensor.node_id is None:
            raise ValueError("gradient requested for a tensor not on this tape")
        g = self._per_node[tensor.node_id]
        if g is None:
            g = np.zeros(self._tape.nodes[tensor.node_id].shape,
                         dtype=tensor.dtype)
            self._per_node[tensor.node_id] = g
        return g


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse-mode sweep from `loss` back to the leaves.

    The loss must be scalar and recorded on `tape`. Each node is visited
    exactly once, in reverse creation order; leaves the loss does not
    reach get zero gradients.
    """
    if loss.tape is not tape or loss.node_id is None:
        raise ValueError("backward: loss was not recorded on this tape")
    if loss.size != 1:
        raise ShapeError(
            f"backward: loss must be scalar, got shape {loss.shape}")
    per_node: list = [None] * len(tape.nodes)
    per_node[loss.node_id] = np.ones(tape.nodes[loss.node_id].shape,
                                     dtype=loss.dtype)
    for nid in range(loss.node_id, -1, -1):
        grad = per_node[nid]
        if grad is None:
            continue
        node = tape.nodes[nid]
        if node.vjp is None:
            continue
        for input_id, gin in zip(node.input_ids, node.vjp(grad)):
            if input_id is None or gin is None:
                continue
            if per_node[input_id] is None:
                per_node[input_id] = gin.copy()
            else:
                per_node[input_id] += gin
    return Gradients(tape, per_node)


# ---------------------------------------------------------------------------
# ops


def _sum_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce broadcast gradient back to an operand's shape. Only leading
    axes and trailing bias-style broadcasts occur here."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D by 2-D, or batched when either side carries a
    leading batch axis."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim > 3 or b.ndim > 3:
        raise ShapeError(f"matmul: ranks {a.ndim} and {b.ndim} unsupported")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dims differ, {a.shape} by {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(
            f"matmul: batch dims differ, {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b_data, -1, -2))
        gb = np.matmul(np.swapaxes(a_data, -1, -2), g)
        return (_sum_to_shape(ga, a_data.shape),
                _sum_to_shape(gb, b_data.shape))

    return record_op("matmul", out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. Shapes must match, or `b` must equal a trailing
    slice of `a`'s shape (bias add; scalars included)."""
    if a.shape != b.shape and a.shape[a.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not align")
    out = a.data + b.data
    b_shape = b.shape

    def vjp(g):
        return g, _sum_to_shape(g, b_shape)

    return record_op("add", out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; same shapes, either side scalar, or `b` a
    trailing slice of `a`'s shape (gain vectors)."""
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0 \
            and a.shape[a.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not align")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return (_sum_to_shape(g * b_data, a_data.shape),
                _sum_to_shape(g * a_data, b_data.shape))

    return record_op("mul", out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return record_op("scale", out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_ensure_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    base = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != base:
            raise ShapeError(
                f"concat: ranks differ, {tensors[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return record_op("concat", out, tuple(tensors), vjp)


def row_softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    s = out

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record_op("row_softmax", out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return record_op("relu", out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    s = out

    def vjp(g):
        return (g * s * (1.0 - s),)

    return record_op("sigmoid", out, (x,), vjp)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance. No affine
    parameters."""
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm: empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    out = ((x.data - mu) * inv).astype(x.dtype)
    xhat = out
    n = x.shape[-1]

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True, dtype=np.float64)
        gx = (g * xhat).mean(axis=-1, keepdims=True, dtype=np.float64)
        return ((inv * (g - gm - xhat * gx)).astype(g.dtype),)

    return record_op("layer_norm", out, (x,), vjp)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, dtype=np.float64), dtype=x.dtype)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record_op("reduce_sum", out, (x,), vjp)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError("reduce_mean: reduction over zero elements")
    out = np.asarray(x.data.mean(axis=axis, dtype=np.float64), dtype=x.dtype)
    shape = x.shape

    def vjp(g):
        scaled = g / n
        if axis is None:
            return (np.broadcast_to(scaled, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(scaled, axis), shape).copy(),)

    return record_op("reduce_mean", out, (x,), vjp)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between vectors; rowwise for 2-D inputs.

    A zero-norm operand yields similarity 0 with zero gradient rather
    than dividing by zero.
    """
    if a.shape != b.shape or a.ndim not in (1, 2):
        raise ShapeError(
            f"cosine_similarity: need matching 1-D or 2-D, got {a.shape} "
            f"and {b.shape}")
    ad = a.data.astype(np.float64)
    bd = b.data.astype(np.float64)
    if a.ndim == 1:
        ad = ad[None, :]
        bd = bd[None, :]
    na = np.sqrt((ad * ad).sum(axis=1))
    nb = np.sqrt((bd * bd).sum(axis=1))
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    dots = (ad * bd).sum(axis=1)
    cos = np.where(ok, dots / denom, 0.0)
    out = cos.astype(a.dtype) if a.ndim == 2 else cos[0].astype(a.dtype)
    orig_ndim = a.ndim
    dt = a.dtype

    def vjp(g):
        gv = np.asarray(g, dtype=np.float64)
        if orig_ndim == 1:
            gv = gv.reshape(1)
        ga = np.zeros_like(ad)
        gb = np.zeros_like(bd)
        if ok.any():
            w = np.where(ok, gv, 0.0)[:, None]
            c = np.where(ok, cos, 0.0)[:, None]
            na_s = np.where(ok, na, 1.0)[:, None]
            nb_s = np.where(ok, nb, 1.0)[:, None]
            ga = w * (bd / (na_s * nb_s) - c * ad / (na_s * na_s))
            gb = w * (ad / (na_s * nb_s) - c * bd / (nb_s * nb_s))
            ga[~ok] = 0.0
            gb[~ok] = 0.0
        if orig_ndim == 1:
            ga = ga[0]
            gb = gb[0]
        return ga.astype(dt), gb.astype(dt)

    return record_op("cosine_similarity", np.asarray(out), (a, b), vjp)


def squared_error(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(
            f"squared_error: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    out = diff * diff

    def vjp(g):
        return 2.0 * g * diff, -2.0 * g * diff

    return record_op("squared_error", out, (a, b), vjp)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    d = x.data

    def vjp(g):
        return (g / d,)

    return record_op("log", out, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    e = out

    def vjp(g):
        return (g * e,)

    return record_op("exp", out, (x,), vjp)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows (first axis). Backward scatter-adds, so repeated
    indices accumulate."""
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim not in (1, 2):
        raise ShapeError(f"gather_rows: rank {x.ndim} unsupported")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(
            f"gather_rows: index out of range for {x.shape[0]} rows")
    out = x.data[idx]
    shape = x.shape
    dt = x.dtype

    def vjp(g):
        z = np.zeros(shape, dtype=dt)
        np.add.at(z, idx, g)
        return (z,)

    return record_op("gather_rows", out, (x,), vjp)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    target = tuple(int(s) for s in shape)
    if int(np.prod(target, dtype=np.int64)) != x.size and -1 not in target:
        raise ShapeError(f"reshape: cannot view {x.shape} as {target}")
    out = x.data.reshape(target)
    orig = x.shape

    def vjp(g):
        return (g.reshape(orig),)

    return record_op("reshape", out, (x,), vjp)


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose_last: rank {x.ndim} has no axis pair")
    out = np.swapaxes(x.data, -1, -2).copy()

    def vjp(g):
        return (np.swapaxes(g, -1, -2).copy(),)

    return record_op("transpose_last", out, (x,), vjp)


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "concat": concat,
    "row_softmax": row_softmax,
    "relu": relu,
    "sigmoid": sigmoid,
    "layer_norm": layer_norm,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "cosine_similarity": cosine_similarity,
    "squared_error": squared_error,
    "log": log,
    "exp": exp,
    "gather_rows": gather_rows,
    "reshape": reshape,
    "transpose_last": transpose_last,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by kind name. The named functions are the primary
    surface; this exists for uniform programmatic access."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise KeyError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def optimizer_step(params: Mapping[str, Tensor], grads: Gradients,
                   lr: float, weight_decay: float = 0.0) -> Mapping[str, Tensor]:
    """SGD with decoupled-style L2: theta <- theta - lr * (g + wd * theta).

    Updates parameter storage in place (leaves wrap caller arrays without
    copying). A non-finite gradient aborts, naming the parameter.
    """
    for name, t in params.items():
        g = grads.wrt(t)
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"optimizer_step: non-finite gradient for "
                                f"parameter {name!r}")
        t.data -= (lr * (g + weight_decay * t.data)).astype(t.dtype)
    return params


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-3) -> float:
    """Compare taped gradients of scalar `f` against central differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
    Runs in float64. A non-finite value of `f` at a perturbed point is an
    error, not a coordinate to skip.
    """
    base = np.asarray(point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(base.copy())
    out = f(x)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must be scalar, got {out.shape}")
    analytic = backward(tape, out).wrt(x).ravel()

    def eval_at(arr: np.ndarray) -> float:
        v = f(Tensor(arr))
        val = float(v.data)
        if not np.isfinite(val):
            raise NumericsError(
                "grad_check: f is non-finite at a perturbed point")
        return val

    flat = base.ravel()
    worst = 0.0
    for i in range(flat.size):
        delta = np.zeros_like(flat)
        delta[i] = step
        hi = eval_at((flat + delta).reshape(base.shape))
        lo = eval_at((flat - delta).reshape(base.shape))
        numeric = (hi - lo) / (2.0 * step)
        err = abs(float(analytic[i]) - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
