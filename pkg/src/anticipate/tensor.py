"""Dense tensors with reverse-mode automatic differentiation.

A ``Tape`` records every differentiable op in execution order (a valid
topological order by construction); ``backward`` walks it once in reverse,
accumulating gradients additively over fan-out. Ops are vectorized numpy
kernels with hand-written backward rules. Training runs in float32; the
gradient-check suite runs the same code in float64.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DataError, DomainError, ShapeError

DEFAULT_DTYPE = np.float32

# additive mask value; large enough that exp(x - max) underflows to exactly 0
# after max-subtraction in both precisions
_MASK_FILL = -1e9


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def append(self, node: "TapeNode") -> None:
        node.order = len(self.nodes)
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


class TapeNode:
    __slots__ = ("op", "inputs", "out", "bwd", "order")

    def __init__(self, op, inputs, out, bwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd
        self.order = -1


_ACTIVE_TAPE: Optional[Tape] = None


@contextmanager
def recording(tape: Optional[Tape] = None):
    """Activate a tape for the duration of the block; yields the tape."""
    global _ACTIVE_TAPE
    if _ACTIVE_TAPE is not None:
        raise ContractError("a tape is already active; forward/backward is single-threaded per tape")
    tape = tape if tape is not None else Tape()
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = None


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


class Tensor:
    """n-dimensional array, optionally tracked on the active tape."""

    __slots__ = ("data", "grad", "requires_grad", "tape_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.tape_node: Optional[TapeNode] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Copy of this tensor's view with no tape history and no grad flag."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], bwd) -> Tensor:
    tape = _ACTIVE_TAPE
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        node = TapeNode(op, tuple(inputs), out, bwd)
        tape.append(node)
        out.tape_node = node
    return out


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.tape_node is not None


def backward(tape: Tape, loss: Tensor) -> dict:
    """Propagate d(loss)/d(tensor) to every requires_grad tensor on the tape.

    Returns a map {leaf tensor -> gradient array}; gradients are also
    accumulated into each leaf's ``.grad``. The tape is recorded in execution
    order, so one reverse scan visits consumers before producers.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss.tape_node is None:
        raise ContractError("loss is not recorded on a tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        holders.pop(id(node.out), None)
        for inp, gin in zip(node.inputs, node.bwd(g)):
            if gin is None or not _tracked(inp):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin
                holders[key] = inp

    grad_map: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = holders[key]
        if not t.requires_grad:
            continue
        t.grad = g if t.grad is None else t.grad + g
        grad_map[t] = t.grad
    return grad_map


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise / linear algebra ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul_elementwise", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul_elementwise", out, (a, b), bwd)


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    out = a.data * factor

    def bwd(g):
        return (g * factor,)

    return _record("scale", out, (a,), bwd)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if ad.ndim > 2 and bd.ndim == 2:
        # stacked rows x one matrix: flatten to a single gemm instead of a
        # batch loop, both here and for the gradients
        k, m = bd.shape
        flat = ad.reshape(-1, k)
        out = (flat @ bd).reshape(ad.shape[:-1] + (m,))

        def bwd(g):
            gf = g.reshape(-1, m)
            return (gf @ bd.T).reshape(ad.shape), flat.T @ gf

        return _record("matmul", out, (a, b), bwd)

    out = ad @ bd

    def bwd(g):
        ga = _unbroadcast(g @ _swap(bd), ad.shape)
        gb = _unbroadcast(_swap(ad) @ g, bd.shape)
        return ga, gb

    return _record("matmul", out, (a, b), bwd)


def transpose(a, axes: Optional[tuple] = None) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError(f"transpose: need at least 2-d, got {a.shape}")
    if axes is None:
        out = _swap(a.data)

        def bwd(g):
            return (_swap(g),)

    else:
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out = np.transpose(a.data, axes)

        def bwd(g):
            return (np.transpose(g, inv),)

    return _record("transpose", out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    orig = a.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _record("reshape", out, (a,), bwd)


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}: {e}") from None
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(ts), bwd)


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """slice(axis, range): contiguous slice along one axis."""
    a = as_tensor(a)
    n = a.data.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: range [{start}, {stop}) out of bounds for axis {axis} of size {n}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _record("slice", out, (a,), bwd)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record("sum", out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, shape) / count,)

    return _record("mean", out, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise DomainError("log: empty input of shape %r" % (a.data.shape,))
    out = np.log(a.data)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _record("log", out, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record("exp", out, (a,), bwd)


def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    if a.data.shape[axis] == 0:
        raise DomainError(f"softmax: empty axis {axis} in shape {a.shape}")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", out, (a,), bwd)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    # exact (erf) form; derivative is Phi(x) + x * phi(x)
    a = as_tensor(a)
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi_cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi_cdf + x * pdf),)

    return _record("gelu", out.astype(x.dtype, copy=False), (a,), bwd)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    a = as_tensor(a)
    if a.data.shape[-1] == 0:
        raise DomainError("layer_norm: empty last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _record("layer_norm", out, (a,), bwd)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    m = np.maximum(n, eps)
    out = x / m
    live = n > eps

    def bwd(g):
        dot = (g * x).sum(axis=axis, keepdims=True)
        full = g / m - out * (dot / (m * m))
        return (np.where(live, full, g / m),)

    return _record("l2_normalize", out, (a,), bwd)


def embedding_lookup(table, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(f"embedding_lookup: id out of range [0, {table.shape[0]})")
    out = table.data[ids]
    tshape = table.data.shape

    def bwd(g):
        gt = np.zeros(tshape, dtype=g.dtype)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record("embedding_lookup", out, (table,), bwd)


def bag_project(table, ids: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum of table rows: out[...] = sum_k weights[..., k] * table[ids[..., k]].

    Equivalent to projecting a sparse bag vector through the table; padding
    entries use weight 0 (any valid id). Weights are data, not differentiated.
    """
    table = as_tensor(table)
    ids = np.asarray(ids)
    weights = np.asarray(weights)
    if ids.shape != weights.shape:
        raise ShapeError(f"bag_project: ids shape {ids.shape} != weights shape {weights.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(f"bag_project: id out of range [0, {table.shape[0]})")
    rows = table.data[ids]  # (..., k, d)
    w = weights.astype(table.dtype, copy=False)
    out = np.einsum("...k,...kd->...d", w, rows)
    tshape = table.data.shape

    def bwd(g):
        gt = np.zeros(tshape, dtype=g.dtype)
        contrib = w[..., :, None] * g[..., None, :]
        np.add.at(gt, ids.reshape(-1), contrib.reshape(-1, tshape[-1]))
        return (gt,)

    return _record("bag_project", out, (table,), bwd)


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    n = diff.size

    def bwd(g):
        base = (2.0 / n) * diff * g
        return base, -base

    return _record("mse", out, (pred, target), bwd)


def cross_entropy_with_logits(logits, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch; targets are class indices."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_with_logits: logits must be 2-d, got {logits.shape}")
    b, c = logits.shape
    if targets.shape != (b,):
        raise ShapeError(f"cross_entropy_with_logits: targets shape {targets.shape} != ({b},)")
    if not np.issubdtype(targets.dtype, np.integer):
        raise DataError("cross_entropy_with_logits: targets must be integers")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise DataError(f"cross_entropy_with_logits: target class out of range [0, {c})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    losses = (lse[:, 0] - z[rows, targets])
    out = np.asarray(losses.mean(), dtype=x.dtype)

    def bwd(g):
        p = np.exp(z - lse)
        p[rows, targets] -= 1.0
        return (g * p / b,)

    return _record("cross_entropy_with_logits", out, (logits,), bwd)


# ---------------------------------------------------------------------------
# generic dispatcher

_OP_TABLE = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "sub": lambda inputs, attrs: sub(*inputs),
    "mul_elementwise": lambda inputs, attrs: mul(*inputs),
    "scale": lambda inputs, attrs: scale(inputs[0], attrs["factor"]),
    "concat": lambda inputs, attrs: concat(inputs, attrs["axis"]),
    "slice": lambda inputs, attrs: narrow(inputs[0], attrs["axis"], attrs["start"], attrs["stop"]),
    "transpose": lambda inputs, attrs: transpose(inputs[0], attrs.get("axes")),
    "mean": lambda inputs, attrs: mean(inputs[0], attrs.get("axis")),
    "sum": lambda inputs, attrs: reduce_sum(inputs[0], attrs.get("axis")),
    "softmax": lambda inputs, attrs: softmax(inputs[0], attrs["axis"]),
    "log": lambda inputs, attrs: log(inputs[0]),
    "exp": lambda inputs, attrs: exp(inputs[0]),
    "gelu": lambda inputs, attrs: gelu(inputs[0]),
    "layer_norm": lambda inputs, attrs: layer_norm(inputs[0], attrs.get("eps", 1e-5)),
    "l2_normalize": lambda inputs, attrs: l2_normalize(
        inputs[0], attrs.get("axis", -1), attrs.get("eps", 1e-12)
    ),
    "embedding_lookup": lambda inputs, attrs: embedding_lookup(inputs[0], attrs["ids"]),
    "mse": lambda inputs, attrs: mse(*inputs),
    "cross_entropy_with_logits": lambda inputs, attrs: cross_entropy_with_logits(
        inputs[0], attrs["targets"]
    ),
}


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Dispatch one named op; records it on the active tape when tracked."""
    if kind not in _OP_TABLE:
        raise ContractError(f"forward_op: unknown op kind '{kind}'")
    return _OP_TABLE[kind](list(inputs), attrs or {})


def op_kinds() -> list[str]:
    return sorted(_OP_TABLE)
