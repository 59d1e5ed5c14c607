"""Dense-tensor reverse-mode automatic differentiation over a fixed op set.

Tensors wrap contiguous row-major numpy arrays, float32 by default with a
float64 path for gradient verification.  Recording happens on an explicitly
entered ComputationTape; with no tape active the same kernels run as pure
numpy functions and record nothing, so inference is bitwise identical to the
traced forward pass.

Supported op kinds: matmul, add, mul, add_bias, relu, gelu, abs, max_reduce,
sum_reduce, square, div, layernorm, softmax, embedding_lookup, cross_entropy,
mse, l2_norm_rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, DimensionError, NumericError

_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_INV_SQRT_2PI = 0.3989422804014327


# === tensors ===


class Tensor:
    """A numpy array plus a leaf-gradient flag.  Hashable by identity."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def constant(data, dtype=np.float32) -> Tensor:
    """Wrap data as a non-differentiable tensor."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=np.float32) -> Tensor:
    """Wrap data as a trainable leaf."""
    return Tensor(data, requires_grad=True, dtype=dtype)


# === tape ===


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple[Tensor, ...]
    attrs: dict
    ctx: dict
    output: Tensor


class ComputationTape:
    """Wengert list: ops append in execution order, backward walks it reversed."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._produced: set[int] = set()

    def _record(self, kind, inputs, attrs, ctx, output) -> None:
        self.entries.append(TapeEntry(kind, inputs, attrs, ctx, output))
        self._produced.add(id(output))

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "ComputationTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


_TAPE_STACK: list[ComputationTape] = []


def active_tape() -> ComputationTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


_FINITE_CHECKS = [False]


class finite_checks:
    """Context manager: verify every op output is finite while enabled."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled

    def __enter__(self):
        self.prev = _FINITE_CHECKS[0]
        _FINITE_CHECKS[0] = self.enabled
        return self

    def __exit__(self, *exc):
        _FINITE_CHECKS[0] = self.prev


# === kernels ===
# Each op is a (fwd, bwd) pair over raw arrays.  fwd may stash values in ctx
# for reuse in bwd.  bwd returns one gradient per input (None = no gradient).


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise DimensionError(msg)


def _fwd_matmul(ins, attrs, ctx):
    a, b = ins
    tb = bool(attrs.get("transpose_b", False))
    _need(a.ndim == 2 and b.ndim == 2, f"matmul: need 2-d operands, got {a.shape} @ {b.shape}")
    k_a = a.shape[1]
    k_b = b.shape[1] if tb else b.shape[0]
    _need(k_a == k_b, f"matmul: inner dims differ, {a.shape} @ {b.shape} (transpose_b={tb})")
    return a @ b.T if tb else a @ b


def _bwd_matmul(ins, attrs, ctx, out, g):
    a, b = ins
    if attrs.get("transpose_b", False):
        return g @ b, g.T @ a
    return g @ b.T, a.T @ g


def _fwd_add(ins, attrs, ctx):
    a, b = ins
    _need(a.shape == b.shape, f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def _bwd_add(ins, attrs, ctx, out, g):
    return g, g


def _fwd_mul(ins, attrs, ctx):
    a, b = ins
    _need(a.shape == b.shape, f"mul: shape mismatch {a.shape} vs {b.shape}")
    return a * b


def _bwd_mul(ins, attrs, ctx, out, g):
    a, b = ins
    return g * b, g * a


def _fwd_add_bias(ins, attrs, ctx):
    x, b = ins
    _need(x.ndim == 2 and b.ndim == 1, f"add_bias: need matrix + vector, got {x.shape}, {b.shape}")
    _need(x.shape[1] == b.shape[0], f"add_bias: width mismatch {x.shape} vs {b.shape}")
    return x + b


def _bwd_add_bias(ins, attrs, ctx, out, g):
    return g, g.sum(axis=0)


def _fwd_relu(ins, attrs, ctx):
    (x,) = ins
    return np.maximum(x, np.zeros((), dtype=x.dtype))


def _bwd_relu(ins, attrs, ctx, out, g):
    (x,) = ins
    return (g * (x > 0),)


def _fwd_gelu(ins, attrs, ctx):
    # Exact Gaussian-CDF form x * Phi(x); no tanh approximation so the
    # near-zero tail keeps its true shape.
    (x,) = ins
    phi = ndtr(x)
    ctx["cdf"] = phi
    return (x * phi).astype(x.dtype, copy=False)


def _bwd_gelu(ins, attrs, ctx, out, g):
    (x,) = ins
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return ((g * (ctx["cdf"] + x * pdf)).astype(x.dtype, copy=False),)


def _fwd_abs(ins, attrs, ctx):
    (x,) = ins
    return np.abs(x)


def _bwd_abs(ins, attrs, ctx, out, g):
    (x,) = ins
    return (g * np.sign(x),)


def _fwd_max_reduce(ins, attrs, ctx):
    (x,) = ins
    axis = attrs.get("axis")
    return np.max(x, axis=axis)


def _bwd_max_reduce(ins, attrs, ctx, out, g):
    # Ties route the full gradient to the first maximum, matching argmax.
    (x,) = ins
    axis = attrs.get("axis")
    gx = np.zeros_like(x)
    if axis is None:
        gx[np.unravel_index(np.argmax(x), x.shape)] = g
    else:
        idx = np.expand_dims(np.argmax(x, axis=axis), axis)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis)
    return (gx,)


def _fwd_sum_reduce(ins, attrs, ctx):
    (x,) = ins
    return np.sum(x, axis=attrs.get("axis"), dtype=x.dtype)


def _bwd_sum_reduce(ins, attrs, ctx, out, g):
    (x,) = ins
    axis = attrs.get("axis")
    if axis is None:
        return (np.full_like(x, g),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


def _fwd_square(ins, attrs, ctx):
    (x,) = ins
    return x * x


def _bwd_square(ins, attrs, ctx, out, g):
    (x,) = ins
    return (g * 2 * x,)


def _fwd_div(ins, attrs, ctx):
    a, b = ins
    _need(a.shape == b.shape or b.shape == (), f"div: shape mismatch {a.shape} vs {b.shape}")
    return a / b


def _bwd_div(ins, attrs, ctx, out, g):
    a, b = ins
    ga = g / b
    gb = -g * a / (b * b)
    if b.shape == () and a.shape != ():
        gb = np.asarray(gb.sum(), dtype=b.dtype)
    return ga, gb


def _fwd_layernorm(ins, attrs, ctx):
    x, gamma, beta = ins
    _need(x.ndim == 2, f"layernorm: need a matrix, got {x.shape}")
    _need(gamma.shape == (x.shape[1],) and beta.shape == (x.shape[1],),
          f"layernorm: scale/shift must match width, got {gamma.shape}, {beta.shape} for {x.shape}")
    eps = attrs.get("eps", 1e-5)
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    ctx["inv"] = inv.astype(x.dtype, copy=False)
    ctx["xhat"] = xhat.astype(x.dtype, copy=False)
    return (xhat * gamma + beta).astype(x.dtype, copy=False)


def _bwd_layernorm(ins, attrs, ctx, out, g):
    x, gamma, beta = ins
    inv, xhat = ctx["inv"], ctx["xhat"]
    gh = g * gamma
    m1 = gh.mean(axis=1, keepdims=True)
    m2 = (gh * xhat).mean(axis=1, keepdims=True)
    gx = (inv * (gh - m1 - xhat * m2)).astype(x.dtype, copy=False)
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _fwd_softmax(ins, attrs, ctx):
    (x,) = ins
    _need(x.ndim == 2, f"softmax: need a matrix, got {x.shape}")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype, copy=False)


def _bwd_softmax(ins, attrs, ctx, out, g):
    dot = (g * out).sum(axis=1, keepdims=True)
    return ((out * (g - dot)).astype(out.dtype, copy=False),)


def _fwd_embedding_lookup(ins, attrs, ctx):
    (table,) = ins
    ids = np.asarray(attrs["ids"])
    _need(table.ndim == 2 and ids.ndim == 1, f"embedding_lookup: table {table.shape}, ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    return table[ids]


def _bwd_embedding_lookup(ins, attrs, ctx, out, g):
    (table,) = ins
    gt = np.zeros_like(table)
    np.add.at(gt, np.asarray(attrs["ids"]), g)
    return (gt,)


def _softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _fwd_cross_entropy(ins, attrs, ctx):
    # Hard targets: int vector of class ids.  Soft targets: per-row
    # probability weights with the same shape as the logits.
    (logits,) = ins
    targets = np.asarray(attrs["targets"])
    _need(logits.ndim == 2, f"cross_entropy: logits must be a matrix, got {logits.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1))
    if np.issubdtype(targets.dtype, np.integer):
        _need(targets.shape == (logits.shape[0],),
              f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
        if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
            raise DimensionError("cross_entropy: class id out of range")
        nll = log_z - z[np.arange(logits.shape[0]), targets]
    else:
        _need(targets.shape == logits.shape,
              f"cross_entropy: soft targets {targets.shape} vs logits {logits.shape}")
        nll = (targets * (log_z[:, None] - z)).sum(axis=1)
    return np.asarray(nll.mean(), dtype=logits.dtype)


def _bwd_cross_entropy(ins, attrs, ctx, out, g):
    (logits,) = ins
    targets = np.asarray(attrs["targets"])
    m = logits.shape[0]
    p = _softmax_rows(logits)
    if np.issubdtype(targets.dtype, np.integer):
        t = np.zeros_like(logits)
        t[np.arange(m), targets] = 1.0
        gx = p - t
    else:
        gx = p * targets.sum(axis=1, keepdims=True) - targets
    return ((g * gx / m).astype(logits.dtype, copy=False),)


def _fwd_mse(ins, attrs, ctx):
    pred, target = ins
    _need(pred.shape == target.shape, f"mse: shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    return np.asarray(np.mean(d * d), dtype=pred.dtype)


def _bwd_mse(ins, attrs, ctx, out, g):
    pred, target = ins
    gp = (g * 2.0 / pred.size) * (pred - target)
    gp = gp.astype(pred.dtype, copy=False)
    return gp, -gp


def _fwd_l2_norm_rows(ins, attrs, ctx):
    (x,) = ins
    _need(x.ndim == 2, f"l2_norm_rows: need a matrix, got {x.shape}")
    return np.sqrt((x * x).sum(axis=1))


def _bwd_l2_norm_rows(ins, attrs, ctx, out, g):
    (x,) = ins
    safe = np.where(out > 0, out, np.ones_like(out))
    scale = np.where(out > 0, g / safe, np.zeros_like(out))
    return ((x * scale[:, None]).astype(x.dtype, copy=False),)


@dataclass(frozen=True)
class _Op:
    fwd: Callable
    bwd: Callable


_OPS: dict[str, _Op] = {
    "matmul": _Op(_fwd_matmul, _bwd_matmul),
    "add": _Op(_fwd_add, _bwd_add),
    "mul": _Op(_fwd_mul, _bwd_mul),
    "add_bias": _Op(_fwd_add_bias, _bwd_add_bias),
    "relu": _Op(_fwd_relu, _bwd_relu),
    "gelu": _Op(_fwd_gelu, _bwd_gelu),
    "abs": _Op(_fwd_abs, _bwd_abs),
    "max_reduce": _Op(_fwd_max_reduce, _bwd_max_reduce),
    "sum_reduce": _Op(_fwd_sum_reduce, _bwd_sum_reduce),
    "square": _Op(_fwd_square, _bwd_square),
    "div": _Op(_fwd_div, _bwd_div),
    "layernorm": _Op(_fwd_layernorm, _bwd_layernorm),
    "softmax": _Op(_fwd_softmax, _bwd_softmax),
    "embedding_lookup": _Op(_fwd_embedding_lookup, _bwd_embedding_lookup),
    "cross_entropy": _Op(_fwd_cross_entropy, _bwd_cross_entropy),
    "mse": _Op(_fwd_mse, _bwd_mse),
    "l2_norm_rows": _Op(_fwd_l2_norm_rows, _bwd_l2_norm_rows),
}

OP_KINDS = tuple(sorted(_OPS))


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Run one op, recording it on the active tape when gradients are live."""
    op = _OPS.get(kind)
    if op is None:
        raise ContractError(f"unknown op kind {kind!r}")
    tensors = tuple(inputs)
    for t in tensors:
        if not isinstance(t, Tensor):
            raise ContractError(f"{kind}: inputs must be Tensors, got {type(t).__name__}")
    if len({t.dtype for t in tensors}) > 1:
        raise DimensionError(f"{kind}: mixed input dtypes " + str([str(t.dtype) for t in tensors]))
    attrs = dict(attrs) if attrs else {}
    ctx: dict = {}
    out_data = op.fwd(tuple(t.data for t in tensors), attrs, ctx)
    if _FINITE_CHECKS[0] and not np.all(np.isfinite(out_data)):
        raise NumericError(f"{kind}: non-finite output")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad or id(t) in tape._produced for t in tensors):
        tape._record(kind, tensors, attrs, ctx, out)
    return out


def backward(tape: ComputationTape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Reverse sweep.  Returns grads for every requires_grad leaf on the tape;
    leaves that did not contribute to the loss get zero gradients."""
    if loss.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise ContractError("backward: loss was not produced on this tape")

    leaves: dict[int, Tensor] = {}
    for entry in tape.entries:
        for t in entry.inputs:
            if t.requires_grad:
                leaves.setdefault(id(t), t)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for entry in reversed(tape.entries):
        g = grads.get(id(entry.output))
        if g is None:
            continue
        datas = tuple(t.data for t in entry.inputs)
        in_grads = _OPS[entry.kind].bwd(datas, entry.attrs, entry.ctx, entry.output.data, g)
        for t, ig in zip(entry.inputs, in_grads):
            if ig is None or not (t.requires_grad or id(t) in tape._produced):
                continue
            if id(t) in grads:
                grads[id(t)] = grads[id(t)] + ig
            else:
                grads[id(t)] = ig

    return {t: Tensor(grads.get(tid, np.zeros_like(t.data))) for tid, t in leaves.items()}


# === wrappers ===


def matmul(a, b, transpose_b: bool = False) -> Tensor:
    return forward_op("matmul", (a, b), {"transpose_b": transpose_b})


def add(a, b) -> Tensor:
    return forward_op("add", (a, b))


def mul(a, b) -> Tensor:
    return forward_op("mul", (a, b))


def add_bias(x, b) -> Tensor:
    return forward_op("add_bias", (x, b))


def relu(x) -> Tensor:
    return forward_op("relu", (x,))


def gelu(x) -> Tensor:
    return forward_op("gelu", (x,))


def absolute(x) -> Tensor:
    return forward_op("abs", (x,))


def max_reduce(x, axis=None) -> Tensor:
    return forward_op("max_reduce", (x,), {"axis": axis})


def sum_reduce(x, axis=None) -> Tensor:
    return forward_op("sum_reduce", (x,), {"axis": axis})


def square(x) -> Tensor:
    return forward_op("square", (x,))


def div(a, b) -> Tensor:
    return forward_op("div", (a, b))


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return forward_op("layernorm", (x, gamma, beta), {"eps": eps})


def softmax(x) -> Tensor:
    return forward_op("softmax", (x,))


def embedding_lookup(table, ids) -> Tensor:
    return forward_op("embedding_lookup", (table,), {"ids": np.asarray(ids, dtype=np.int64)})


def cross_entropy(logits, targets) -> Tensor:
    return forward_op("cross_entropy", (logits,), {"targets": np.asarray(targets)})


def mse(pred, target) -> Tensor:
    return forward_op("mse", (pred, target))


def l2_norm_rows(x) -> Tensor:
    return forward_op("l2_norm_rows", (x,))


# Raw-array activation kernels, shared by the tape ops above and the
# tape-free MoE runtime so both paths stay bitwise identical.
def relu_array(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, np.zeros((), dtype=x.dtype))


def gelu_array(x: np.ndarray) -> np.ndarray:
    return (x * ndtr(x)).astype(x.dtype, copy=False)


ACTIVATIONS = {"relu": relu_array, "gelu": gelu_array}
