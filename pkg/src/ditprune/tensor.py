"""Dense float64 tensors with reverse-mode autodiff on a define-by-run tape.

The graph is rebuilt on every forward pass: opening a ComputationTape makes
it the active tape, ops append backward closures to it, and
``tape.backward(loss)`` replays them in reverse execution order (which is a
reverse topological order by construction). With no tape open, ops compute
values only, which doubles as inference mode.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, ShapeError, TapeError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_active_tape: "ComputationTape | None" = None


class Tensor:
    """N-d float array plus an optional gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        # np.ascontiguousarray would promote 0-d inputs to shape (1,);
        # scalars must stay 0-d, so only copy when layout demands it.
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate_grad(self, g: np.ndarray, own: bool = False) -> None:
        # `own=True` donates the array: callers pass it only for arrays they
        # allocated (or for a dead upstream grad that no other input shares),
        # so in-place accumulation stays safe.
        if self.grad is None:
            self.grad = g if own else g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class ComputationTape:
    """Ordered record of executed ops; replayed once, in reverse, by backward."""

    __slots__ = ("nodes", "_used")

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._used = False

    def __enter__(self) -> "ComputationTape":
        global _active_tape
        if _active_tape is not None:
            raise TapeError("a computation tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = None

    def backward(self, root: Tensor) -> None:
        """Accumulate gradients of the scalar `root` into every requires_grad leaf."""
        if self._used:
            raise TapeError("backward already ran on this tape; re-run the forward pass")
        if root.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        self._used = True
        root.grad = np.ones_like(root.data)
        for out, backward_fn in reversed(self.nodes):
            if out.grad is not None:
                backward_fn(out.grad)
        self.nodes.clear()


def active_tape() -> ComputationTape | None:
    return _active_tape


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if _active_tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_tape.nodes.append((out, backward_fn))
    return out


def _broadcast_check(a: np.ndarray, b: np.ndarray) -> None:
    # Broadcasting is restricted to scalars and trailing-dimension expansion,
    # e.g. (B, T, d) op (d,); no size-1 stretching inside matching ranks.
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    small, big = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim < big.ndim and big.shape[big.ndim - small.ndim:] == small.shape:
        return
    raise ShapeError(f"shapes {a.shape} and {b.shape} are not trailing-broadcast compatible")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return g.sum().reshape(())
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data)
    out = Tensor(a.data + b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape), own=True)
        if b.requires_grad:
            gb = _reduce_to(g, b.shape)
            b.accumulate_grad(gb, own=gb is not g)

    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data)
    out = Tensor(a.data - b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape), own=True)
        if b.requires_grad:
            b.accumulate_grad(-_reduce_to(g, b.shape), own=True)

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data)
    out = Tensor(a.data * b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g * b.data, a.shape), own=True)
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g * a.data, b.shape), own=True)

    return _record(out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * c)

    def backward(g):
        a.accumulate_grad(g * c, own=True)

    return _record(out, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; 2-D x 2-D, or stacked with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {a.shape} vs {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.swapaxes(-1, -2), own=True)
        if b.requires_grad:
            b.accumulate_grad(a.data.swapaxes(-1, -2) @ g, own=True)

    return _record(out, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    out = Tensor(out_data)

    def backward(g):
        a.accumulate_grad(g * out_data, own=True)

    return _record(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive input")
    out = Tensor(np.log(a.data))

    def backward(g):
        a.accumulate_grad(g / a.data, own=True)

    return _record(out, (a,), backward)


def gelu(a) -> Tensor:
    """GELU via the tanh approximation, 0.5x(1 + tanh(c(x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data
    t = x * x
    t *= x
    t *= _GELU_A
    t += x
    t *= _GELU_C
    np.tanh(t, out=t)
    out_data = 1.0 + t
    out_data *= x
    out_data *= 0.5
    out = Tensor(out_data)

    def backward(g):
        d_inner = x * x
        d_inner *= 3.0 * _GELU_A
        d_inner += 1.0
        d_inner *= _GELU_C
        acc = 1.0 - t * t
        acc *= x
        acc *= d_inner
        acc += 1.0 + t
        acc *= 0.5
        acc *= g
        a.accumulate_grad(acc, own=True)

    return _record(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(out_data)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a.accumulate_grad(out_data * (g - inner), own=True)

    return _record(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    out = Tensor(out_data)

    def backward(g):
        soft = np.exp(out_data)
        a.accumulate_grad(g - soft * g.sum(axis=axis, keepdims=True), own=True)

    return _record(out, (a,), backward)


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean/unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0.0:
        raise DomainError("layernorm eps must be positive")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layernorm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0), own=True)
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, x.shape[-1]).sum(axis=0), own=True)
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad((gx - m1 - xhat * m2) * inv_std, own=True)

    return _record(out, (x, gain, bias), backward)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=False))

    def backward(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),
                              own=True)
        else:
            a.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),
                              own=True)

    return _record(out, (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        a.accumulate_grad(g.reshape(a.shape), own=True)

    return _record(out, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate_grad(g.transpose(inverse), own=True)

    return _record(out, (a,), backward)


def take_rows(table, indices) -> Tensor:
    """Gather rows of a 2-D table; backward scatter-adds (repeats accumulate)."""
    table = as_tensor(table)
    if table.data.ndim != 2:
        raise ShapeError("take_rows expects a 2-D table")
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(table.data[idx])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        table.accumulate_grad(gt, own=True)

    return _record(out, (table,), backward)


def element(a, index: int) -> Tensor:
    """Extract one element of a 1-D tensor as a scalar tensor."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError("element expects a 1-D tensor")
    out = Tensor(a.data[index])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        a.accumulate_grad(ga, own=True)

    return _record(out, (a,), backward)


def stop_grad(a) -> Tensor:
    return as_tensor(a).detach()


def linear(x, w, b, res=None) -> Tensor:
    """Fused x @ w + b (+ res). One tape node instead of two or three."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear shapes {x.shape} @ {w.shape} invalid")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} != ({w.shape[1]},)")
    out_data = x.data @ w.data
    out_data += b.data
    if res is not None:
        res = as_tensor(res)
        if res.shape != out_data.shape:
            raise ShapeError(f"residual shape {res.shape} != {out_data.shape}")
        out_data += res.data
    out = Tensor(out_data)
    inputs = (x, w, b) if res is None else (x, w, b, res)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ w.data.T, own=True)
        if w.requires_grad:
            w.accumulate_grad(x.data.T @ g, own=True)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0), own=True)
        if res is not None and res.requires_grad:
            res.accumulate_grad(g, own=True)

    return _record(out, inputs, backward)


def scaled_softmax(a, c: float, axis: int = -1) -> Tensor:
    """softmax(c * a) in one node."""
    a = as_tensor(a)
    z = a.data * c
    z -= z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(out_data)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a.accumulate_grad(out_data * (g - inner) * c, own=True)

    return _record(out, (a,), backward)


def attention(q, k, v, heads: int, seq_len: int) -> Tensor:
    """Multi-head self-attention over (B*T, d) projections as a single node.

    Scores are scaled by 1/sqrt(head_dim) and softmaxed over keys; returns
    the merged (B*T, d) context, before the output projection.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape != k.shape or q.shape != v.shape or q.data.ndim != 2:
        raise ShapeError("attention expects three equal (rows, d) operands")
    rows, d = q.shape
    if rows % seq_len or d % heads:
        raise ShapeError("rows must be a multiple of seq_len and d of heads")
    batch = rows // seq_len
    hd = d // heads
    c = 1.0 / math.sqrt(hd)

    def split(arr):
        return arr.reshape(batch, seq_len, heads, hd).transpose(0, 2, 1, 3)

    def merge(arr4):
        return arr4.transpose(0, 2, 1, 3).reshape(rows, d)

    q4, k4, v4 = split(q.data), split(k.data), split(v.data)
    scores = q4 @ k4.swapaxes(-1, -2)
    scores *= c
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    att = scores
    out = Tensor(merge(att @ v4))

    def backward(g):
        g4 = split(g)
        if v.requires_grad:
            v.accumulate_grad(merge(att.swapaxes(-1, -2) @ g4), own=True)
        datt = g4 @ v4.swapaxes(-1, -2)
        inner = (datt * att).sum(axis=-1, keepdims=True)
        datt -= inner
        datt *= att
        datt *= c
        if q.requires_grad:
            q.accumulate_grad(merge(datt @ k4), own=True)
        if k.requires_grad:
            k.accumulate_grad(merge(datt.swapaxes(-1, -2) @ q4), own=True)

    return _record(out, (q, k, v), backward)


def gate_lerp(h, layer_out, gate) -> Tensor:
    """Gated residual pass-through: h + m * (layer_out - h) in one node.

    `gate` may be a scalar Tensor (gradients flow into it) or a float.
    """
    h, layer_out = as_tensor(h), as_tensor(layer_out)
    if h.shape != layer_out.shape:
        raise ShapeError(f"gate_lerp shapes differ: {h.shape} vs {layer_out.shape}")
    gate_t = gate if isinstance(gate, Tensor) else None
    m = float(gate_t.data) if gate_t is not None else float(gate)
    out = Tensor(h.data + m * (layer_out.data - h.data))
    inputs = (h, layer_out) if gate_t is None else (h, layer_out, gate_t)

    def backward(g):
        if gate_t is not None and gate_t.requires_grad:
            gate_t.accumulate_grad(
                np.asarray((g * (layer_out.data - h.data)).sum()), own=True)
        if layer_out.requires_grad:
            layer_out.accumulate_grad(g * m, own=True)
        if h.requires_grad:
            h.accumulate_grad(g * (1.0 - m), own=True)

    return _record(out, inputs, backward)


def mse(a, b) -> Tensor:
    """Mean squared error; fused single node when `b` carries no gradient."""
    a, b = as_tensor(a), as_tensor(b)
    if b.requires_grad:
        d = sub(a, b)
        return mean(mul(d, d))
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = Tensor(np.asarray((diff * diff).mean()))

    def backward(g):
        a.accumulate_grad(diff * (2.0 * float(g) / diff.size), own=True)

    return _record(out, (a,), backward)


def masked_sq_mean(a, b, keep: np.ndarray) -> Tensor:
    """Mean of (a - b)^2 over positions where `keep` is true; 0 if none kept.

    `b` is treated as a constant and `keep` is a boolean array shaped like
    both operands.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or keep.shape != a.shape:
        raise ShapeError("masked_sq_mean operands must share one shape")
    count = int(keep.sum())
    if count == 0:
        return scale(tsum(a), 0.0) if a.requires_grad else Tensor(0.0)
    w = keep.astype(a.data.dtype)
    diff = (a.data - b.data) * w
    out = Tensor(np.asarray((diff * diff).sum() / count))

    def backward(g):
        a.accumulate_grad(diff * (2.0 * float(g) / count), own=True)

    return _record(out, (a,), backward)


def grad_check(f, point: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor. Error per coordinate is
    |analytic - fd| / max(1, |analytic|); non-finite values at perturbed
    points yield inf so callers see the failure.
    """
    point = np.asarray(point, dtype=np.float64)
    t = Tensor(point.copy(), requires_grad=True)
    with ComputationTape() as tape:
        out = f(t)
    tape.backward(out)
    analytic = t.grad.reshape(-1).copy()

    def probe(arr) -> float:
        try:
            return f(Tensor(arr)).item()
        except DomainError:
            return math.nan

    flat = point.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        hi = probe(bumped.reshape(point.shape))
        bumped[i] = flat[i] - h
        lo = probe(bumped.reshape(point.shape))
        if not (math.isfinite(hi) and math.isfinite(lo)):
            return math.inf
        fd = (hi - lo) / (2.0 * h)
        err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
