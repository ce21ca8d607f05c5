"""Reverse-mode automatic differentiation over dense numpy tensors.

Ops build a tape of Value nodes eagerly (define-by-run). Evaluation order is
the recorded op order, so identical inputs give bitwise identical forward and
backward results. Arrays are float32 or float64; gradient checking requires
float64.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

LN_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class NumericError(ArithmeticError):
    """An op produced non-finite values or hit an invalid domain."""


# Module-level switches. Both are cheap flags checked per op; the gradient
# checker's inner loop turns them off to keep re-evaluation overhead low.
_GRAD_ENABLED = True
_FINITE_CHECKS = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def finite_checks(enabled: bool):
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: produced non-finite values")


class Value:
    """One node of the computation tape: an ndarray plus backward plumbing."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self.name = name
        self._parents: tuple[Value, ...] = ()
        self._bwd = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = self.name or "value"
        return f"Value({tag}, shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; python scalars are wrapped as constants
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other, self))

    def backward(self) -> None:
        """Seed d(self)/d(self)=1 and accumulate grads into the tape.

        Grads of every node reachable from this output are reset first, so
        several backward passes over one shared tape stay independent.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward: output must be scalar, got shape {self.data.shape}"
            )
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bwd is not None:
                node._bwd()


def _toposort(root: Value) -> list[Value]:
    # iterative DFS; child visit order is the recorded op order, which keeps
    # gradient accumulation order deterministic
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, int]] = [(root, 0)]
    seen.add(id(root))
    while stack:
        node, i = stack.pop()
        parents = node._parents
        if i < len(parents):
            stack.append((node, i + 1))
            p = parents[i]
            if id(p) not in seen and p.requires_grad:
                seen.add(id(p))
                stack.append((p, 0))
        else:
            order.append(node)
    return order


def _coerce(x, like: Value) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=like.data.dtype))


def const(data, dtype=None) -> Value:
    arr = np.asarray(data, dtype=dtype)
    return Value(arr)


def parameter(data, name: str) -> Value:
    return Value(np.asarray(data), requires_grad=True, name=name)


def _acc(v: Value, g: np.ndarray) -> None:
    if not v.requires_grad:
        return
    if v.grad is None:
        # own the buffer: g may be a view into another node's grad
        v.grad = np.array(g, dtype=v.data.dtype)
    else:
        v.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple[Value, ...], bwd, op: str) -> Value:
    _check_finite(data, op)
    out = Value(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd(out)
    return out


# ---------------------------------------------------------------------------
# primitives

def add(a: Value, b: Value) -> Value:
    data = a.data + b.data

    def bwd(out):
        def run():
            _acc(a, _unbroadcast(out.grad, a.data.shape))
            _acc(b, _unbroadcast(out.grad, b.data.shape))
        return run

    return _make(data, (a, b), bwd, "add")


def sub(a: Value, b: Value) -> Value:
    data = a.data - b.data

    def bwd(out):
        def run():
            _acc(a, _unbroadcast(out.grad, a.data.shape))
            _acc(b, _unbroadcast(-out.grad, b.data.shape))
        return run

    return _make(data, (a, b), bwd, "sub")


def mul(a: Value, b: Value) -> Value:
    data = a.data * b.data

    def bwd(out):
        def run():
            _acc(a, _unbroadcast(out.grad * b.data, a.data.shape))
            _acc(b, _unbroadcast(out.grad * a.data, b.data.shape))
        return run

    return _make(data, (a, b), bwd, "mul")


def div(a: Value, b: Value) -> Value:
    if _FINITE_CHECKS and np.any(b.data == 0):
        raise NumericError("div: zero divisor")
    data = a.data / b.data

    def bwd(out):
        def run():
            _acc(a, _unbroadcast(out.grad / b.data, a.data.shape))
            _acc(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))
        return run

    return _make(data, (a, b), bwd, "div")


def neg(a: Value) -> Value:
    def bwd(out):
        def run():
            _acc(a, -out.grad)
        return run

    return _make(-a.data, (a,), bwd, "neg")


def matmul(a: Value, b: Value) -> Value:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul: operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}"
        )
    if b.data.ndim == 2 and a.data.ndim > 2:
        # flatten to one GEMM; numpy would loop tiny per-slice GEMMs
        shape = a.data.shape
        a2 = a.data.reshape(-1, shape[-1])
        data = (a2 @ b.data).reshape(shape[:-1] + (b.data.shape[1],))

        def bwd(out):
            def run():
                g2 = out.grad.reshape(-1, b.data.shape[1])
                _acc(a, (g2 @ b.data.T).reshape(shape))
                _acc(b, a2.T @ g2)
            return run

        return _make(data, (a, b), bwd, "matmul")

    data = a.data @ b.data

    def bwd(out):
        def run():
            g = out.grad
            _acc(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
            _acc(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))
        return run

    return _make(data, (a, b), bwd, "matmul")


def linear(x: Value, w: Value, b: Value) -> Value:
    """Fused x @ w + b with a 2-D weight; leading dims of x are flattened
    into one GEMM instead of numpy's per-slice batched loop."""
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"linear: incompatible shapes, {x.data.shape} @ {w.data.shape}"
        )
    shape = x.data.shape
    x2 = x.data.reshape(-1, shape[-1])
    data = (x2 @ w.data + b.data).reshape(shape[:-1] + (w.data.shape[1],))

    def bwd(out):
        def run():
            g2 = out.grad.reshape(-1, w.data.shape[1])
            _acc(x, (g2 @ w.data.T).reshape(shape))
            _acc(w, x2.T @ g2)
            _acc(b, g2.sum(axis=0))
        return run

    return _make(data, (x, w, b), bwd, "linear")


def concat(values: list[Value], axis: int = -1) -> Value:
    data = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.data.shape[axis] for v in values]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(out):
        def run():
            pieces = np.split(out.grad, offsets, axis=axis)
            for v, g in zip(values, pieces):
                _acc(v, g)
        return run

    return _make(data, tuple(values), bwd, "concat")


def reshape(a: Value, shape: tuple[int, ...]) -> Value:
    data = a.data.reshape(shape)

    def bwd(out):
        def run():
            _acc(a, out.grad.reshape(a.data.shape))
        return run

    return _make(data, (a,), bwd, "reshape")


def transpose(a: Value, axes: tuple[int, ...]) -> Value:
    data = np.transpose(a.data, axes)
    inverse = [0] * len(axes)
    for i, ax in enumerate(axes):
        inverse[ax] = i

    def bwd(out):
        def run():
            _acc(a, np.transpose(out.grad, inverse))
        return run

    return _make(data, (a,), bwd, "transpose")


def swap_last2(a: Value) -> Value:
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def vsum(a: Value, axis=None, keepdims: bool = False) -> Value:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(out):
        def run():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(g, a.data.shape))
        return run

    return _make(data, (a,), bwd, "sum")


def vmean(a: Value, axis=None, keepdims: bool = False) -> Value:
    n = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(out):
        def run():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(g, a.data.shape) / n)
        return run

    return _make(data, (a,), bwd, "mean")


def exp(a: Value) -> Value:
    data = np.exp(a.data)

    def bwd(out):
        def run():
            _acc(a, out.grad * out.data)
        return run

    return _make(data, (a,), bwd, "exp")


def log(a: Value) -> Value:
    if _FINITE_CHECKS and np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    data = np.log(a.data)

    def bwd(out):
        def run():
            _acc(a, out.grad / a.data)
        return run

    return _make(data, (a,), bwd, "log")


def sqrt(a: Value) -> Value:
    data = np.sqrt(a.data)

    def bwd(out):
        def run():
            _acc(a, out.grad * 0.5 / out.data)
        return run

    return _make(data, (a,), bwd, "sqrt")


def square(a: Value) -> Value:
    data = a.data * a.data

    def bwd(out):
        def run():
            _acc(a, out.grad * 2.0 * a.data)
        return run

    return _make(data, (a,), bwd, "square")


def relu(a: Value) -> Value:
    data = np.maximum(a.data, 0)

    def bwd(out):
        def run():
            _acc(a, out.grad * (a.data > 0))
        return run

    return _make(data, (a,), bwd, "relu")


def sigmoid(a: Value) -> Value:
    x = a.data
    # two-branch form avoids exp overflow on large |x|
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(out):
        def run():
            _acc(a, out.grad * out.data * (1.0 - out.data))
        return run

    return _make(data, (a,), bwd, "sigmoid")


def tanh(a: Value) -> Value:
    data = np.tanh(a.data)

    def bwd(out):
        def run():
            _acc(a, out.grad * (1.0 - out.data * out.data))
        return run

    return _make(data, (a,), bwd, "tanh")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Value) -> Value:
    """Tanh-approximation GELU (smooth, finite-difference friendly)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    data = 0.5 * x * (1.0 + t)

    def bwd(out):
        # local derivative computed once here; several backward passes may
        # reuse the same tape
        local = (0.5 * (1.0 + t)
                 + 0.5 * x * (1.0 - t * t) * (_GELU_C * (1.0 + 0.134145 * x2)))

        def run():
            _acc(a, out.grad * local)
        return run

    return _make(data, (a,), bwd, "gelu")


def softmax(a: Value, axis: int = -1) -> Value:
    """Stable softmax along `axis` (max-subtraction)."""
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(out):
        def run():
            w, g = out.data, out.grad
            _acc(a, w * (g - (g * w).sum(axis=axis, keepdims=True)))
        return run

    return _make(data, (a,), bwd, "softmax")


def masked_softmax(scores: Value, key_mask: np.ndarray) -> Value:
    """Softmax over the last axis restricted to `key_mask` (bool, broadcastable).

    Rows with no valid key produce all-zero weights (a defined zero context
    downstream) rather than a 0/0.
    """
    if key_mask.all():
        return softmax(scores, axis=-1)
    mask = np.broadcast_to(key_mask, scores.data.shape)
    any_valid = mask.any(axis=-1, keepdims=True)
    masked = np.where(mask, scores.data, -np.inf)
    m = np.where(any_valid, masked.max(axis=-1, keepdims=True), 0.0)
    shifted = np.where(mask, scores.data - m, 0.0)
    e = np.exp(shifted) * mask
    z = e.sum(axis=-1, keepdims=True)
    data = np.where(any_valid, e / np.where(z == 0, 1.0, z), 0.0)
    data = data.astype(scores.data.dtype, copy=False)

    def bwd(out):
        def run():
            w, g = out.data, out.grad
            _acc(scores, w * (g - (g * w).sum(axis=-1, keepdims=True)))
        return run

    return _make(data, (scores,), bwd, "masked_softmax")


def layer_norm(a: Value, gain: Value, bias: Value, eps: float = LN_EPS) -> Value:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bwd(out):
        def run():
            g = out.grad
            lead = tuple(range(g.ndim - 1))
            _acc(bias, g.sum(axis=lead))
            _acc(gain, (g * xhat).sum(axis=lead))
            gx = g * gain.data
            _acc(a, inv * (gx - gx.mean(axis=-1, keepdims=True)
                           - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
        return run

    return _make(data, (a, gain, bias), bwd, "layer_norm")


def masked_mean_pool(a: Value, mask: np.ndarray) -> Value:
    """Mean over the token axis (-2) restricted to valid tokens.

    A fully masked row pools to an exact zero vector; this is what makes an
    absent modality contribute nothing downstream, bit for bit.
    """
    if mask.shape != a.data.shape[:-1]:
        raise ShapeError(
            f"masked_mean_pool: mask {mask.shape} vs tokens {a.data.shape}"
        )
    m = mask.astype(a.data.dtype)
    cnt = m.sum(axis=-1, keepdims=True)
    denom = np.where(cnt > 0, cnt, 1.0)
    s = (a.data * m[..., None]).sum(axis=-2)
    data = np.where(cnt > 0, s / denom, 0.0).astype(a.data.dtype, copy=False)

    def bwd(out):
        def run():
            g = out.grad / denom
            _acc(a, g[..., None, :] * m[..., None])
        return run

    return _make(data, (a,), bwd, "masked_mean_pool")


def l2_normalize(a: Value, axis: int = -1) -> Value:
    """Scale to unit L2 norm along `axis`; a zero vector is an error."""
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(n == 0):
        raise NumericError("l2_normalize: zero vector")
    data = a.data / n

    def bwd(out):
        def run():
            y, g = out.data, out.grad
            _acc(a, (g - y * (g * y).sum(axis=axis, keepdims=True)) / n)
        return run

    return _make(data, (a,), bwd, "l2_normalize")


def logsumexp(a: Value, axis: int = -1) -> Value:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = np.squeeze(m + np.log(s), axis=axis)
    w = e / s

    def bwd(out):
        def run():
            _acc(a, w * np.expand_dims(out.grad, axis))
        return run

    return _make(data, (a,), bwd, "logsumexp")


def take_rows(a: Value, idx: np.ndarray) -> Value:
    data = a.data[idx]

    def bwd(out):
        def run():
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            _acc(a, g)
        return run

    return _make(data, (a,), bwd, "take_rows")


def take_pairs(a: Value, rows: np.ndarray, cols: np.ndarray) -> Value:
    """Gather a[rows[k], cols[k]] for each k; backward scatter-adds."""
    data = a.data[rows, cols]

    def bwd(out):
        def run():
            g = np.zeros_like(a.data)
            np.add.at(g, (rows, cols), out.grad)
            _acc(a, g)
        return run

    return _make(data, (a,), bwd, "take_pairs")
