"""Dense float64 tensors with reverse-mode gradients.

Only the operations the lane-attention model needs are provided. The graph is
rebuilt on every forward pass: each result tensor remembers its parents and a
closure mapping the output gradient to parent gradients. Tensors built only
from constants record nothing, so inference pays no bookkeeping cost.

Shapes must match exactly; there is no general broadcasting. The few places
that need a bias row or a batched dot product have dedicated ops.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, DomainError, UsageError

__all__ = [
    "Tensor",
    "constant",
    "parameter",
    "matmul",
    "affine",
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "clip",
    "softmax",
    "concat",
    "stack",
    "reshape",
    "getitem",
    "sum",
    "mean",
    "cumsum",
    "max_pool",
    "mean_pool",
    "bmv",
    "weighted_sum",
    "conv1d",
    "pointwise",
    "lstm_step",
    "LSTMWeights",
    "backward",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __getitem__(self, idx) -> Tensor:
        return getitem(self, idx)

    def __add__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other) -> Tensor:
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def grad_fn(g):
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), grad_fn)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row."""
    if b.ndim != 1 or w.ndim != 2 or b.shape[0] != w.shape[1]:
        raise DimensionError(f"affine: bias {b.shape} does not fit weight {w.shape}")
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: cannot multiply {x.shape} by {w.shape}")
    X, W = x.data, w.data

    def grad_fn(g):
        return g @ W.T, X.T @ g, g.sum(axis=0)

    return _result(X @ W + b.data, (x, w, b), grad_fn)


def bmv(mat: Tensor, vec: Tensor) -> Tensor:
    """Batched matrix-vector product: ``[B, L, d] x [B, d] -> [B, L]``."""
    if mat.ndim != 3 or vec.ndim != 2 or mat.shape[0] != vec.shape[0] or mat.shape[2] != vec.shape[1]:
        raise DimensionError(f"bmv: shapes {mat.shape} and {vec.shape} are incompatible")
    M, v = mat.data, vec.data

    def grad_fn(g):
        return g[:, :, None] * v[:, None, :], np.einsum("bl,bld->bd", g, M)

    return _result(np.einsum("bld,bd->bl", M, v), (mat, vec), grad_fn)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """``[B, L] x [B, L, d] -> [B, d]``: per-row convex (or any) combination."""
    if (weights.ndim != 2 or values.ndim != 3
            or weights.shape != values.shape[:2]):
        raise DimensionError(f"weighted_sum: shapes {weights.shape} and {values.shape} are incompatible")
    w, V = weights.data, values.data

    def grad_fn(g):
        return np.einsum("bd,bld->bl", g, V), w[:, :, None] * g[:, None, :]

    return _result(np.einsum("bl,bld->bd", w, V), (weights, values), grad_fn)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, unpadded cross-correlation.

    ``x`` is ``[c_in, L]`` or ``[N, c_in, L]``; ``kernels`` is ``[c_out, c_in, k]``.
    """
    if kernels.ndim != 3 or bias.shape != (kernels.shape[0],):
        raise DimensionError(f"conv1d: kernels {kernels.shape} / bias {bias.shape} mismatch")
    single = x.ndim == 2
    X = x.data[None] if single else x.data
    if X.ndim != 3 or X.shape[1] != kernels.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} does not match kernels {kernels.shape}")
    K = kernels.data
    k = K.shape[2]
    length = X.shape[2]
    if length < k:
        raise DimensionError(f"conv1d: input length {length} shorter than kernel size {k}")
    out_len = length - k + 1
    out = np.zeros((X.shape[0], K.shape[0], out_len))
    for j in range(k):
        out += np.matmul(K[:, :, j], X[:, :, j:j + out_len])
    out += bias.data[None, :, None]

    def grad_fn(g):
        g3 = g[None] if single else g
        gx = np.zeros_like(X)
        gk = np.zeros_like(K)
        for j in range(k):
            gx[:, :, j:j + out_len] += np.matmul(K[:, :, j].T, g3)
            gk[:, :, j] = np.einsum("nol,ncl->oc", g3, X[:, :, j:j + out_len])
        return (gx[0] if single else gx), gk, g3.sum(axis=(0, 2))

    return _result(out[0] if single else out, (x, kernels, bias), grad_fn)


# --------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return _result(x.data + c, (x,), lambda g: (g,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    X = x.data
    e = np.exp(-np.abs(X))
    y = np.where(X >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    X = x.data
    if np.any(X <= 0):
        raise DomainError("log: non-positive input")
    return _result(np.log(X), (x,), lambda g: (g / X,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    X = x.data
    inside = (X >= lo) & (X <= hi)
    return _result(np.clip(X, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    Entries where ``mask`` is False get probability exactly 0. A row with no
    valid entry comes out all zero; callers that forbid that check first.
    """
    X = x.data
    if X.size == 0 or X.shape[-1] == 0:
        raise DomainError("softmax: empty input")
    if mask is None:
        valid = np.ones(X.shape, dtype=bool)
    else:
        valid = np.asarray(mask, dtype=bool)
        if valid.shape != X.shape:
            raise DimensionError(f"softmax: mask {valid.shape} does not match logits {X.shape}")
    shifted = np.where(valid, X, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(valid, np.exp(np.where(valid, X, 0.0) - row_max), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, total, out=np.zeros_like(e), where=total > 0)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), grad_fn)


# --------------------------------------------------------------------------
# structural

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} are incompatible on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("stack: nothing to stack")
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    ax = axis % (tensors[0].ndim + 1)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=ax), tuple(tensors), grad_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {shape}") from exc
    return _result(y, (x,), lambda g: (g.reshape(src),))


def getitem(x: Tensor, idx) -> Tensor:
    """Numpy indexing (slices, integer arrays); gradients scatter-add back."""
    X = x.data
    y = X[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def grad_fn(g):
        out = np.zeros_like(X)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _result(np.array(y, dtype=np.float64), (x,), grad_fn)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    X = x.data

    def grad_fn(g):
        if axis is None:
            return (np.full_like(X, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), X.shape).copy(),)

    return _result(np.asarray(X.sum(axis=axis)), (x,), grad_fn)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def cumsum(x: Tensor, axis: int) -> Tensor:
    def grad_fn(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _result(np.cumsum(x.data, axis=axis), (x,), grad_fn)


def max_pool(x: Tensor, axis: int = -1) -> Tensor:
    """Max over ``axis``; the gradient goes to the first maximal element."""
    X = x.data
    if X.shape[axis] == 0:
        raise DimensionError("max_pool: empty axis")
    arg = np.argmax(X, axis=axis)  # first occurrence on ties
    arg_exp = np.expand_dims(arg, axis)
    y = np.take_along_axis(X, arg_exp, axis=axis).squeeze(axis)

    def grad_fn(g):
        out = np.zeros_like(X)
        np.put_along_axis(out, arg_exp, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _result(y, (x,), grad_fn)


def mean_pool(x: Tensor, axis: int = -1) -> Tensor:
    return mean(x, axis)


_POINTWISE = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "add": add,
    "mul": mul,
    "concat": lambda *ts: concat(ts, axis=-1),
    "max_pool": max_pool,
    "mean_pool": mean_pool,
}


def pointwise(op: str, *inputs: Tensor) -> Tensor:
    """Dispatch by name; handy for table-driven tests and configs."""
    try:
        fn = _POINTWISE[op]
    except KeyError:
        raise UsageError(f"unknown pointwise op {op!r}") from None
    return fn(*inputs)


# --------------------------------------------------------------------------
# recurrent cell

class LSTMWeights:
    """One LSTM block. Gate column order is input, forget, output, candidate."""

    __slots__ = ("w_x", "w_h", "b")

    def __init__(self, w_x: Tensor, w_h: Tensor, b: Tensor):
        hidden = w_h.shape[0]
        if w_h.shape != (hidden, 4 * hidden) or w_x.ndim != 2 or w_x.shape[1] != 4 * hidden \
                or b.shape != (4 * hidden,):
            raise DimensionError(
                f"LSTM block shapes inconsistent: w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape}")
        self.w_x, self.w_h, self.b = w_x, w_h, b

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]


def lstm_gates_step(gates_x: Tensor, hidden: Tensor, cell: Tensor, w_h: Tensor) -> tuple[Tensor, Tensor]:
    """Advance one step given the already-projected input ``x @ w_x + b``."""
    h = w_h.shape[0]
    gates = add(gates_x, matmul(hidden, w_h))
    sig = sigmoid(gates[:, : 3 * h])
    i, f, o = sig[:, :h], sig[:, h:2 * h], sig[:, 2 * h:]
    g = tanh(gates[:, 3 * h:])
    new_cell = add(mul(f, cell), mul(i, g))
    new_hidden = mul(o, tanh(new_cell))
    return new_hidden, new_cell


def lstm_step(inp: Tensor, hidden: Tensor, cell: Tensor, weights: LSTMWeights) -> tuple[Tensor, Tensor]:
    """Standard LSTM cell on a batch: ``inp [B, d_in]``, states ``[B, d_h]``.

    1-D inputs are treated as a batch of one and returned 1-D.
    """
    single = inp.ndim == 1
    if single:
        inp, hidden, cell = (reshape(t, (1, -1)) for t in (inp, hidden, cell))
    if inp.shape[1] != weights.input_dim:
        raise DimensionError(f"lstm_step: input {inp.shape} does not match w_x {weights.w_x.shape}")
    if hidden.shape != (inp.shape[0], weights.hidden) or cell.shape != hidden.shape:
        raise DimensionError(f"lstm_step: states {hidden.shape}/{cell.shape} do not match hidden size {weights.hidden}")
    new_h, new_c = lstm_gates_step(affine(inp, weights.w_x, weights.b), hidden, cell, weights.w_h)
    if single:
        new_h, new_c = reshape(new_h, (weights.hidden,)), reshape(new_c, (weights.hidden,))
    return new_h, new_c


# --------------------------------------------------------------------------
# reverse pass

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(output: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``output`` with respect to each named leaf.

    Leaves the output does not depend on get an exactly-zero gradient.
    """
    if output.data.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = np.ones_like(output.data)
        for node in reversed(_toposort(output)):
            if node._backward is None:
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    return {name: np.asarray(grads.get(id(t), np.zeros_like(t.data)), dtype=np.float64).reshape(t.shape)
            for name, t in params.items()}
