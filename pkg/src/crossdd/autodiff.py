"""Dense float64 tensors with a reverse-mode tape.

Every learnable computation in the package is composed from the primitives
below. A :class:`Tape` records primitive applications in execution order; a
tensor is tracked when it carries a ``node_id`` on some tape. Operations on
untracked tensors run eagerly without recording anything, which is what the
evaluation paths use.

Gradients are returned from :func:`backward` as a ``{node_id: ndarray}`` map,
so the same tape can be replayed any number of times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tape",
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scalar_mul",
    "matmul",
    "linear",
    "relu",
    "sigmoid",
    "gelu",
    "activation",
    "exp",
    "log",
    "clip",
    "layer_norm",
    "softmax_axis",
    "log_softmax_axis",
    "sum_axis",
    "sum_all",
    "mean_axis",
    "mean_all",
    "concat_axis",
    "transpose",
    "reshape",
    "grl",
    "backward",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass
class _Node:
    op: str
    inputs: tuple  # node ids (or None for untracked operands)
    vjp: Optional[Callable[[np.ndarray], tuple]]
    shape: tuple
    name: Optional[str] = None


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Node ids are positions in ``nodes``; a node's inputs always have smaller
    ids, so reverse iteration is a valid topological order.
    """

    nodes: list = field(default_factory=list)

    def watch(self, value, name: Optional[str] = None) -> "Tensor":
        """Register ``value`` as a gradient-tracked leaf."""
        data = _to_array(value)
        self.nodes.append(_Node("leaf", (), None, data.shape, name))
        return Tensor(data, self, len(self.nodes) - 1)

    def _record(self, op, inputs, data, vjp) -> "Tensor":
        ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        self.nodes.append(_Node(op, ids, vjp, data.shape))
        return Tensor(data, self, len(self.nodes) - 1)

    def leaves(self) -> list:
        return [i for i, n in enumerate(self.nodes) if n.op == "leaf"]

    def __len__(self) -> int:
        return len(self.nodes)


def _to_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True, order="C")
    return arr


class Tensor:
    """A float64 array, optionally attached to a tape."""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100

    def __init__(self, data, tape: Optional[Tape] = None, node_id: Optional[int] = None):
        if isinstance(data, np.ndarray) and data.dtype == np.float64 and data.flags.c_contiguous:
            self.data = data
        else:
            # np.ascontiguousarray would promote 0-d values to shape (1,)
            self.data = np.array(data, dtype=np.float64, order="C")
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tape_of(*tensors) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = t.tape
    return tape


def _apply(op: str, inputs: Sequence[Tensor], data: np.ndarray, vjp) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape._record(op, inputs, data, vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a} and {b} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _apply("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _apply("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.data, b.data
    need_a, need_b = a.tracked, b.tracked

    def vjp(g):
        return (_unbroadcast(g * bv, av.shape) if need_a else None,
                _unbroadcast(g * av, bv.shape) if need_b else None)

    return _apply("mul", (a, b), av * bv, vjp)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _apply("neg", (x,), -x.data, lambda g: (-g,))


def scalar_mul(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _apply("scalar_mul", (x,), x.data * c, lambda g: (g * c,))


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy semantics, ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands need ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions differ (axis -1 of {a.shape} is {a.shape[-1]}, "
            f"axis -2 of {b.shape} is {b.shape[-2]})"
        )
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    av, bv = a.data, b.data
    need_a, need_b = a.tracked, b.tracked

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if need_b else None
        return ga, gb

    return _apply("matmul", (a, b), av @ bv, vjp)


def linear(x, W, b=None) -> Tensor:
    """Affine map on the last axis: ``x @ W + b`` with ``W`` of shape [I, O]."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2:
        raise DimensionError(f"linear: weight must be 2-D, got shape {W.shape}")
    if x.ndim < 1 or x.shape[-1] != W.shape[0]:
        raise DimensionError(
            f"linear: input axis -1 has size {x.shape[-1] if x.ndim else None} "
            f"but weight axis 0 has size {W.shape[0]}"
        )
    xv, Wv = x.data, W.data
    out = xv @ Wv
    inputs = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(
                f"linear: bias shape {b.shape} does not match weight axis 1 ({W.shape[1]})"
            )
        out = out + b.data
        inputs.append(b)
    has_bias = b is not None
    need_x, need_W = x.tracked, W.tracked

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wv.T if need_x else None
        gW = xv.reshape(-1, xv.shape[-1]).T @ g2 if need_W else None
        if has_bias:
            return gx, gW, g2.sum(axis=0)
        return gx, gW

    return _apply("linear", inputs, out, vjp)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _apply("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    # two-branch form avoids overflow in exp for large |v|
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _apply("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * (v + 0.044715 * v2 * v))
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * dinner),)

    return _apply("gelu", (x,), out, vjp)


def activation(x, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}; expected 'gelu' or 'relu'")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _apply("exp", (x,), out, lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    return _apply("log", (x,), np.log(v), lambda g: (g / v,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    x = as_tensor(x)
    v = x.data
    inside = (v >= lo) & (v <= hi)
    return _apply("clip", (x,), np.clip(v, lo, hi), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise last-axis slices to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("layer_norm: normalised axis is empty")
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must both be ({D},)"
        )
    v = x.data
    xhat = v - v.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xhat * xhat).mean(axis=-1, keepdims=True) + eps)
    xhat *= inv
    gv = gamma.data
    out = xhat * gv
    out += beta.data

    def vjp(g):
        gxhat = g * gv
        gx = gxhat - gxhat.mean(axis=-1, keepdims=True)
        gx -= xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx *= inv
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _apply("layer_norm", (x, gamma, beta), out, vjp)


def _check_axis(op: str, x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax_axis(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis("softmax_axis", x, axis)
    s = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=axis, keepdims=True)

    def vjp(g):
        gs = g * s
        gs -= s * gs.sum(axis=axis, keepdims=True)
        return (gs,)

    return _apply("softmax", (x,), s, vjp)


def log_softmax_axis(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis("log_softmax_axis", x, axis)
    v = x.data
    shifted = v - v.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _apply("log_softmax", (x,), out,
                  lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def sum_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis("sum_axis", x, axis)
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _apply("sum_axis", (x,), x.data.sum(axis=axis, keepdims=keepdims), vjp)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _apply("sum_all", (x,), np.asarray(x.data.sum()),
                  lambda g: (np.full(shape, float(g)),))


def mean_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis("mean_axis", x, axis)
    n = x.shape[axis]
    if n == 0:
        raise DimensionError(f"mean_axis: axis {axis} of {x.shape} is empty")
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _apply("mean_axis", (x,), x.data.mean(axis=axis, keepdims=keepdims), vjp)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return _apply("mean_all", (x,), np.asarray(x.data.mean()),
                  lambda g: (np.full(shape, float(g) / n),))


def concat_axis(xs: Sequence, axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat_axis: nothing to concatenate")
    axis = _check_axis("concat_axis", xs[0], axis)
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
            x.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise DimensionError(
                f"concat_axis: shape {x.shape} incompatible with {ref} off axis {axis}"
            )
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in xs], axis=axis)
    return _apply("concat", xs, out,
                  lambda g: tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis)))


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _apply("transpose", (x,), out,
                  lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    old = x.shape
    return _apply("reshape", (x,), out, lambda g: (g.reshape(old),))


def grl(x, c: float) -> Tensor:
    """Gradient reversal: identity forward, ``-c * g`` backward."""
    x = as_tensor(x)
    c = float(c)
    if c < 0:
        raise ValueError(f"grl constant must be nonnegative, got {c}")
    return _apply("grl", (x,), x.data.copy(), lambda g: (-c * g,))


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def backward(tape: Tape, output: Tensor) -> dict:
    """Gradients of a scalar ``output`` for every leaf on ``tape``.

    Leaves the output does not depend on receive zero arrays.
    """
    if output.tape is not tape or output.node_id is None:
        raise ValueError("backward: output is not recorded on this tape")
    if output.data.size != 1:
        raise DimensionError(f"backward: output must be scalar, got shape {output.shape}")

    nodes = tape.nodes
    grads: dict = {output.node_id: np.ones(nodes[output.node_id].shape)}
    for nid in range(output.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = nodes[nid]
        if node.vjp is None:
            continue
        # interior gradients are no longer needed once propagated
        del grads[nid]
        for src, gin in zip(node.inputs, node.vjp(g)):
            if src is None or gin is None:
                continue
            if src in grads:
                grads[src] = grads[src] + gin
            else:
                grads[src] = gin
    return {
        nid: grads.get(nid, np.zeros(nodes[nid].shape))
        for nid in tape.leaves()
    }
