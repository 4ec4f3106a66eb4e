"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed engine providing exactly the differentiable primitives
the segmentation network needs: matrix products, per-point (kernel-size-1)
convolutions, elementwise arithmetic with single-axis broadcasting, axis
reductions, concatenation, row gather/scatter, grouped max pooling, weighted
neighbor interpolation, and a fused softmax cross-entropy.

Tensors are immutable after construction except for their ``grad`` buffers.
Operations executed while recording is enabled (the default) build a dynamic
graph; ``backward`` on a scalar loss accumulates d(loss)/d(leaf) into the
``grad`` buffer of every reachable leaf with ``requires_grad``.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """A graph-level contract was violated (e.g. backward on a non-scalar)."""


_RECORDING = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block. Forward values are unchanged."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


def is_recording() -> bool:
    return _RECORDING


class Tensor:
    """A dense float array plus an optional position in the operation graph.

    Leaves are created directly from data; interior nodes are created by the
    operation functions below and remember how to push gradients to their
    parents. ``grad`` stays ``None`` until a backward pass reaches the tensor,
    and accumulates across backward passes until ``zero_grad``.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backprop")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backprop = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        """A leaf view of the same values that receives no gradient."""
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; all graph building happens in the module functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(values, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, dtype=dtype)


def _make(values: np.ndarray, parents: tuple[Tensor, ...], backprop) -> Tensor:
    """Wrap an op result, recording parents only when gradients can flow."""
    track = _RECORDING and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=track)
    if track:
        out._parents = parents
        out._backprop = backprop
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below ``root`` (parents before children)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def graph_nodes(root: Tensor) -> list[Tensor]:
    """The recorded computation below ``root`` in topological order."""
    return _topo_order(root)


def backward(loss: Tensor) -> None:
    """Reverse accumulation of d(loss)/d(leaf) into leaf ``grad`` buffers.

    ``loss`` must be a scalar. Repeated calls without ``zero_grad`` keep
    accumulating, so the gradient of a sum of losses equals the sum of the
    separate gradients.
    """
    if loss.values.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}

    def accum(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backprop is not None:
            node._backprop(g, accum)
        elif node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.values)
            node.grad += g


# ---------------------------------------------------------------------------
# broadcasting helpers (single-axis only)

def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    if sa == sb:
        return
    if len(sa) == len(sb):
        diff = [i for i in range(len(sa)) if sa[i] != sb[i]]
        if len(diff) == 1 and (sa[diff[0]] == 1 or sb[diff[0]] == 1):
            return
    raise DimensionError(f"shapes {sa} and {sb} are not equal or single-axis broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    for axis in range(len(shape)):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = a.values + b.values

    def backprop(g, accum):
        accum(a, _unbroadcast(g, a.shape))
        accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), backprop)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = a.values - b.values

    def backprop(g, accum):
        accum(a, _unbroadcast(g, a.shape))
        accum(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), backprop)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = a.values * b.values
    av, bv = a.values, b.values

    def backprop(g, accum):
        if a.requires_grad:
            accum(a, _unbroadcast(g * bv, a.shape))
        if b.requires_grad:
            accum(b, _unbroadcast(g * av, b.shape))

    return _make(out, (a, b), backprop)


def neg(x: Tensor) -> Tensor:
    def backprop(g, accum):
        accum(x, -g)

    return _make(-x.values, (x,), backprop)


def add_scalar(x: Tensor, c: float) -> Tensor:
    def backprop(g, accum):
        accum(x, g)

    return _make(x.values + c, (x,), backprop)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backprop(g, accum):
        accum(x, g * c)

    return _make(x.values * c, (x,), backprop)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0  # subgradient 0 at the kink

    def backprop(g, accum):
        accum(x, g * mask)

    return _make(np.where(mask, x.values, 0), (x,), backprop)


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def backprop(g, accum):
        accum(x, g * out * (1.0 - out))

    return _make(out, (x,), backprop)


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.values)

    def backprop(g, accum):
        accum(x, g * sign)

    return _make(np.abs(x.values), (x,), backprop)


# ---------------------------------------------------------------------------
# linear algebra and structure ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out = a.values @ b.values
    av, bv = a.values, b.values

    def backprop(g, accum):
        if a.requires_grad:
            accum(a, g @ bv.T)
        if b.requires_grad:
            accum(b, av.T @ g)

    return _make(out, (a, b), backprop)


def reduce_mean(x: Tensor, axis: int) -> Tensor:
    if not 0 <= axis < x.values.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    n = x.shape[axis]
    out = x.values.mean(axis=axis, keepdims=True)
    shape = x.shape

    def backprop(g, accum):
        accum(x, np.broadcast_to(g / n, shape))

    return _make(out, (x,), backprop)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        out = np.array([[x.values.sum()]], dtype=x.dtype)

        def backprop(g, accum):
            accum(x, np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape))

        return _make(out, (x,), backprop)

    if not 0 <= axis < x.values.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    out = x.values.sum(axis=axis, keepdims=True)

    def backprop(g, accum):
        accum(x, np.broadcast_to(g, shape))

    return _make(out, (x,), backprop)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Column-wise concatenation of two matrices with equal row counts."""
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise DimensionError(f"concat needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat row counts differ: {a.shape} vs {b.shape}")
    c1 = a.shape[1]
    out = np.concatenate([a.values, b.values], axis=1)

    def backprop(g, accum):
        accum(a, g[:, :c1])
        accum(b, g[:, c1:])

    return _make(out, (a, b), backprop)


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows by index; backward scatter-adds into the source rows."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if x.values.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D tensor, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(f"row index out of range for {x.shape[0]} rows")
    out = x.values[idx]
    shape = x.shape

    def backprop(g, accum):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        accum(x, z)

    return _make(out, (x,), backprop)


def rowmax_pool(x: Tensor, group_size: int) -> Tensor:
    """Max over each contiguous group of ``group_size`` rows.

    Input (m*group_size, C) -> output (m, C). The gradient flows only to the
    argmax row of each (group, channel); ties resolve to the lowest row index.
    """
    n, c = x.shape
    if group_size <= 0 or n % group_size != 0:
        raise DimensionError(f"row count {n} not divisible by group size {group_size}")
    m = n // group_size
    blocks = x.values.reshape(m, group_size, c)
    arg = blocks.argmax(axis=1)  # (m, C), first max wins
    out = np.take_along_axis(blocks, arg[:, None, :], axis=1)[:, 0, :]

    def backprop(g, accum):
        z = np.zeros((m, group_size, c), dtype=g.dtype)
        np.put_along_axis(z, arg[:, None, :], g[:, None, :], axis=1)
        accum(x, z.reshape(n, c))

    return _make(out, (x,), backprop)


def tile_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a (1, C) row vector into (n, C); backward sums over the rows."""
    if x.values.ndim != 2 or x.shape[0] != 1:
        raise DimensionError(f"tile_rows needs shape (1, C), got {x.shape}")
    out = np.broadcast_to(x.values, (n, x.shape[1])).copy()

    def backprop(g, accum):
        accum(x, g.sum(axis=0, keepdims=True))

    return _make(out, (x,), backprop)


def interpolate(feats: Tensor, indices: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted gather: out[i] = sum_j weights[i, j] * feats[indices[i, j]].

    ``indices``/``weights`` are (N_fine, k) constants; gradients flow to
    ``feats`` only.
    """
    idx = np.asarray(indices, dtype=np.int64)
    w = np.asarray(weights, dtype=feats.dtype)
    if idx.ndim != 2 or w.shape != idx.shape:
        raise DimensionError(f"index/weight shapes differ: {idx.shape} vs {w.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= feats.shape[0]):
        raise DimensionError(f"neighbor index out of range for {feats.shape[0]} rows")
    out = np.einsum("ijc,ij->ic", feats.values[idx], w)
    shape = feats.shape
    k = idx.shape[1]

    def backprop(g, accum):
        z = np.zeros(shape, dtype=g.dtype)
        for j in range(k):
            np.add.at(z, idx[:, j], g * w[:, j : j + 1])
        accum(feats, z)

    return _make(out, (feats,), backprop)


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor, activation: str = "relu") -> Tensor:
    """Per-point shared affine map x @ W + b with optional ReLU.

    This is a 1D convolution with kernel size 1: every point (row) is mapped
    by the same (Cin, Cout) weight and (1, Cout) bias.
    """
    if activation not in ("relu", "none"):
        raise ValueError(f"unknown activation {activation!r}")
    if x.values.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"channel mismatch: input {x.shape} vs weight {weight.shape}")
    out = add(matmul(x, weight), bias)
    return relu(out) if activation == "relu" else out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits)[label], stabilized by max shift."""
    lab = np.asarray(labels, dtype=np.int64).ravel()
    if logits.values.ndim != 2:
        raise DimensionError(f"logits must be (N, C), got {logits.shape}")
    n, c = logits.shape
    if lab.shape[0] != n:
        raise DimensionError(f"{n} rows of logits but {lab.shape[0]} labels")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), lab].mean()
    out = np.array([[loss]], dtype=logits.dtype)
    probs = np.exp(log_probs)

    def backprop(g, accum):
        gl = probs.copy()
        gl[np.arange(n), lab] -= 1.0
        accum(logits, gl * (float(np.reshape(g, ())) / n))

    return _make(out, (logits,), backprop)


# ---------------------------------------------------------------------------
# parameters

class Parameter:
    """A named trainable tensor with a record of how it was initialized."""

    __slots__ = ("name", "tensor", "init")

    def __init__(self, name: str, values: np.ndarray, init: str = "explicit"):
        self.name = name
        self.tensor = Tensor(values, requires_grad=True)
        self.init = init

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def zero_grad(self) -> None:
        self.tensor.zero_grad()

    def assign(self, values: np.ndarray) -> None:
        arr = np.asarray(values)
        if arr.shape != self.tensor.shape:
            raise DimensionError(f"parameter {self.name}: cannot assign shape {arr.shape} to {self.tensor.shape}")
        self.tensor.values = arr.astype(self.tensor.dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def he_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Fan-in scaled uniform init, suited to ReLU layers."""
    bound = math.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
