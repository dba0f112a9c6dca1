"""Tape-free reverse-mode differentiation over numpy arrays.

Every forward evaluation builds a fresh graph of :class:`Node` objects; the
graph is the set of nodes reachable from the root through ``parents``.
:func:`backward` walks it once in reverse topological order.

The norm rescalings carry an epsilon guard, ``u / (|u| + eps)``, and the
backward rules differentiate exactly that guarded expression.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as tc
from .tensor import DimensionError

__all__ = [
    "Node",
    "abs_mean",
    "add",
    "backward",
    "batched_matvec",
    "bce_with_logits",
    "constant",
    "detach",
    "einsum",
    "elementwise_mul",
    "eps_for",
    "fold",
    "grad",
    "l2_rescale",
    "matmul",
    "mean",
    "parameter",
    "reshape",
    "scale",
    "sigmoid",
    "sq_rescale",
    "sub",
    "sum",
    "topological_order",
    "transpose",
    "unfold",
]

EPS64 = 1e-12
EPS32 = 1e-8


def eps_for(dtype) -> float:
    return EPS64 if np.dtype(dtype) == np.float64 else EPS32


class Node:
    """One value in a differentiation graph."""

    __slots__ = ("value", "parents", "vjp", "requires_grad", "name")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.parents: tuple[Node, ...] = tuple(parents)
        # vjp(upstream) -> tuple of gradients, one per parent (None = no flow)
        self.vjp: Callable | None = vjp
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def detached(self) -> bool:
        return not self.requires_grad

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return elementwise_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name=None) -> Node:
    return Node(value, requires_grad=True, name=name)


def constant(value, name=None) -> Node:
    return Node(value, requires_grad=False, name=name)


def _node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents: Sequence[Node], vjp) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, parents, vjp, requires_grad=True)
    return Node(value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Node, b: Node, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------- ops


def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Node:
    a, b = _node(a), _node(b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def elementwise_mul(a, b) -> Node:
    a, b = _node(a), _node(b)
    _check_broadcast(a, b, "elementwise_mul")
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def scale(a, factor: float) -> Node:
    a = _node(a)
    factor = a.dtype.type(factor) if a.dtype.kind == "f" else factor
    return _make(a.value * factor, (a,), lambda g: (g * factor,))


def matmul(a, b) -> Node:
    """``numpy.matmul`` semantics, including batch broadcasting (both operands >= 2-d)."""
    a, b = _node(a), _node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None
    av, bv = a.value, b.value

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(av @ bv, (a, b), vjp)


def einsum(subscripts: str, a, b) -> Node:
    """Two-operand einsum without repeated indices inside one operand."""
    a, b = _node(a), _node(b)
    ins, out = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s in (sa, sb):
        if len(set(s)) != len(s):
            raise ValueError(f"einsum: repeated index in operand '{s}'")
    try:
        value = np.einsum(subscripts, a.value, b.value, optimize=True)
    except ValueError as exc:
        raise DimensionError(f"einsum {subscripts}: {a.shape}, {b.shape}: {exc}") from None
    av, bv = a.value, b.value

    def grad_for(target: str, other: str, other_val, target_shape):
        def run(g):
            avail = set(out) | set(other)
            missing = [c for c in target if c not in avail]
            if not missing:
                return np.einsum(f"{out},{other}->{target}", g, other_val, optimize=True)
            # index summed away from this operand alone: gradient is broadcast
            kept = "".join(c for c in target if c in avail)
            part = np.einsum(f"{out},{other}->{kept}", g, other_val, optimize=True)
            expand = [slice(None) if c in avail else None for c in target]
            return np.broadcast_to(part[tuple(expand)], target_shape).copy()

        return run

    ga = grad_for(sa, sb, bv, a.shape)
    gb = grad_for(sb, sa, av, b.shape)
    return _make(
        value,
        (a, b),
        lambda g: (ga(g) if a.requires_grad else None, gb(g) if b.requires_grad else None),
    )


def batched_matvec(m, v) -> Node:
    """``out[..., i] = sum_j m[..., i, j] * v[..., j]`` with shared leading axes."""
    m, v = _node(m), _node(v)
    if m.ndim < 2 or m.shape[:-2] != v.shape[:-1] or m.shape[-1] != v.shape[-1]:
        raise DimensionError(f"batched_matvec: {m.shape} and {v.shape} do not conform")
    mv, vv = m.value, v.value

    def vjp(g):
        gm = g[..., :, None] * vv[..., None, :] if m.requires_grad else None
        gv = np.einsum("...i,...ij->...j", g, mv) if v.requires_grad else None
        return gm, gv

    return _make(np.einsum("...ij,...j->...i", mv, vv), (m, v), vjp)


def sum(a, axis=None, keepdims=False) -> Node:  # noqa: A001 - mirrors numpy
    a = _node(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Node:
    a = _node(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Node:
    a = _node(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Node:
    a = _node(a)
    inv = np.argsort(axes)
    return _make(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def sigmoid(a) -> Node:
    a = _node(a)
    s = _sigmoid(a.value)
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(z, y) -> Node:
    """Elementwise binary cross-entropy of ``sigmoid(z)`` against targets ``y``."""
    z = _node(z)
    yv = np.asarray(y.value if isinstance(y, Node) else y, dtype=z.dtype)
    if np.broadcast_shapes(z.shape, yv.shape) != z.shape:
        raise DimensionError(f"bce_with_logits: targets {yv.shape} vs logits {z.shape}")
    zv = z.value
    loss = np.maximum(zv, 0) - zv * yv + np.log1p(np.exp(-np.abs(zv)))
    return _make(loss, (z,), lambda g: (g * (_sigmoid(zv) - yv),))


def abs_mean(a, axis=None) -> Node:
    a = _node(a)
    av = a.value
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    inv = av.dtype.type(1.0 / count)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.sign(av) * g * inv,)

    return _make(np.abs(av).mean(axis=axis), (a,), vjp)


def _dot_along(a, b, axis):
    if axis in (-1, a.ndim - 1):
        return np.einsum("...i,...i->...", a, b)[..., None]
    return np.sum(a * b, axis=axis, keepdims=True)


def _norm(u, axis):
    return np.sqrt(_dot_along(u, u, axis))


def l2_rescale(u, axis=-1, eps=None) -> Node:
    """``u / (|u| + eps)`` along ``axis``."""
    u = _node(u)
    uv = u.value
    eps = eps_for(uv.dtype) if eps is None else eps
    n = _norm(uv, axis)
    d = n + eps
    out = uv / d

    def vjp(g):
        gu = _dot_along(g, uv, axis)
        safe = np.where(n > 0, n, 1)
        out_g = g / d
        out_g -= uv * (gu / (safe * d * d))
        return (out_g,)

    return _make(out, (u,), vjp)


def sq_rescale(u, axis=-1, eps=None) -> Node:
    """Squashing: ``u / (|u| + eps) * |u|^2 / (1 + |u|^2)`` along ``axis``."""
    u = _node(u)
    uv = u.value
    eps = eps_for(uv.dtype) if eps is None else eps
    n = _norm(uv, axis)
    n2 = n * n
    d = (n + eps) * (1 + n2)
    h = n2 / d
    out = uv * h

    def vjp(g):
        gu = _dot_along(g, uv, axis)
        # h'(n) / n, written without dividing by n so it stays finite at 0
        dh_over_n = (2 * (n + eps) * (1 + n2) - n * ((1 + n2) + 2 * n * (n + eps))) / (d * d)
        out_g = g * h
        out_g += uv * (gu * dh_over_n)
        return (out_g,)

    return _make(out, (u,), vjp)


def unfold(x, kernel: int, stride: int = 1, padding: int = 0) -> Node:
    x = _node(x)
    *_, c, h, w = x.shape
    cols = tc.unfold(x.value, kernel, stride, padding)
    return _make(
        cols, (x,), lambda g: (tc.fold(g, c, (h, w), kernel, stride, padding),)
    )


def fold(cols, channels: int, size, kernel: int, stride: int = 1, padding: int = 0) -> Node:
    cols = _node(cols)
    img = tc.fold(cols.value, channels, tuple(size), kernel, stride, padding)
    return _make(img, (cols,), lambda g: (tc.unfold(g, kernel, stride, padding),))


def detach(a) -> Node:
    """Same value, no gradient flow to anything upstream."""
    a = _node(a)
    return Node(a.value, requires_grad=False, name=a.name)


# ---------------------------------------------------------------- backward


def topological_order(root: Node) -> list[Node]:
    """Nodes reachable from ``root`` that carry gradient, parents before children."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, seed: np.ndarray | None = None) -> dict[Node, np.ndarray]:
    """Gradients of a scalar ``root`` for every gradient-carrying leaf.

    Returns a mapping keyed by leaf node. ``seed`` may be passed to pull back
    a non-scalar root with an explicit upstream vector.
    """
    if seed is None:
        if root.value.size != 1:
            raise ValueError(
                f"backward needs a scalar root, got shape {root.shape}; pass seed= for VJPs"
            )
        seed = np.ones_like(root.value)
    if not root.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=root.dtype)}
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad(root: Node, wrt: Iterable[Node]) -> list[np.ndarray]:
    """Gradients of ``root`` for the given leaves (zeros where no path exists)."""
    got = backward(root)
    return [got.get(w, np.zeros_like(w.value)) for w in wrt]
