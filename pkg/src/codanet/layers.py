"""Dynamic Alignment Units and the convolutional DAU layer.

A DAU maps an input ``x`` to ``w(x)^T x`` with ``w(x) = g(A B x + b)`` and
``g`` a norm rescaling (L2 or squashing), so ``|w(x)| <= 1``.

In the convolutional layer every output channel is one DAU applied to each
patch; the projection ``B`` is shared by all DAUs of a layer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tensor as tc
from .tensor import DimensionError, GeometryError, Rng


class Nonlinearity(str, enum.Enum):
    L2 = "l2"
    SQ = "sq"

    @classmethod
    def parse(cls, value) -> "Nonlinearity":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown nonlinearity {value!r}; expected 'l2' or 'sq'") from None


def rescale(u, nonlinearity, axis=-1, eps=None) -> ad.Node:
    if Nonlinearity.parse(nonlinearity) is Nonlinearity.L2:
        return ad.l2_rescale(u, axis=axis, eps=eps)
    return ad.sq_rescale(u, axis=axis, eps=eps)


def rescale_array(u: np.ndarray, nonlinearity, axis=-1) -> np.ndarray:
    return rescale(ad.constant(u), nonlinearity, axis=axis).value


def dau_forward(x, A, B, b, nonlinearity="l2"):
    """Single DAU. Returns ``(output, w)``; ``x`` and ``b`` are d-vectors.

    Accepts arrays or autodiff nodes; node inputs give node outputs.
    """
    use_nodes = any(isinstance(t, ad.Node) for t in (x, A, B, b))
    xs, As, Bs, bs = (np.shape(t.value if isinstance(t, ad.Node) else t) for t in (x, A, B, b))
    if len(xs) != 1 or len(As) != 2 or len(Bs) != 2 or As[1] != Bs[0] or Bs[1] != xs[0] \
            or As[0] != xs[0] or tuple(bs) != tuple(xs):
        raise DimensionError(f"dau_forward: x{xs} A{As} B{Bs} b{bs} do not conform")
    xn, An, Bn, bn = (t if isinstance(t, ad.Node) else ad.constant(np.asarray(t)) for t in (x, A, B, b))
    xc = ad.reshape(xn, (-1, 1))
    pre = ad.add(ad.matmul(An, ad.matmul(Bn, xc)), ad.reshape(bn, (-1, 1)))
    w = ad.reshape(rescale(pre, nonlinearity, axis=0), (-1,))
    out = ad.sum(ad.elementwise_mul(w, xn))
    if use_nodes:
        return out, w
    return float(out.value), w.value


@dataclass
class DauConvLayer:
    """Convolutional DAU layer.

    ``rank`` may exceed ``patch_dim`` (some published presets do this); the
    rank of ``A B`` is then bounded by ``patch_dim`` instead.

    Parameter storage: ``B`` is ``(rank, patch_dim)``; ``A`` is
    ``(out_channels * patch_dim, rank)`` laid out as ``out_channels`` blocks
    of ``patch_dim`` rows; ``b`` is ``(out_channels, patch_dim)``.
    """

    in_channels: int
    out_channels: int
    rank: int
    kernel: int = 3
    stride: int = 1
    padding: int | None = None
    nonlinearity: Nonlinearity = Nonlinearity.SQ
    A: np.ndarray | None = field(default=None, repr=False)
    B: np.ndarray | None = field(default=None, repr=False)
    b: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.nonlinearity = Nonlinearity.parse(self.nonlinearity)
        if self.padding is None:
            self.padding = (self.kernel - 1) // 2
        for name in ("in_channels", "out_channels", "rank", "kernel", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise GeometryError(f"padding must be >= 0, got {self.padding}")
        if self.A is not None:
            self._check_params()

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "A": (self.out_channels * self.patch_dim, self.rank),
            "B": (self.rank, self.patch_dim),
            "b": (self.out_channels, self.patch_dim),
        }

    def _check_params(self):
        for name, shape in self.param_shapes().items():
            got = getattr(self, name)
            if got is None or got.shape != shape:
                raise DimensionError(
                    f"parameter {name} has shape {None if got is None else got.shape}, "
                    f"expected {shape}"
                )

    def init_params(self, rng: Rng, dtype=np.float32) -> "DauConvLayer":
        """A, B ~ N(0, 1/sqrt(fan_in)); b = 0."""
        shapes = self.param_shapes()
        self.B = rng.normal(shapes["B"], 0.0, 1.0 / np.sqrt(self.patch_dim), dtype=dtype)
        self.A = rng.normal(shapes["A"], 0.0, 1.0 / np.sqrt(self.rank), dtype=dtype)
        self.b = np.zeros(shapes["b"], dtype=dtype)
        return self

    def params(self) -> dict[str, np.ndarray]:
        return {"A": self.A, "B": self.B, "b": self.b}

    def astype(self, dtype) -> "DauConvLayer":
        return DauConvLayer(
            self.in_channels, self.out_channels, self.rank, self.kernel, self.stride,
            self.padding, self.nonlinearity,
            *(None if p is None else p.astype(dtype) for p in (self.A, self.B, self.b)),
        )

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return (
            tc.conv_output_size(h, self.kernel, self.stride, self.padding),
            tc.conv_output_size(w, self.kernel, self.stride, self.padding),
        )

    def geometry(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "rank": self.rank,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
        }


@dataclass
class ConvTrace:
    """Intermediate values of one batched layer evaluation (autodiff nodes)."""

    output: ad.Node  # (N, f, H', W')
    weights: ad.Node  # (N, L, f, P)
    patches: ad.Node  # (N, L, P)
    in_shape: tuple[int, int, int]
    out_hw: tuple[int, int]


def conv_trace(layer: DauConvLayer, x, params: dict | None = None) -> ConvTrace:
    """Batched layer forward on ``x`` of shape ``(N, C, H, W)``.

    Follows the reference recipe: project patches with B, map with A and add
    b, rescale each weight vector, then contract weights with the patches.
    ``params`` may supply autodiff nodes for A, B, b (for training).
    """
    x = x if isinstance(x, ad.Node) else ad.constant(np.asarray(x))
    if x.ndim != 4:
        raise DimensionError(f"conv_forward expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if c != layer.in_channels:
        raise DimensionError(f"layer expects {layer.in_channels} input channels, got {c}")
    if params is None:
        params = {k: ad.constant(v) for k, v in layer.params().items()}
    oh, ow = layer.output_size(h, w)
    nloc, f, pd = oh * ow, layer.out_channels, layer.patch_dim

    cols = ad.unfold(x, layer.kernel, layer.stride, layer.padding)  # N, P, L
    patches = ad.transpose(cols, (0, 2, 1))  # N, L, P
    reduced = ad.matmul(patches, ad.transpose(params["B"], (1, 0)))  # N, L, r
    pre = ad.matmul(reduced, ad.transpose(params["A"], (1, 0)))  # N, L, f*P
    pre = ad.add(ad.reshape(pre, (n, nloc, f, pd)), params["b"])
    weights = rescale(pre, layer.nonlinearity, axis=-1)  # N, L, f, P
    out = ad.batched_matvec(weights, patches)  # N, L, f
    out = ad.transpose(ad.reshape(out, (n, oh, ow, f)), (0, 3, 1, 2))
    return ConvTrace(out, weights, patches, (c, h, w), (oh, ow))


def conv_forward(layer: DauConvLayer, x: np.ndarray):
    """Single image ``(C, H, W)`` -> ``(output (f, H', W'), weights (P, f, H', W'))``."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"conv_forward expects (C, H, W), got {x.shape}")
    tr = conv_trace(layer, x[None])
    oh, ow = tr.out_hw
    wts = tr.weights.value[0].reshape(oh, ow, layer.out_channels, layer.patch_dim)
    return tr.output.value[0], np.ascontiguousarray(wts.transpose(3, 2, 0, 1))


class LayerLinearMap:
    """The input-dependent matrix of one layer, ``W_l`` with ``a_l = W_l a_{l-1}``.

    Held in row-sparse form: the dynamic weight of every (DAU, location) pair
    plus the geometry. :meth:`dense` materialises the full
    ``(f*H'*W') x (C*H*W)`` matrix; :meth:`matvec` and :meth:`rmatmul`
    apply it without materialising.
    """

    def __init__(self, weights: np.ndarray, in_shape, out_hw, kernel, stride, padding):
        # weights: (N, L, f, P) for a batch, or (L, f, P)
        self.weights = weights
        self.in_shape = tuple(in_shape)
        self.out_hw = tuple(out_hw)
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    @property
    def out_channels(self) -> int:
        return self.weights.shape[-2]

    @property
    def shape(self) -> tuple[int, int]:
        c, h, w = self.in_shape
        oh, ow = self.out_hw
        return (self.out_channels * oh * ow, c * h * w)

    def _fold(self, cols):
        c, h, w = self.in_shape
        return tc.fold(cols, c, (h, w), self.kernel, self.stride, self.padding)

    def _unfold(self, x):
        return tc.unfold(x, self.kernel, self.stride, self.padding)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """``W_l @ vec(x)`` for ``x`` of shape ``(..., C, H, W)``; returns ``(..., f, H', W')``."""
        patches = np.swapaxes(self._unfold(x), -1, -2)  # ..., L, P
        out = np.einsum("...lfp,...lp->...fl", self.weights, patches)
        return out.reshape(*out.shape[:-1], *self.out_hw)

    def rmatmul(self, rows: np.ndarray) -> np.ndarray:
        """``rows @ W_l`` with ``rows`` shaped ``(..., m, f, H', W')``.

        Returns ``(..., m, C, H, W)``. Batched maps need rows with a matching
        leading batch axis.
        """
        *lead, m, f, oh, ow = rows.shape
        v = np.moveaxis(rows.reshape(*lead, m, f, oh * ow), -1, -3)  # ..., L, m, f
        cols = np.moveaxis(v @ self.weights, -3, -1)  # ..., m, P, L
        return self._fold(cols)

    def dense(self) -> np.ndarray:
        """Materialised matrix for a single (unbatched) input."""
        if self.weights.ndim != 3:
            raise ValueError("dense() needs the map of a single input")
        c, h, w = self.in_shape
        oh, ow = self.out_hw
        f = self.out_channels
        k, s, p = self.kernel, self.stride, self.padding
        mat = np.zeros(self.shape, dtype=self.weights.dtype)
        for j in range(f):
            for i in range(oh):
                for jj in range(ow):
                    row = j * oh * ow + i * ow + jj
                    wv = self.weights[i * ow + jj, j]
                    for ci in range(c):
                        for ki in range(k):
                            hh = i * s + ki - p
                            if not 0 <= hh < h:
                                continue
                            for kj in range(k):
                                ww = jj * s + kj - p
                                if 0 <= ww < w:
                                    mat[row, ci * h * w + hh * w + ww] = wv[ci * k * k + ki * k + kj]
        return mat

    def scaled_row(self, row: int, factor: float) -> "LayerLinearMap":
        """Copy with one row multiplied by ``factor`` (used for fault injection)."""
        oh, ow = self.out_hw
        j, loc = divmod(row, oh * ow)
        wts = self.weights.copy()
        wts[..., loc, j, :] *= factor
        return LayerLinearMap(wts, self.in_shape, self.out_hw, self.kernel, self.stride, self.padding)


def layer_matrix(layer: DauConvLayer, x: np.ndarray) -> LayerLinearMap:
    """Linear map of ``layer`` at input ``x`` (``(C, H, W)`` or batched ``(N, C, H, W)``)."""
    x = np.asarray(x)
    single = x.ndim == 3
    tr = conv_trace(layer, x[None] if single else x)
    wts = tr.weights.value[0] if single else tr.weights.value
    return LayerLinearMap(wts, tr.in_shape, tr.out_hw, layer.kernel, layer.stride, layer.padding)


def sum_pool_matrix(f: int, h: int, w: int, dtype=np.float64) -> np.ndarray:
    """``f x (f*h*w)`` 0/1 matrix summing each channel over space."""
    if min(f, h, w) < 1:
        raise ValueError(f"sum_pool_matrix needs positive dims, got {(f, h, w)}")
    return np.kron(np.eye(f, dtype=dtype), np.ones((1, h * w), dtype=dtype))
