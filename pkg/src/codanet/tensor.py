"""Dense tensor helpers: shape checks, patch extraction and the seeded RNG.

Tensors are plain row-major ``numpy.ndarray`` objects. Patch columns follow
the usual ``unfold`` convention: channel-major, then row-major inside the
k x k window.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "GeometryError",
    "Rng",
    "as_tensor",
    "conv_output_size",
    "fold",
    "matmul",
    "rand_normal",
    "unfold",
]

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class GeometryError(ValueError):
    """Kernel/stride/padding do not produce a valid output grid."""


def as_tensor(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain 2-d matrix product with a shape check that names both operands."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Output length of a strided window sweep, floor convention."""
    if kernel < 1 or stride < 1 or padding < 0:
        raise GeometryError(
            f"invalid geometry kernel={kernel} stride={stride} padding={padding}"
        )
    span = size + 2 * padding - kernel
    if span < 0:
        raise GeometryError(
            f"kernel {kernel} does not fit input of size {size} with padding {padding}"
        )
    return span // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    return np.pad(x, widths)


def unfold(x: np.ndarray, kernel: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Extract k x k patches as columns.

    ``x`` is ``(..., C, H, W)``; the result is ``(..., C*k*k, H'*W')``.
    """
    x = np.asarray(x)
    if x.ndim < 3:
        raise DimensionError(f"unfold expects (..., C, H, W), got shape {x.shape}")
    *lead, c, h, w = x.shape
    oh = conv_output_size(h, kernel, stride, padding)
    ow = conv_output_size(w, kernel, stride, padding)
    xp = _pad(x, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(-2, -1))
    # win: (..., C, Hp-k+1, Wp-k+1, k, k)
    win = win[..., : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride, :, :]
    nl = len(lead)
    order = list(range(nl)) + [nl, nl + 3, nl + 4, nl + 1, nl + 2]
    cols = win.transpose(order)
    return np.ascontiguousarray(cols).reshape(*lead, c * kernel * kernel, oh * ow)


def fold(
    cols: np.ndarray,
    channels: int,
    size: tuple[int, int],
    kernel: int,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Adjoint of :func:`unfold`: scatter-add patch columns back onto the image."""
    cols = np.asarray(cols)
    h, w = size
    oh = conv_output_size(h, kernel, stride, padding)
    ow = conv_output_size(w, kernel, stride, padding)
    *lead, pdim, nloc = cols.shape
    if pdim != channels * kernel * kernel or nloc != oh * ow:
        raise DimensionError(
            f"fold: columns {cols.shape} do not match C={channels}, k={kernel}, "
            f"output grid {oh}x{ow}"
        )
    c6 = cols.reshape(*lead, channels, kernel, kernel, oh, ow)
    out = np.zeros((*lead, channels, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for ki in range(kernel):
        hi = ki + (oh - 1) * stride + 1
        for kj in range(kernel):
            wj = kj + (ow - 1) * stride + 1
            out[..., ki:hi:stride, kj:wj:stride] += c6[..., ki, kj, :, :]
    if padding:
        out = out[..., padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


class Rng:
    """Seeded PCG64 stream. All randomness in the package goes through one of these."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, mean=0.0, std=1.0, dtype=np.float64) -> np.ndarray:
        return rand_normal(self, shape, mean, std, dtype=dtype)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def spawn(self) -> "Rng":
        """Independent child stream derived deterministically from this one."""
        return Rng(int(self._gen.integers(0, 2**63 - 1)))

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def rand_normal(rng: Rng, shape: Sequence[int] | int, mean=0.0, std=1.0, dtype=np.float64):
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if np.isscalar(shape):
        shape = (int(shape),)
    z = rng.generator.standard_normal(tuple(shape))
    return (mean + std * z).astype(dtype, copy=False)
