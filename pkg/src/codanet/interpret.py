"""Attribution maps and the metrics used to judge them.

Everything here works on the encoded (6-channel) input. Spatial maps are
obtained by summing the encoded channels per pixel.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import network as nw
from .datasets import GridSample
from .imageio import encode_ppm
from .layers import Nonlinearity, rescale
from .tensor import GeometryError, Rng

# ------------------------------------------------------------ attributions


@dataclass(frozen=True)
class AttributionMethod:
    tag: str  # "coda" | "grad" | "ixg" | "occ"
    size: int = 0  # occlusion patch K
    stride: int = 2

    @classmethod
    def parse(cls, text: str) -> "AttributionMethod":
        """``coda``, ``grad``, ``ixg``, ``occ`` (K=4) or ``occ-K`` / ``occ-K-S``."""
        low = text.strip().lower()
        if low in ("coda", "grad", "ixg"):
            return cls(low)
        m = re.fullmatch(r"occ(?:-(\d+))?(?:-(\d+))?", low)
        if m:
            return cls("occ", int(m.group(1) or 4), int(m.group(2) or 2))
        raise ValueError(f"unknown attribution method {text!r}")

    def __str__(self):
        return f"occ-{self.size}" if self.tag == "occ" else self.tag


def _input_gradients(net: nw.CodaNet, x: np.ndarray, classes: np.ndarray) -> np.ndarray:
    leaf = ad.parameter(x)
    tr = nw.trace(net, leaf)
    onehot = np.zeros(tr.logits.shape, dtype=x.dtype)
    onehot[np.arange(len(x)), classes] = 1
    grads = ad.backward(tr.logits, seed=onehot)
    return grads[leaf]


def _occlusion(net: nw.CodaNet, x: np.ndarray, classes: np.ndarray, size: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    if size > min(h, w):
        raise GeometryError(f"occlusion patch {size} exceeds image {h}x{w}")
    base = nw.forward(net, x, encoded=True)[np.arange(n), classes]
    tops = range(0, h - size + 1, stride)
    lefts = range(0, w - size + 1, stride)
    total = np.zeros((n, h, w), dtype=np.float64)
    hits = np.zeros((h, w), dtype=np.float64)
    for i in range(n):
        batch, spots = [], []
        for t in tops:
            for l in lefts:
                occ = x[i].copy()
                occ[:, t:t + size, l:l + size] = 0
                batch.append(occ)
                spots.append((t, l))
        logits = nw.forward_batched(net, np.stack(batch), 64, encoded=True)[:, classes[i]]
        for (t, l), val in zip(spots, logits):
            total[i, t:t + size, l:l + size] += base[i] - val
            if i == 0:
                hits[t:t + size, l:l + size] += 1
    return np.where(hits > 0, total / np.maximum(hits, 1), 0.0)


def attribute_batch(method, net: nw.CodaNet, images, classes, encoded: bool = False) -> np.ndarray:
    """Spatial attribution maps ``(N, H, W)``, one target class per image."""
    method = AttributionMethod.parse(method) if isinstance(method, str) else method
    x, _ = nw.prepare(net, images, encoded)
    classes = np.broadcast_to(np.asarray(classes).reshape(-1), (len(x),)).copy()
    nw._check_classes(net, classes)
    if method.tag == "coda":
        return nw.contributions_batch(net, x, classes, encoded=True).sum(axis=1)
    if method.tag in ("grad", "ixg"):
        g = _input_gradients(net, x, classes)
        return (g if method.tag == "grad" else g * x).sum(axis=1)
    return _occlusion(net, x, classes, method.size, method.stride)


def attribute(method, net: nw.CodaNet, image, j: int, encoded: bool = False) -> np.ndarray:
    """Spatial map ``(H, W)`` for one image and class ``j``."""
    x, _ = nw.prepare(net, image, encoded)
    return attribute_batch(method, net, x, [j], encoded=True)[0]


# ------------------------------------------------------------ pointing game


def pointing_score(attr: np.ndarray, grid: GridSample, cls: int) -> float:
    """Share of positive attribution that falls in the cell holding ``cls``.

    Falls back to the chance level ``1/n^2`` when there is no positive mass.
    """
    attr = np.asarray(attr, dtype=np.float64)
    if attr.shape != grid.image.shape[1:]:
        raise GeometryError(f"attribution {attr.shape} does not match grid {grid.image.shape[1:]}")
    rs, cs = grid.cell_slice(grid.cell_of(cls))
    pos = np.maximum(attr, 0)
    total = pos.sum()
    if total <= 0:
        return 1.0 / grid.n ** 2
    return float(pos[rs, cs].sum() / total)


def pointing_game(net: nw.CodaNet, grids: list[GridSample], method, batch: int = 16) -> np.ndarray:
    """Scores for every (grid, class) pair, grid-major."""
    scores = []
    for grid in grids:
        classes = np.asarray(grid.cell_classes)
        x, _ = nw.prepare(net, grid.image)
        xs = np.repeat(x, len(classes), axis=0)
        maps = np.concatenate([
            attribute_batch(method, net, xs[i:i + batch], classes[i:i + batch], encoded=True)
            for i in range(0, len(classes), batch)
        ])
        scores.extend(pointing_score(m, grid, int(c)) for m, c in zip(maps, classes))
    return np.asarray(scores)


# ------------------------------------------------------------ pixel removal


@dataclass
class RemovalCurve:
    fractions: np.ndarray
    values: np.ndarray
    order: str

    def area(self) -> float:
        return float(np.trapezoid(self.values, self.fractions))


def removal_order(ranking: np.ndarray, order: str, rng: Rng | None = None) -> np.ndarray:
    """Flat pixel indices in removal order; ties keep row-major order."""
    flat = np.asarray(ranking, dtype=np.float64).ravel()
    if order == "least":
        return np.argsort(flat, kind="stable")
    if order == "most":
        return np.argsort(-flat, kind="stable")
    if order == "random":
        return (rng or Rng(0)).permutation(flat.size)
    raise ValueError(f"order must be 'least', 'most' or 'random', got {order!r}")


def pixel_removal_curve(
    net: nw.CodaNet,
    image,
    j: int,
    ranking: np.ndarray,
    order: str = "least",
    steps: int = 10,
    max_fraction: float = 0.25,
    rng: Rng | None = None,
    encoded: bool = False,
) -> RemovalCurve:
    """Logit of class ``j`` as pixels are zeroed (all encoded channels) in rank order."""
    x, _ = nw.prepare(net, image, encoded)
    x = x[0]
    c, h, w = x.shape
    if np.shape(ranking) != (h, w):
        raise GeometryError(f"ranking {np.shape(ranking)} does not match image {(h, w)}")
    idx = removal_order(ranking, order, rng)
    fractions = np.linspace(0.0, max_fraction, steps + 1)
    counts = np.rint(fractions * h * w).astype(int)
    batch = np.repeat(x[None], len(counts), axis=0)
    for b, k in enumerate(counts):
        rr, cc = np.unravel_index(idx[:k], (h, w))
        batch[b][:, rr, cc] = 0
    logits = nw.forward_batched(net, batch, 32, encoded=True)[:, j]
    return RemovalCurve(fractions, logits.astype(np.float64), order)


# ------------------------------------------------------------- sanity check


def normalized_distance(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a)
    if denom == 0:
        return float(np.linalg.norm(b) > 0)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom)


def sanity_randomization(net: nw.CodaNet, image, j: int, rng: Rng, encoded: bool = False):
    """Cascading re-initialisation, deepest layer first.

    Returns ``[(L, original), (L-1, map), ..., (0, map)]`` where entry ``l``
    holds the spatial contribution map after re-initialising layers
    ``l .. L-1`` (0-based).
    """
    x, _ = nw.prepare(net, image, encoded)
    work = net.copy()
    out = [(len(net.layers), nw.contributions(work, x, j, encoded=True).spatial())]
    for l in reversed(range(len(net.layers))):
        work.layers[l].init_params(rng, work.dtype)
        out.append((l, nw.contributions(work, x, j, encoded=True).spatial()))
    return out


# ------------------------------------------------------------- eigenvectors


def dau_eigenvectors(A: np.ndarray, B: np.ndarray, tol: float = 1e-8):
    """Non-zero real eigenpairs of ``A @ B`` via the small ``B @ A``.

    If ``B A u = lam u`` then ``A B (A u) = lam (A u)``. Eigenvectors are
    unit-norm with their largest-magnitude entry positive, sorted by
    decreasing ``|lam|``. Repeated eigenvalues get an orthonormal basis of
    their eigenspace. Complex pairs, (near-)zero eigenvalues and missing
    directions of defective eigenvalues are dropped, so fewer than ``r``
    pairs can come back.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    small = B @ A
    r = len(small)
    lam = np.linalg.eigvals(small)
    scale = max(np.abs(lam).max(initial=0.0), 1.0)
    real = sorted(
        (float(v.real) for v in lam if abs(v) > tol * scale and abs(v.imag) <= 1e-9 * scale),
        key=lambda v: -abs(v),
    )
    clusters: list[list[float]] = []
    for v in real:
        if clusters and abs(v - clusters[-1][0]) <= 1e-7 * scale:
            clusters[-1].append(v)
        else:
            clusters.append([v])
    pairs = []
    for group in clusters:
        val = float(np.mean(group))
        _, sv, Vt = np.linalg.svd(small - val * np.eye(r))
        null = Vt[r - len(group):][sv[r - len(group):] <= 1e-6 * scale]
        lifted = A @ null.T
        if not lifted.size:
            continue
        Q, R = np.linalg.qr(lifted)
        for k in range(Q.shape[1]):
            if abs(R[k, k]) <= tol:
                continue
            v = Q[:, k]
            if v[np.argmax(np.abs(v))] < 0:
                v = -v
            pairs.append((val, v))
    return pairs


def subspace_cosines(vectors: list[np.ndarray], targets: np.ndarray) -> np.ndarray:
    """Norm of each unit target's projection onto ``span(vectors)``."""
    targets = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
    if not vectors:
        return np.zeros(len(targets))
    Q, _ = np.linalg.qr(np.stack(vectors, axis=1))
    unit = targets / np.linalg.norm(targets, axis=1, keepdims=True)
    return np.linalg.norm(unit @ Q, axis=1)


@dataclass
class MaximisationResult:
    A: np.ndarray
    B: np.ndarray
    mean_output: list[float]


def mean_output_and_grads(X: np.ndarray, A: np.ndarray, B: np.ndarray, nonlinearity="l2"):
    """Mean output of a bias-free DAU over the rows of ``X`` and its gradients.

    With ``z = Bx``, ``y = A^T x`` and ``s = |Az|`` the output is
    ``y.z * h(s)``, so everything is computed with ``n x r`` intermediates
    instead of materialising the ``n x d`` weight vectors.
    """
    g = Nonlinearity.parse(nonlinearity)
    eps = ad.eps_for(X.dtype)
    n = len(X)
    Z = X @ B.T
    Y = X @ A
    G = A.T @ A
    s = np.sqrt(np.maximum(np.einsum("ni,ij,nj->n", Z, G, Z), 0.0))
    yz = np.einsum("ni,ni->n", Y, Z)
    if g is Nonlinearity.L2:
        h = 1.0 / (s + eps)
        hs = -h * h / np.where(s > 0, s, 1.0)  # h'(s) / s
    else:
        q = (s + eps) * (1 + s * s)
        h = s * s / q
        dq = (1 + s * s) + 2 * s * (s + eps)
        hs = (2 * q - s * dq) / (q * q)
    out = yz * h
    c = yz * hs
    dA = (X.T @ (Z * h[:, None]) + A @ ((Z * c[:, None]).T @ Z)) / n
    dZ = Y * h[:, None] + (Z @ G) * c[:, None]
    dB = (dZ.T @ X) / n
    return float(out.mean()), dA, dB


def maximise_dau_output(
    samples: np.ndarray,
    rank: int = 3,
    steps: int = 2000,
    lr: float = 3e-3,
    nonlinearity: str = "l2",
    rng: Rng | None = None,
    dtype=np.float64,
) -> MaximisationResult:
    """Adam ascent on the mean output of one bias-free DAU over ``samples``."""
    from .training import AdamState, adam_step

    X = np.asarray(samples, dtype=dtype).reshape(len(samples), -1)
    d = X.shape[1]
    rng = rng or Rng(0)
    params = {
        "A": rng.normal((d, rank), 0.0, 1.0 / np.sqrt(rank), dtype=dtype),
        "B": rng.normal((rank, d), 0.0, 1.0 / np.sqrt(d), dtype=dtype),
    }
    state = AdamState.for_params(params, lr)
    history = []
    for _ in range(steps):
        out, dA, dB = mean_output_and_grads(X, params["A"], params["B"], nonlinearity)
        history.append(out)
        adam_step(params, {"A": -dA, "B": -dB}, state)
    return MaximisationResult(params["A"], params["B"], history)


# --------------------------------------------------------------- rendering


def heatmap_rgb(values: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Diverging colours: positive red, negative blue, zero white.

    The scale is symmetric, ``[-v, v]`` with ``v`` the 99.75th percentile of
    the absolute values unless ``vmax`` is given. Sparse maps whose
    percentile is zero fall back to the largest absolute value.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 2:
        raise ValueError(f"heatmap needs a 2-d map, got {vals.shape}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("heatmap values must be finite")
    if vmax is None:
        v = float(np.percentile(np.abs(vals), 99.75)) if vals.size else 0.0
        v = v or float(np.abs(vals).max(initial=0.0))
    else:
        v = float(vmax)
    t = np.clip(vals / v, -1.0, 1.0) if v > 0 else np.zeros_like(vals)
    fade_pos = np.rint(255 * (1 - np.clip(t, 0, 1))).astype(np.uint8)
    fade_neg = np.rint(255 * (1 + np.clip(t, -1, 0))).astype(np.uint8)
    rgb = np.full(vals.shape + (3,), 255, dtype=np.uint8)
    pos, neg = t > 0, t < 0
    rgb[pos, 1] = fade_pos[pos]
    rgb[pos, 2] = fade_pos[pos]
    rgb[neg, 0] = fade_neg[neg]
    rgb[neg, 1] = fade_neg[neg]
    return rgb


def render_heatmap(values: np.ndarray, out_path, vmax: float | None = None) -> None:
    Path(out_path).write_bytes(encode_ppm(heatmap_rgb(values, vmax)))
