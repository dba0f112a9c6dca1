"""Invariant suites behind ``codanet verify``.

Each suite returns a :class:`SuiteResult` with the worst observed error and
the threshold it was held to.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import network as nw
from .config import ConfigFile, LayerSpec, preset
from .layers import DauConvLayer, dau_forward, layer_matrix, sum_pool_matrix
from .tensor import Rng

# Test-only fault injection: "collapse-row" scales one row of one layer map
# inside the collapse path. Read from the environment so the CLI can be
# exercised as a subprocess.
FAULT_ENV = "CODA_TEST_FAULT"


@dataclass
class SuiteResult:
    name: str
    passed: bool
    worst: float
    threshold: float
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = " ".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.details.items())
        return f"{status} {self.name}: worst={self.worst:.3e} threshold={self.threshold:.1e} ({self.seconds:.1f}s) {extra}".rstrip()


def _fault() -> str | None:
    return os.environ.get(FAULT_ENV) or None


def _perturb(maps):
    maps = list(maps)
    first = maps[0]
    oh, ow = first.out_hw
    row = (oh // 2) * ow + ow // 2  # channel 0, centre location
    maps[0] = first.scaled_row(row, 3.0)
    return maps


def random_net(spec: str | ConfigFile, rng: Rng, dtype=np.float64, bias_std: float = 0.5) -> nw.CodaNet:
    """Preset with random A, B and a random (non-zero) bias."""
    cfg = preset(spec) if isinstance(spec, str) else spec
    net = nw.CodaNet.from_config(cfg, rng, dtype)
    for layer in net.layers:
        layer.b = rng.normal(layer.b.shape, 0.0, bias_std, dtype=dtype)
    return net


def _images(rng: Rng, n: int, size: int) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(n, 3, size, size))


# -------------------------------------------------------------- linearity


LINEARITY_CASES = (("tiny1", (8,)), ("tiny3", (16, 8)), ("s-coda", (32, 16, 8)))


def linearity_errors(draws: int, dtype, seed: int = 0, cases=LINEARITY_CASES, perturb=None):
    """Worst ``|forward - T^-1 W x|`` per preset over ``draws`` (params, input) draws."""
    rng = Rng(seed)
    out = {}
    for name, sizes in cases:
        worst = 0.0
        for d in range(draws):
            net = random_net(name, rng, dtype)
            img = _images(rng, 1, sizes[d % len(sizes)])[0]
            logits = nw.forward(net, img)
            W = nw.collapse_full(net, img, perturb=perturb)
            x = nw.encode_input(img).astype(dtype).ravel()
            worst = max(worst, float(np.abs(logits - W @ x / dtype(net.temperature)).max()))
        out[name] = worst
    return out


def completeness_errors(draws: int, dtype, seed: int = 1, cases=LINEARITY_CASES):
    """Worst ``|sum(contributions_j) - logit_j|`` over all classes."""
    rng = Rng(seed)
    out = {}
    for name, sizes in cases:
        worst = 0.0
        for d in range(draws):
            net = random_net(name, rng, dtype)
            img = _images(rng, 1, sizes[d % len(sizes)])[0]
            x, _ = nw.prepare(net, img)
            xs = np.repeat(x, net.num_classes, axis=0)
            maps = nw.contributions_batch(net, xs, np.arange(net.num_classes), encoded=True)
            logits = nw.forward(net, img)
            sums = maps.reshape(net.num_classes, -1).sum(axis=1, dtype=np.float64)
            worst = max(worst, float(np.abs(sums - logits).max()))
        out[name] = worst
    return out


def suite_linearity(draws: int = 20, seed: int = 0) -> SuiteResult:
    t0 = time.time()
    perturb = _perturb if _fault() == "collapse-row" else None
    e64 = linearity_errors(draws, np.float64, seed, perturb=perturb)
    e32 = linearity_errors(draws, np.float32, seed + 1, perturb=perturb)
    worst64, worst32 = max(e64.values()), max(e32.values())
    ok = worst64 < 1e-8 and worst32 < 1e-3
    return SuiteResult("linearity", ok, worst64, 1e-8, time.time() - t0, {"worst32": worst32})


# ----------------------------------------------------------------- bounds


def dau_bound_violations(count: int, seed: int = 0, nonlinearities=("l2", "sq")):
    """Largest ``(|DAU(x)| - |x|) / |x|`` and weight-norm excess over random draws.

    Returns a dict with the worst output-bound ratio excess, the worst
    ``|w| - 1`` excess, and the worst ``| |w| - 1 |`` for L2 when the
    pre-activation norm is at least 1e-6.
    """
    rng = Rng(seed)
    worst_out = worst_w = worst_unit = -np.inf
    per = count // len(nonlinearities)
    for g in nonlinearities:
        for _ in range(per):
            d = int(rng.integers(2, 17))
            r = int(rng.integers(1, d + 1))
            scale = 10.0 ** rng.uniform(-3, 2)
            x = rng.normal(d, 0, 1) * 10.0 ** rng.uniform(-2, 2)
            A = rng.normal((d, r), 0, scale)
            B = rng.normal((r, d), 0, scale)
            b = rng.normal(d, 0, scale) * rng.integers(0, 2)
            out, w = dau_forward(x, A, B, b, g)
            nx = np.linalg.norm(x)
            worst_out = max(worst_out, (abs(out) - nx) / nx)
            nw_ = np.linalg.norm(w)
            worst_w = max(worst_w, nw_ - 1)
            if g == "l2" and np.linalg.norm(A @ (B @ x) + b) >= 1e-6:
                worst_unit = max(worst_unit, abs(nw_ - 1))
    return {"output": max(worst_out, 0.0), "weight": max(worst_w, 0.0), "unit": max(worst_unit, 0.0)}


def network_bound_violation(draws: int = 5, seed: int = 3) -> float:
    """Every DAU output at every location of every layer vs. its patch norm."""
    rng = Rng(seed)
    worst = 0.0
    for _ in range(draws):
        net = random_net("tiny3", rng, np.float64)
        x, _ = nw.prepare(net, _images(rng, 2, 12))
        tr = nw.trace(net, x)
        for t in tr.layers:
            n, f = t.output.shape[:2]
            outs = t.output.value.reshape(n, f, -1)  # N, f, L
            norms = np.linalg.norm(t.patches.value, axis=-1)  # N, L
            excess = (np.abs(outs) - norms[:, None, :]) / np.maximum(norms[:, None, :], 1e-300)
            worst = max(worst, float(excess.max()))
    return max(worst, 0.0)


def suite_bounds(count: int = 10_000, seed: int = 0) -> SuiteResult:
    t0 = time.time()
    v = dau_bound_violations(count, seed)
    v["network"] = network_bound_violation()
    worst = max(v.values())
    return SuiteResult("bounds", worst < 1e-6, worst, 1e-6, time.time() - t0, v)


# -------------------------------------------------------------- gradients


def numeric_gradient(fn: Callable[[list[np.ndarray]], float], inputs: list[np.ndarray], h: float = 1e-5):
    grads = []
    for i, arr in enumerate(inputs):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = fn(inputs)
            flat[k] = old - h
            down = fn(inputs)
            flat[k] = old
            gf[k] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(build: Callable[[list[ad.Node]], ad.Node], inputs: list[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between autodiff and central differences."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [ad.parameter(x) for x in inputs]
    root = build(leaves)
    got = ad.backward(root)
    analytic = [got.get(leaf, np.zeros_like(leaf.value)) for leaf in leaves]

    def fn(vals):
        return float(build([ad.constant(v) for v in vals]).value)

    numeric = numeric_gradient(fn, inputs, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _projected(f, rng: Rng):
    """``f`` followed by a fixed random linear functional, so the check covers
    the full VJP. The functional is drawn once, on first use."""
    wts = []

    def build(xs):
        node = f(xs)
        if not wts:
            wts.append(rng.normal(node.shape, 0, 1))
        return ad.sum(ad.elementwise_mul(node, wts[0]))

    return build


def op_cases(rng: Rng):
    """``(name, build, inputs)`` triples covering every differentiable op."""
    n = lambda *s: rng.normal(s, 0, 1)  # noqa: E731
    away = lambda *s: np.sign(n(*s)) * rng.uniform(0.1, 2.0, size=s)  # noqa: E731
    P = lambda f: _projected(f, rng)  # noqa: E731
    c, h, w = 2, 5, 4
    targets = (rng.uniform(size=(3, 4)) > 0.5) * 1.0
    cases = [
        ("add", P(lambda xs: ad.add(xs[0], xs[1])), [n(3, 4), n(4)]),
        ("sub", P(lambda xs: ad.sub(xs[0], xs[1])), [n(3, 4), n(3, 1)]),
        ("elementwise_mul", P(lambda xs: ad.elementwise_mul(xs[0], xs[1])), [n(3, 4), n(3, 4)]),
        ("matmul", P(lambda xs: ad.matmul(xs[0], xs[1])), [n(2, 3, 4), n(4, 5)]),
        ("sum", P(lambda xs: ad.sum(xs[0], axis=1)), [n(3, 4, 2)]),
        ("mean", P(lambda xs: ad.mean(xs[0], axis=0)), [n(3, 4)]),
        ("sigmoid", P(lambda xs: ad.sigmoid(xs[0])), [n(4, 3) * 3]),
        ("bce_with_logits", lambda xs: ad.sum(ad.bce_with_logits(xs[0], targets)), [n(3, 4) * 3]),
        ("scale", P(lambda xs: ad.scale(xs[0], -1.7)), [n(5)]),
        ("abs_mean", lambda xs: ad.abs_mean(xs[0]), [away(4, 5)]),
        ("l2_rescale", P(lambda xs: ad.l2_rescale(xs[0], axis=-1)), [n(3, 6)]),
        ("sq_rescale", P(lambda xs: ad.sq_rescale(xs[0], axis=-1)), [n(3, 6) * rng.uniform(0.1, 3)]),
        ("reshape", P(lambda xs: ad.reshape(xs[0], (6, 2))), [n(3, 4)]),
        ("transpose", P(lambda xs: ad.transpose(xs[0], (2, 0, 1))), [n(2, 3, 4)]),
        ("einsum", P(lambda xs: ad.einsum("nij,njk->nik", xs[0], xs[1])), [n(2, 3, 4), n(2, 4, 2)]),
        ("batched_matvec", P(lambda xs: ad.batched_matvec(xs[0], xs[1])), [n(2, 3, 4, 5), n(2, 3, 5)]),
        ("unfold", P(lambda xs: ad.unfold(xs[0], 3, 2, 1)), [n(1, c, h, w)]),
        ("fold", P(lambda xs: ad.fold(xs[0], c, (h, w), 3, 2, 1)), [n(1, c * 9, 6)]),
    ]
    return cases


def _dau_case(rng: Rng, g: str):
    d, r = 6, 2
    inputs = [rng.normal(d, 0, 1), rng.normal((d, r), 0, 1), rng.normal((r, d), 0, 1), rng.normal(d, 0, 0.5)]

    def build(xs):
        out, _ = dau_forward(xs[0], xs[1], xs[2], xs[3], g)
        return out

    return build, inputs


def op_gradient_errors(seeds: int = 20, seed: int = 0) -> dict[str, float]:
    worst: dict[str, float] = {}
    for s in range(seeds):
        rng = Rng(seed * 1000 + s)
        cases = op_cases(rng) + [(f"dau_{g}", *_dau_case(rng, g)) for g in ("l2", "sq")]
        for name, build, inputs in cases:
            worst[name] = max(worst.get(name, 0.0), gradcheck(build, inputs))
    return worst


def small_loss_setup(seed: int = 0, lam: float = 0.05):
    """2-layer net on a 6x6 image with lambda > 0 and fixed regulariser classes."""
    rng = Rng(seed)
    cfg = ConfigFile(
        {"num_classes": "3", "temperature": "2.0", "lambda": str(lam), "nonlinearity": "sq"},
        [LayerSpec(4, 2, 3, 1), LayerSpec(3, 2, 3, 2)],
    )
    net = random_net(cfg, rng, np.float64, bias_std=0.3)
    img = rng.uniform(size=(2, 3, 6, 6))
    y = np.eye(3)[[0, 2]]
    reg_classes = np.array([[0, 1], [2, 0]])
    return net, img, y, reg_classes


def loss_gradient_error(seed: int = 0, lam: float = 0.05) -> float:
    net, img, y, reg_classes = small_loss_setup(seed, lam)
    names = list(net.params())

    def build(xs):
        params = dict(zip(names, xs))
        return nw.loss(net, img, y, params=params, reg_classes=reg_classes).total

    return gradcheck(build, [net.params()[k] for k in names])


def suite_gradients(seeds: int = 20) -> SuiteResult:
    t0 = time.time()
    ops = op_gradient_errors(seeds)
    worst_op = max(ops.values())
    e2e = max(loss_gradient_error(s) for s in range(2))
    ok = worst_op < 1e-4 and e2e < 1e-3
    return SuiteResult("gradients", ok, worst_op, 1e-4, time.time() - t0, {"end_to_end": e2e})


# --------------------------------------------------------------- collapse


def dense_chain(net: nw.CodaNet, img: np.ndarray) -> np.ndarray:
    """``Pool @ W_L ... W_1`` from materialised per-layer matrices."""
    x, _ = nw.prepare(net, img)
    a = x[0]
    mats = []
    for layer in net.layers:
        m = layer_matrix(layer, a)
        mats.append(m.dense())
        a = m.matvec(a)
    f, oh, ow = a.shape
    out = sum_pool_matrix(f, oh, ow, a.dtype)
    for m in reversed(mats):
        out = out @ m
    return out


COLLAPSE_CASES = (("tiny1", 6), ("tiny3", 8))


def suite_collapse(draws: int = 5, seed: int = 0) -> SuiteResult:
    t0 = time.time()
    rng = Rng(seed)
    perturb = _perturb if _fault() == "collapse-row" else None
    worst = {"dense": 0.0, "forward": 0.0, "intermediate": 0.0, "rows": 0.0}
    for name, size in COLLAPSE_CASES:
        for _ in range(draws):
            net = random_net(name, rng, np.float64)
            img = _images(rng, 1, size)[0]
            W = nw.collapse_full(net, img, perturb=perturb)
            worst["dense"] = max(worst["dense"], float(np.abs(W - dense_chain(net, img)).max()))
            x = nw.encode_input(img).ravel()
            logits = nw.forward(net, img)
            worst["forward"] = max(worst["forward"], float(np.abs(W @ x / net.temperature - logits).max()))
            _, acts = nw.layer_maps(net, img)
            L = len(net.layers)
            for a in range(L):
                for b in range(a + 1, L + 1):
                    M = nw.collapse_between(net, img, a, b)
                    err = np.abs(M @ acts[a].ravel() - acts[b].ravel()).max()
                    worst["intermediate"] = max(worst["intermediate"], float(err))
            j = int(rng.integers(0, net.num_classes))
            row = nw.collapse_rows(net, img, [j]).value[0]
            worst["rows"] = max(worst["rows"], float(np.abs(row - nw.collapse_full(net, img)[j]).max()))
    top = max(worst.values())
    return SuiteResult("collapse", top < 1e-10, top, 1e-10, time.time() - t0, worst)


SUITES = {
    "linearity": suite_linearity,
    "bounds": suite_bounds,
    "gradients": suite_gradients,
    "collapse": suite_collapse,
}


def run(names=("linearity", "bounds", "gradients", "collapse")) -> list[SuiteResult]:
    return [SUITES[n]() for n in names]
