"""Experiment drivers shared by the CLI and the acceptance tests.

Each driver takes a net and a dataset, runs one interpretability metric end
to end and returns plain numbers, so callers can print or assert on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets as D
from . import interpret as I
from . import network as nw
from .tensor import Rng


def open_dataset(spec: str, split: str = "train") -> D.LabeledImageSet:
    """Resolve a ``--data`` argument.

    Accepted forms: an MNIST directory (or ``mnist:DIR``), a CIFAR-10 binary
    batch (``*.bin`` or ``cifar:FILE``), and ``noisy-digits:DIR`` which builds
    the three-class noisy digit set from the MNIST files in ``DIR``.
    """
    kind, _, rest = spec.partition(":")
    if not rest or len(kind) == 1:  # no prefix, or a Windows drive letter
        kind, rest = "", spec
    if kind == "noisy-digits":
        bases = D.pick_digit_bases(D.load_mnist(rest, "train"))
        n, seed = (3072, 0) if split == "train" else (768, 1)
        return D.make_noisy_digits(bases, n, 0.25, Rng(seed))
    if kind == "cifar" or (not kind and rest.endswith(".bin")):
        return D.load_cifar10_bin(rest)
    if kind in ("", "mnist"):
        if not Path(rest).is_dir():
            raise D.DataFormatError(f"{rest}: expected an MNIST directory or a CIFAR .bin file")
        return D.load_mnist(rest, split)
    raise D.DataFormatError(f"unknown dataset kind {kind!r}")


def true_class_logits(net: nw.CodaNet, data: D.LabeledImageSet, batch_size: int = 128) -> np.ndarray:
    logits = nw.forward_batched(net, data.images, batch_size)
    return logits[np.arange(len(data)), data.labels]


# ----------------------------------------------------------- pointing game


@dataclass
class PointingResult:
    grids: int
    scores: dict[str, np.ndarray] = field(default_factory=dict)

    def means(self) -> dict[str, float]:
        return {m: float(s.mean()) for m, s in self.scores.items()}


def run_pointing_game(
    net: nw.CodaNet,
    data: D.LabeledImageSet,
    methods=("coda", "grad"),
    count: int = 200,
    n: int = 3,
    seed: int = 0,
) -> PointingResult:
    """Mean pointing score per method over ``count`` n-by-n grids.

    Cells are filled with the most confidently classified images (by
    true-class logit), as in the usual pointing-game setup.
    """
    grids = D.make_grids(data, true_class_logits(net, data), n, count, Rng(seed))
    out = PointingResult(len(grids))
    for m in methods:
        out.scores[str(m)] = I.pointing_game(net, grids, m)
    return out


# ----------------------------------------------------------- pixel removal


@dataclass
class RemovalResult:
    areas: dict[str, np.ndarray]  # order -> per-image curve area
    curves: dict[str, np.ndarray]  # order -> (images, points)
    fractions: np.ndarray

    def least_beats_random(self) -> float:
        """Fraction of images whose least-first area is at least the random-order area."""
        return float(np.mean(self.areas["least"] >= self.areas["random"]))


def run_pixel_removal(
    net: nw.CodaNet,
    data: D.LabeledImageSet,
    count: int = 100,
    method="coda",
    orders=("least", "random"),
    steps: int = 10,
    seed: int = 0,
) -> RemovalResult:
    """Removal curves for the first ``count`` images, ranked by ``method`` for the true class."""
    rng = Rng(seed)
    count = min(count, len(data))
    areas = {o: np.zeros(count) for o in orders}
    curves = {o: np.zeros((count, steps + 1)) for o in orders}
    fractions = None
    for i in range(count):
        img, j = data.images[i], int(data.labels[i])
        ranking = I.attribute(method, net, img, j)
        for o in orders:
            c = I.pixel_removal_curve(net, img, j, ranking, o, steps, rng=rng)
            areas[o][i] = c.area()
            curves[o][i] = c.values
            fractions = c.fractions
    return RemovalResult(areas, curves, fractions)


# ------------------------------------------------------------ sanity check


@dataclass
class SanityResult:
    distances: np.ndarray  # (probes, layers) distance of each cascade step from the original
    steps: np.ndarray  # (probes, layers) distance between consecutive cascade maps
    scale: np.ndarray  # (probes, layers) |previous map| / |original map|, to put steps on one scale

    def cumulative(self) -> np.ndarray:
        """Running sum of the per-step distances, relative to the original map."""
        return np.cumsum(self.steps * self.scale, axis=1)

    def perturbed(self, min_final: float = 0.1) -> np.ndarray:
        """Per probe: every re-initialisation changes the map, so the
        cumulative distance strictly increases, and the fully randomised map
        is at least ``min_final`` away from the original."""
        increasing = np.all(np.diff(self.cumulative(), axis=1, prepend=0.0) > 0, axis=1)
        return increasing & (self.distances[:, -1] >= min_final)


def run_sanity_check(net: nw.CodaNet, data: D.LabeledImageSet, count: int = 50, seed: int = 0) -> SanityResult:
    rng = Rng(seed)
    count = min(count, len(data))
    L = len(net.layers)
    dist = np.zeros((count, L))
    steps = np.zeros((count, L))
    scale = np.ones((count, L))
    for i in range(count):
        maps = [m for _, m in I.sanity_randomization(net, data.images[i], int(data.labels[i]), rng)]
        for k in range(1, L + 1):
            dist[i, k - 1] = I.normalized_distance(maps[0], maps[k])
            steps[i, k - 1] = I.normalized_distance(maps[k - 1], maps[k])
            ref = np.linalg.norm(maps[0])
            scale[i, k - 1] = np.linalg.norm(maps[k - 1]) / ref if ref > 0 else 1.0
    return SanityResult(dist, steps, scale)


# -------------------------------------------------------- eigenvector demo


@dataclass
class EigenDemoResult:
    eigenvalues: list[float]
    eigenvectors: list[np.ndarray]
    cosines: np.ndarray  # one per clean digit
    bases: np.ndarray
    mean_output: list[float]


def run_eigen_demo(
    mnist: D.LabeledImageSet,
    digits=(0, 1, 3),
    n: int = 3072,
    noise_std: float = 0.25,
    rank: int = 3,
    steps: int = 2000,
    lr: float = 3e-3,
    nonlinearity: str = "l2",
    seed: int = 0,
) -> EigenDemoResult:
    """Output-maximise a bias-free DAU on noisy digits and compare its
    eigenvectors with the clean digits."""
    bases = D.pick_digit_bases(mnist, digits)
    rng = Rng(seed)
    data = D.make_noisy_digits(bases, n, noise_std, rng.spawn())
    res = I.maximise_dau_output(data.images, rank, steps, lr, nonlinearity, rng.spawn())
    pairs = I.dau_eigenvectors(res.A, res.B)
    vecs = [v for _, v in pairs]
    return EigenDemoResult([float(l) for l, _ in pairs], vecs, I.subspace_cosines(vecs, bases), bases, res.mean_output)
