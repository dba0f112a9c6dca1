"""Small-image datasets: IDX (MNIST) and CIFAR-10 binary loaders, the noisy
digit set used for the eigenvector experiment, and pointing-game grids."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Rng

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("pixel values must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise DataFormatError("labels must be non-negative")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names) if self.class_names else int(self.labels.max(initial=-1)) + 1

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx], list(self.class_names))


# ------------------------------------------------------------------------ IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from None
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expect_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expect_magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header != count:
        raise DataFormatError(
            f"{path}: payload has {len(raw) - header} bytes, header promises {count}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (labels: 1-d, images: 3-d)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx(images_path, labels_path) -> LabeledImageSet:
    """MNIST-style image/label IDX pair; pixels are scaled by 1/255."""
    imgs = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if len(imgs) != len(labels):
        raise DataFormatError(f"{len(imgs)} images but {len(labels)} labels")
    images = (imgs.astype(np.float32) / 255.0)[:, None, :, :]
    return LabeledImageSet(images, labels.astype(np.int64), [str(i) for i in range(10)])


def load_mnist(root, split: str = "train") -> LabeledImageSet:
    root = Path(root)
    prefix = "train" if split == "train" else "t10k"
    for suffix in ("", ".gz"):
        img = root / f"{prefix}-images-idx3-ubyte{suffix}"
        lab = root / f"{prefix}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            return load_idx(img, lab)
    raise DataFormatError(f"no MNIST {split} files in {root}")


# ---------------------------------------------------------------------- CIFAR


CIFAR10_CLASSES = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]


def load_cifar10_bin(path) -> LabeledImageSet:
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{path}: record {bad} has label {labels[bad]}, valid range 0-9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return LabeledImageSet(images, labels, list(CIFAR10_CLASSES))


def write_cifar10_bin(path, images_u8: np.ndarray, labels) -> None:
    imgs = np.asarray(images_u8, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labs = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    Path(path).write_bytes(np.concatenate([labs, imgs], axis=1).tobytes())


# -------------------------------------------------------------- noisy digits


def make_noisy_digits(bases: np.ndarray, n: int = 3072, noise_std: float = 0.25, rng: Rng | None = None) -> LabeledImageSet:
    """``n`` samples cycling over the base images: ``clip(base + N(0, std), 0, 1)``."""
    bases = np.asarray(bases, dtype=np.float32)
    if bases.ndim == 3:
        bases = bases[:, None]
    k = len(bases)
    if k == 0 or n % k:
        raise ValueError(f"n={n} must be a positive multiple of the {k} bases")
    rng = rng or Rng(0)
    labels = np.tile(np.arange(k), n // k)
    noise = rng.normal((n, *bases.shape[1:]), 0.0, noise_std, dtype=np.float32)
    images = np.clip(bases[labels] + noise, 0.0, 1.0)
    return LabeledImageSet(images, labels, [str(i) for i in range(k)])


def pick_digit_bases(mnist: LabeledImageSet, digits=(0, 1, 3)) -> np.ndarray:
    """First training image of each requested digit."""
    out = []
    for d in digits:
        hits = np.flatnonzero(mnist.labels == d)
        if not hits.size:
            raise ValueError(f"digit {d} not present")
        out.append(mnist.images[hits[0]])
    return np.stack(out)


# ---------------------------------------------------------------------- grids


class PoolExhaustedError(RuntimeError):
    def __init__(self, built: int, wanted: int):
        super().__init__(f"ran out of unused images after building {built} of {wanted} grids")
        self.built = built


@dataclass
class GridSample:
    image: np.ndarray  # (C, n*H, n*W)
    n: int
    cell_classes: list[int]  # row-major cells
    cell_sources: list[int]  # dataset index per cell

    @property
    def cell_size(self) -> tuple[int, int]:
        return self.image.shape[1] // self.n, self.image.shape[2] // self.n

    def cell_of(self, cls: int) -> int:
        try:
            return self.cell_classes.index(cls)
        except ValueError:
            raise KeyError(f"class {cls} is not in this grid") from None

    def cell_slice(self, cell: int) -> tuple[slice, slice]:
        h, w = self.cell_size
        r, c = divmod(cell, self.n)
        return slice(r * h, (r + 1) * h), slice(c * w, (c + 1) * w)


def compose_grid(images: list[np.ndarray], n: int) -> np.ndarray:
    rows = [np.concatenate(images[r * n:(r + 1) * n], axis=2) for r in range(n)]
    return np.concatenate(rows, axis=1)


def make_grids(data: LabeledImageSet, scores, n: int = 3, count: int = 500, rng: Rng | None = None) -> list[GridSample]:
    """Grids of ``n*n`` images with distinct classes.

    For each grid a random set of classes (among those with unused images)
    is drawn; every cell takes the most confidently scored unused image of
    its class. Images are never reused across grids.
    """
    rng = rng or Rng(0)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(data),):
        raise ValueError(f"need one score per image, got {scores.shape}")
    queues: dict[int, list[int]] = {}
    for cls in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == cls)
        order = idx[np.argsort(-scores[idx], kind="stable")]
        queues[int(cls)] = list(order)
    grids = []
    cells = n * n
    for built in range(count):
        live = sorted(c for c, q in queues.items() if q)
        if len(live) < cells:
            raise PoolExhaustedError(built, count)
        chosen = [int(c) for c in rng.choice(live, size=cells, replace=False)]
        sources = [queues[c].pop(0) for c in chosen]
        image = compose_grid([data.images[i] for i in sources], n)
        grids.append(GridSample(image, n, chosen, [int(s) for s in sources]))
    return grids
