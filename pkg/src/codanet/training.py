"""Adam, the step learning-rate schedule, the training loop and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"CODA" | u32 version | u32 config_len | config text (utf-8)
    u32 tensor_count
    per tensor: u32 name_len | name | u8 dtype ('f' f32, 'd' f64)
                | u32 rank | u32 dims[rank] | raw little-endian data
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import network as nw
from .config import ConfigError, ConfigFile, parse_config
from .tensor import DimensionError, Rng

log = logging.getLogger(__name__)

MAGIC = b"CODA"
VERSION = 1

TRAIN_KEYS = {
    "epochs", "batch_size", "lr", "lr_decay_factor", "lr_decay_every", "seed",
    "precision", "warmup_epochs", "warmup_lr", "reg_classes",
}


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 16
    base_lr: float = 2.5e-4
    lr_decay_factor: float = 2.0
    lr_decay_every: int = 60
    seed: int = 0
    precision: int = 32
    warmup_epochs: int = 0
    warmup_lr: float | None = None
    reg_all_classes: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ConfigError("epochs, batch_size and lr_decay_every must be positive")
        if self.lr_decay_factor <= 1:
            raise ConfigError(f"lr_decay_factor must exceed 1, got {self.lr_decay_factor}")
        if self.base_lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.base_lr}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @classmethod
    def from_config(cls, cfg: ConfigFile, **overrides) -> "TrainConfig":
        reg = cfg.get("reg_classes", "pair")
        if reg not in ("pair", "all"):
            raise ConfigError(f"reg_classes must be 'pair' or 'all', got {reg!r}")
        kwargs = dict(
            epochs=cfg.get("epochs", 1, int),
            batch_size=cfg.get("batch_size", 16, int),
            base_lr=cfg.get("lr", 2.5e-4, float),
            lr_decay_factor=cfg.get("lr_decay_factor", 2.0, float),
            lr_decay_every=cfg.get("lr_decay_every", 60, int),
            seed=cfg.get("seed", 0, int),
            precision=cfg.get("precision", 32, int),
            warmup_epochs=cfg.get("warmup_epochs", 0, int),
            warmup_lr=cfg.get("warmup_lr", None, float),
            reg_all_classes=reg == "all",
        )
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 0-based epoch: halve every ``lr_decay_every`` epochs.

    With warm-up enabled the rate ramps linearly from ``base_lr`` to
    ``warmup_lr`` over the warm-up epochs and decays from ``warmup_lr`` after.
    """
    if cfg.warmup_epochs and cfg.warmup_lr is not None:
        if epoch < cfg.warmup_epochs:
            return cfg.base_lr + (cfg.warmup_lr - cfg.base_lr) * epoch / cfg.warmup_epochs
        return cfg.warmup_lr / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)
    return cfg.base_lr / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


# ----------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], lr: float = 2.5e-4) -> "AdamState":
        return cls(
            lr=lr,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Arrays in ``params`` are updated in place."""
    for key, g in grads.items():
        if key not in params:
            raise KeyError(f"gradient for unknown parameter {key!r}")
        if g.shape != params[key].shape:
            raise DimensionError(f"{key}: gradient {g.shape} vs parameter {params[key].shape}")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        m = state.m.setdefault(key, np.zeros_like(p))
        v = state.v.setdefault(key, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        step = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p -= step.astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------- train


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    acc: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.lr:.6g}\t{self.loss:.8f}\t{self.acc:.6f}"


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)

    def text(self) -> str:
        return "epoch\tlr\tloss\tacc\n" + "".join(r.line() + "\n" for r in self.records)


def _batch_grads(net, xb, yb, cfg: TrainConfig, rng: Rng):
    leaves = {k: ad.parameter(v, name=k) for k, v in net.params().items()}
    res = nw.loss(net, xb, yb, params=leaves, rng=rng, all_classes=cfg.reg_all_classes, encoded=True)
    got = ad.backward(res.total)
    grads = {k: got.get(node, np.zeros_like(node.value)) for k, node in leaves.items()}
    return res, grads


def train(
    net: nw.CodaNet,
    dataset,
    cfg: TrainConfig,
    state: AdamState | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    on_batch: Callable[[int, float], None] | None = None,
) -> tuple[TrainLog, AdamState]:
    """Optimise the batch-mean loss with Adam. Deterministic given ``cfg.seed``.

    ``net`` is updated in place. If its dtype differs from ``cfg.precision``
    its layers are cast first.
    """
    images = np.asarray(dataset.images)
    labels = np.asarray(dataset.labels)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if labels.max(initial=0) >= net.num_classes:
        raise ValueError(f"labels exceed the network's {net.num_classes} classes")
    if net.dtype != cfg.dtype:
        net.layers = net.astype(cfg.dtype).layers
    rng = Rng(cfg.seed)
    params = net.params()
    if state is None:
        state = AdamState.for_params(params, cfg.base_lr)
    eye = np.eye(net.num_classes, dtype=cfg.dtype)
    out = TrainLog()
    n = len(images)
    for epoch in range(cfg.epochs):
        state.lr = lr_at(cfg, epoch)
        order = rng.permutation(n)
        total, correct, seen = 0.0, 0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb = nw.encode_input(images[idx].astype(cfg.dtype, copy=False), net.encode_negative)
            yb = eye[labels[idx]]
            res, grads = _batch_grads(net, xb, yb, cfg, rng)
            value = float(res.total.value)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch} batch {b}")
            adam_step(params, grads, state)
            total += value * len(idx)
            correct += int((res.logits.argmax(axis=1) == labels[idx]).sum())
            seen += len(idx)
            out.batch_losses.append(value)
            if on_batch is not None:
                on_batch(b, value)
        rec = EpochRecord(epoch, state.lr, total / seen, correct / seen)
        out.records.append(rec)
        log.info("epoch %d lr %.3g loss %.5f acc %.4f", epoch, rec.lr, rec.loss, rec.acc)
        if on_epoch is not None:
            on_epoch(rec)
    return out, state


def evaluate(net: nw.CodaNet, dataset, batch_size: int = 128) -> float:
    logits = nw.forward_batched(net, dataset.images, batch_size)
    if len(logits) == 0:
        return float("nan")
    return float((logits.argmax(axis=1) == np.asarray(dataset.labels)).mean())


# ----------------------------------------------------------------- checkpoints


_DTYPES = {b"f": np.dtype("<f4"), b"d": np.dtype("<f8")}


def _state_config(net: nw.CodaNet, state: AdamState | None) -> str:
    cfg = net.to_config()
    if state is not None:
        cfg.values["adam.lr"] = repr(float(state.lr))
        cfg.values["adam.beta1"] = repr(float(state.beta1))
        cfg.values["adam.beta2"] = repr(float(state.beta2))
        cfg.values["adam.eps"] = repr(float(state.eps))
        cfg.values["adam.step"] = str(int(state.step))
    return cfg.to_text()


def checkpoint_bytes(net: nw.CodaNet, state: AdamState | None = None) -> bytes:
    text = _state_config(net, state).encode("utf-8")
    tensors = dict(net.params())
    if np.ndim(net.b0) > 0:
        tensors["b0"] = np.asarray(net.b0, dtype=net.dtype)
    if state is not None:
        tensors.update({f"adam.m.{k}": v for k, v in state.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in state.v.items()})
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = b"d" if arr.dtype == np.float64 else b"f"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key + code)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def save_checkpoint(net: nw.CodaNet, state: AdamState | None, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net, state))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def parse_checkpoint(buf: bytes):
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic, not a CODA checkpoint", 0)
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}", 4)
    n_text = r.u32("config length")
    at = r.pos
    try:
        text = r.take(n_text, "config block").decode("utf-8")
        cfg = parse_config(text)
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointFormatError(f"corrupt config block: {exc}", at) from None
    tensors: dict[str, np.ndarray] = {}
    count = r.u32("tensor count")
    for _ in range(count):
        at = r.pos
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8", errors="replace")
        code = r.take(1, "dtype code")
        if code not in _DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code!r} for {name}", r.pos - 1)
        rank = r.u32("rank")
        if rank > 8:
            raise CheckpointFormatError(f"implausible rank {rank} for {name}", r.pos - 4)
        dims = [r.u32("dimension") for _ in range(rank)]
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        raw = r.take(nbytes, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after last tensor", r.pos)
    return cfg, tensors


def load_checkpoint(path) -> tuple[nw.CodaNet, AdamState | None]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read {path}: {exc}", 0) from None
    cfg, tensors = parse_checkpoint(buf)
    net_cfg = ConfigFile({k: v for k, v in cfg.values.items() if not k.startswith("adam.")}, cfg.layers)
    net = nw.CodaNet.from_config(net_cfg)
    params = {k: v for k, v in tensors.items() if k.startswith("layer")}
    expected = {f"layer{i}.{k}": s for i, layer in enumerate(net.layers) for k, s in layer.param_shapes().items()}
    if set(params) != set(expected):
        raise CheckpointFormatError(f"parameter set mismatch: {sorted(set(params) ^ set(expected))}", 0)
    for i, layer in enumerate(net.layers):
        for k, shape in layer.param_shapes().items():
            arr = params[f"layer{i}.{k}"]
            if arr.shape != shape:
                raise CheckpointFormatError(f"layer{i}.{k} has shape {arr.shape}, expected {shape}", 0)
            setattr(layer, k, arr)
    if "b0" in tensors:
        net.b0 = tensors["b0"]
    state = None
    if "adam.step" in cfg.values:
        state = AdamState(
            lr=float(cfg.values["adam.lr"]),
            beta1=float(cfg.values["adam.beta1"]),
            beta2=float(cfg.values["adam.beta2"]),
            eps=float(cfg.values["adam.eps"]),
            step=int(cfg.values["adam.step"]),
            m={k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")},
            v={k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")},
        )
    return net, state
