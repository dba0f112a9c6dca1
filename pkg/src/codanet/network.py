"""Network assembly: input encoding, forward pass, linear-map collapse,
contribution maps and the training objective.

The network output is ``T^-1 * W(x) x`` where ``W(x)`` is the product of the
per-layer dynamic matrices and a global sum pool; there is no additive term.
The fixed bias ``b0`` only enters inside the sigmoid of the loss.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import ConfigError, ConfigFile, LayerSpec
from .layers import ConvTrace, DauConvLayer, LayerLinearMap, Nonlinearity, conv_trace
from .tensor import DimensionError, Rng


class InputError(ValueError):
    """Image values or labels outside their valid range."""


# ------------------------------------------------------------------ encoding


def encode_input(image: np.ndarray, encode_negative: bool = True) -> np.ndarray:
    """``[r, g, b] -> [r, g, b, 1-r, 1-g, 1-b]`` per pixel.

    Takes ``(C, H, W)`` or ``(N, C, H, W)`` with C in {1, 3} and values in
    [0, 1]; grayscale is replicated to three channels first.
    """
    x = np.asarray(image)
    if x.ndim not in (3, 4):
        raise DimensionError(f"expected (C, H, W) or (N, C, H, W), got {x.shape}")
    if x.dtype.kind != "f":
        x = x.astype(np.float32)
    if x.size and (np.isnan(x).any() or x.min() < 0 or x.max() > 1):
        raise InputError("image values must lie in [0, 1]")
    ch_axis = x.ndim - 3
    c = x.shape[ch_axis]
    if c == 1:
        x = np.repeat(x, 3, axis=ch_axis)
    elif c != 3:
        raise DimensionError(f"expected 1 or 3 colour channels, got {c}")
    if not encode_negative:
        return np.ascontiguousarray(x)
    return np.concatenate([x, 1 - x], axis=ch_axis)


# ------------------------------------------------------------------- network


@dataclass
class CodaNet:
    layers: list[DauConvLayer]
    num_classes: int
    temperature: float = 1.0
    b0: float | np.ndarray | None = None
    lam: float = 0.0
    encode_negative: bool = True
    name: str = "custom"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.b0 is None:
            self.b0 = default_b0(self.num_classes)
        want = 6 if self.encode_negative else 3
        if self.layers[0].in_channels != want:
            raise ConfigError(f"first layer takes {self.layers[0].in_channels} channels, expected {want}")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_channels != b.in_channels:
                raise ConfigError(
                    f"layer {i} emits {a.out_channels} channels but layer {i + 1} expects {b.in_channels}"
                )
        if self.layers[-1].out_channels != self.num_classes:
            raise ConfigError(
                f"last layer has {self.layers[-1].out_channels} units, expected {self.num_classes} classes"
            )

    # construction ---------------------------------------------------------

    @classmethod
    def from_config(cls, cfg: ConfigFile, rng: Rng | None = None, dtype=np.float32) -> "CodaNet":
        if not cfg.layers:
            raise ConfigError("config has no layer lines")
        encode = cfg.get("encode_negative", True, bool)
        nonlin = Nonlinearity.parse(cfg.get("nonlinearity", "sq"))
        in_ch = 6 if encode else 3
        layers = []
        for spec in cfg.layers:
            layers.append(
                DauConvLayer(in_ch, spec.units, spec.rank, spec.kernel, spec.stride, spec.padding, nonlin)
            )
            in_ch = spec.units
        b0 = cfg.get("b0", "auto")
        net = cls(
            layers=layers,
            num_classes=cfg.get("num_classes", layers[-1].out_channels, int),
            temperature=cfg.get("temperature", 1.0, float),
            b0=None if b0 == "auto" else float(b0),
            lam=cfg.get("lambda", 0.0, float),
            encode_negative=encode,
            name=cfg.get("name", "custom"),
        )
        if cfg.get("image_size") is not None:
            net.extra["image_size"] = cfg.get("image_size", cast=int)
        if rng is not None:
            net.init_params(rng, dtype)
        return net

    def to_config(self) -> ConfigFile:
        cfg = ConfigFile()
        cfg.values["name"] = self.name
        cfg.values["num_classes"] = str(self.num_classes)
        cfg.values["temperature"] = repr(float(self.temperature))
        cfg.values["nonlinearity"] = self.layers[0].nonlinearity.value
        cfg.values["lambda"] = repr(float(self.lam))
        cfg.values["encode_negative"] = "true" if self.encode_negative else "false"
        if np.ndim(self.b0) == 0:
            cfg.values["b0"] = repr(float(self.b0))
        if "image_size" in self.extra:
            cfg.values["image_size"] = str(self.extra["image_size"])
        for layer in self.layers:
            cfg.layers.append(LayerSpec(layer.out_channels, layer.rank, layer.kernel, layer.stride, layer.padding))
        return cfg

    def init_params(self, rng: Rng, dtype=np.float32) -> "CodaNet":
        for layer in self.layers:
            layer.init_params(rng, dtype)
        return self

    @property
    def dtype(self):
        return self.layers[0].A.dtype

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"layer{i}.{k}"] = v
        return out

    def set_params(self, params: dict[str, np.ndarray]):
        for key, value in params.items():
            idx, name = key.split(".")
            layer = self.layers[int(idx[len("layer"):])]
            if getattr(layer, name).shape != value.shape:
                raise DimensionError(f"{key}: shape {value.shape} != {getattr(layer, name).shape}")
            setattr(layer, name, value)

    def astype(self, dtype) -> "CodaNet":
        out = copy.deepcopy(self)
        out.layers = [layer.astype(dtype) for layer in self.layers]
        return out

    def copy(self) -> "CodaNet":
        return copy.deepcopy(self)

    def with_temperature(self, temperature: float) -> "CodaNet":
        out = copy.copy(self)
        out.temperature = float(temperature)
        return out


def default_b0(num_classes: int) -> float:
    """``ln(1/(k-1))``: sigmoid gives 1/k at zero logits."""
    if num_classes < 2:
        return 0.0
    return math.log(1.0 / (num_classes - 1))


def build(spec: str | ConfigFile, seed: int = 0, dtype=np.float32) -> CodaNet:
    from .config import resolve_config

    cfg = resolve_config(spec) if isinstance(spec, str) else spec
    return CodaNet.from_config(cfg, Rng(seed), dtype)


# -------------------------------------------------------------------- forward


@dataclass
class NetTrace:
    logits: ad.Node  # (N, k), already divided by T
    pooled: ad.Node  # (N, k), before temperature
    layers: list[ConvTrace]
    inputs: ad.Node  # encoded input (N, C, H, W)


def prepare(net: CodaNet, image, encoded: bool = False) -> tuple[np.ndarray, bool]:
    """Encoded batch ``(N, C, H, W)`` in the network dtype, plus a flag for single images."""
    x = np.asarray(image)
    single = x.ndim == 3
    if single:
        x = x[None]
    if not encoded:
        x = encode_input(x, net.encode_negative)
    if x.ndim != 4 or x.shape[1] != net.in_channels:
        raise DimensionError(f"network expects {net.in_channels} encoded channels, got {x.shape}")
    return np.ascontiguousarray(x, dtype=net.dtype), single


def layer_params(net: CodaNet, params: dict | None):
    if params is None:
        return [None] * len(net.layers)
    return [{k: params[f"layer{i}.{k}"] for k in ("A", "B", "b")} for i in range(len(net.layers))]


def trace(net: CodaNet, x, params: dict | None = None) -> NetTrace:
    """Forward on an encoded batch, keeping every layer's intermediate nodes."""
    x = x if isinstance(x, ad.Node) else ad.constant(x)
    h = x
    traces = []
    for layer, p in zip(net.layers, layer_params(net, params)):
        tr = conv_trace(layer, h, p)
        traces.append(tr)
        h = tr.output
    pooled = ad.sum(h, axis=(2, 3))
    logits = ad.scale(pooled, 1.0 / net.temperature)
    return NetTrace(logits, pooled, traces, x)


def forward(net: CodaNet, image, encoded: bool = False) -> np.ndarray:
    """Class logits ``T^-1 * sum_pool(layers(encode(image)))``."""
    x, single = prepare(net, image, encoded)
    logits = trace(net, x).logits.value
    return logits[0] if single else logits


def forward_batched(net: CodaNet, images, batch_size: int = 64, encoded: bool = False) -> np.ndarray:
    images = np.asarray(images)
    out = [forward(net, images[i:i + batch_size], encoded) for i in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, net.num_classes), dtype=net.dtype)
    return np.concatenate(out)


# ------------------------------------------------------------------- collapse


def layer_maps(net: CodaNet, image, encoded: bool = False) -> tuple[list[LayerLinearMap], list[np.ndarray]]:
    """Per-layer linear maps and the activations ``a_0 .. a_L`` for a batch."""
    x, _ = prepare(net, image, encoded)
    tr = trace(net, x)
    maps = [
        LayerLinearMap(t.weights.value, t.in_shape, t.out_hw, layer.kernel, layer.stride, layer.padding)
        for t, layer in zip(tr.layers, net.layers)
    ]
    acts = [x] + [t.output.value for t in tr.layers]
    return maps, acts


def _pool_rows(n: int, classes: np.ndarray, f: int, h: int, w: int, dtype) -> np.ndarray:
    """Rows of the sum-pool matrix for the requested classes: ``(N, m, f, h, w)``."""
    m = classes.shape[1]
    rows = np.zeros((n, m, f, h, w), dtype=dtype)
    for i in range(m):
        rows[np.arange(n), i, classes[:, i]] = 1
    return rows


def collapse_full(net: CodaNet, image, encoded: bool = False, perturb=None) -> np.ndarray:
    """``W_{0->L}(x)``: ``(k, C*H*W)`` for one image or ``(N, k, C*H*W)`` for a batch.

    Multiplies the pooling rows through the per-layer maps from the output
    back to the input. The temperature is not applied. ``perturb`` may
    replace the list of layer maps before the product (fault injection).
    """
    x, single = prepare(net, image, encoded)
    maps, acts = layer_maps(net, x, encoded=True)
    if perturb is not None:
        maps = perturb(maps)
    n = x.shape[0]
    classes = np.tile(np.arange(net.num_classes), (n, 1))
    _, _, oh, ow = acts[-1].shape
    rows = _pool_rows(n, classes, net.num_classes, oh, ow, x.dtype)
    for m in reversed(maps):
        rows = m.rmatmul(rows)
    full = rows.reshape(n, net.num_classes, -1)
    return full[0] if single else full


def collapse_between(net: CodaNet, image, start: int, stop: int, encoded: bool = False) -> np.ndarray:
    """Dense ``W_{start->stop}`` for a single image: maps ``a_start`` to ``a_stop``."""
    if not 0 <= start < stop <= len(net.layers):
        raise IndexError(f"need 0 <= start < stop <= {len(net.layers)}, got {start}, {stop}")
    x, single = prepare(net, image, encoded)
    if not single and x.shape[0] != 1:
        raise ValueError("collapse_between works on a single image")
    maps, acts = layer_maps(net, x, encoded=True)
    f, h, w = acts[stop].shape[1:]
    eye = np.eye(f * h * w, dtype=x.dtype).reshape(1, f * h * w, f, h, w)
    rows = eye
    for m in reversed(maps[start:stop]):
        rows = m.rmatmul(rows)
    return rows.reshape(f * h * w, -1)


def _check_classes(net: CodaNet, classes) -> None:
    arr = np.asarray(classes)
    if arr.size and (arr.min() < 0 or arr.max() >= net.num_classes):
        raise IndexError(f"class index out of range [0, {net.num_classes})")


def rows_from_trace(net: CodaNet, tr: NetTrace, classes: np.ndarray) -> ad.Node:
    """Selected rows of ``W_{0->L}`` as a differentiable node ``(N, m, C, H, W)``.

    Basis rows are pulled back through each layer's dynamic weights taken
    from the forward graph; the input itself is treated as a constant.
    """
    n = tr.inputs.shape[0]
    classes = np.asarray(classes).reshape(n, -1)
    m = classes.shape[1]
    last = tr.layers[-1]
    oh, ow = last.out_hw
    v = ad.constant(_pool_rows(n, classes, net.num_classes, oh, ow, tr.inputs.dtype)
                    .reshape(n, m, net.num_classes, oh * ow))
    for t, layer in zip(reversed(tr.layers), reversed(net.layers)):
        c, h, w = t.in_shape
        vt = ad.transpose(v, (0, 3, 1, 2))  # N, L, m, f
        cols = ad.matmul(vt, t.weights)  # N, L, m, P
        cols = ad.transpose(cols, (0, 2, 3, 1))  # N, m, P, L
        cols = ad.reshape(cols, (n * m, layer.patch_dim, t.out_hw[0] * t.out_hw[1]))
        img = ad.fold(cols, c, (h, w), layer.kernel, layer.stride, layer.padding)
        v = ad.reshape(img, (n, m, c, h * w))
    c, h, w = tr.layers[0].in_shape
    return ad.reshape(v, (n, m, c, h, w))


def collapse_rows(net: CodaNet, image, classes, encoded: bool = False, params: dict | None = None) -> ad.Node:
    """Rows of ``W_{0->L}`` for ``classes`` (per-image index lists), flattened per row.

    Returns a node of shape ``(m, C*H*W)`` for one image or ``(N, m, C*H*W)``
    for a batch; it is differentiable in the parameters when ``params`` holds
    autodiff leaves.
    """
    x, single = prepare(net, image, encoded)
    n = x.shape[0]
    cls = np.asarray(classes)
    cls = np.broadcast_to(cls.reshape(1, -1), (n, cls.size)) if cls.ndim <= 1 else cls
    _check_classes(net, cls)
    tr = trace(net, x, params)
    rows = rows_from_trace(net, tr, cls)
    flat = ad.reshape(rows, (n, cls.shape[1], -1))
    return ad.reshape(flat, flat.shape[1:]) if single else flat


# -------------------------------------------------------------- contributions


@dataclass
class ContributionMap:
    class_index: int
    values: np.ndarray  # (C_in, H, W), signed
    logit: float

    def spatial(self) -> np.ndarray:
        """Per-pixel map: the encoded channels summed."""
        return self.values.sum(axis=0)

    @property
    def total(self) -> float:
        return float(self.values.sum(dtype=np.float64))


def contributions(net: CodaNet, image, j: int, encoded: bool = False) -> ContributionMap:
    """Row ``j`` of ``W_{0->L}`` times the encoded input, scaled by ``1/T``."""
    _check_classes(net, [j])
    x, single = prepare(net, image, encoded)
    if x.shape[0] != 1:
        raise ValueError("contributions works on a single image; use contributions_batch")
    values = contributions_batch(net, x, np.array([j]), encoded=True)[0]
    logit = forward(net, x, encoded=True)[0, j]
    return ContributionMap(int(j), values, float(logit))


def contributions_batch(net: CodaNet, images, classes, encoded: bool = False) -> np.ndarray:
    """Contribution maps ``(N, C, H, W)`` for one class per image."""
    x, _ = prepare(net, images, encoded)
    classes = np.asarray(classes).reshape(-1, 1)
    _check_classes(net, classes)
    tr = trace(net, x)
    rows = rows_from_trace(net, tr, classes).value[:, 0]
    return rows * x / x.dtype.type(net.temperature)


# ----------------------------------------------------------------------- loss


def sample_regulariser_classes(labels: np.ndarray, num_classes: int, rng: Rng) -> np.ndarray:
    """True class plus one uniformly drawn incorrect class per image: ``(N, 2)``."""
    labels = np.asarray(labels)
    other = rng.integers(0, num_classes - 1, size=labels.shape[0])
    other = other + (other >= labels)
    return np.stack([labels, other], axis=1)


@dataclass
class LossResult:
    total: ad.Node  # scalar, mean over the batch
    logits: np.ndarray
    bce: float
    reg: float


def loss(
    net: CodaNet,
    images,
    targets,
    params: dict | None = None,
    reg_classes: np.ndarray | None = None,
    rng: Rng | None = None,
    all_classes: bool = False,
    encoded: bool = False,
) -> LossResult:
    """Batch-mean of ``sum_k BCE(sigmoid(logits + b0), y) + lambda * mean|rows of W|``.

    ``targets`` are one-hot rows. The regulariser uses the true class and one
    random incorrect class per image unless ``reg_classes`` is given or
    ``all_classes`` is set.
    """
    x, single = prepare(net, images, encoded)
    y = np.asarray(targets, dtype=x.dtype)
    if single and y.ndim == 1:
        y = y[None]
    if y.shape != (x.shape[0], net.num_classes) or not np.all((y == 0) | (y == 1)) \
            or not np.all(y.sum(axis=1) == 1):
        raise InputError(f"targets must be one-hot rows of shape {(x.shape[0], net.num_classes)}")
    tr = trace(net, x, params)
    b0 = np.asarray(net.b0, dtype=x.dtype)
    per_class = ad.bce_with_logits(ad.add(tr.logits, b0), y)
    per_sample = ad.sum(per_class, axis=1)
    bce_val = float(per_sample.value.mean())
    reg_val = 0.0
    if net.lam > 0:
        if reg_classes is None:
            if all_classes:
                reg_classes = np.tile(np.arange(net.num_classes), (x.shape[0], 1))
            else:
                if rng is None:
                    raise ValueError("loss with lambda > 0 needs rng= or reg_classes=")
                reg_classes = sample_regulariser_classes(y.argmax(axis=1), net.num_classes, rng)
        reg_classes = np.asarray(reg_classes).reshape(x.shape[0], -1)
        _check_classes(net, reg_classes)
        rows = rows_from_trace(net, tr, reg_classes)
        n = x.shape[0]
        reg = ad.abs_mean(ad.reshape(rows, (n, -1)), axis=1)
        reg_val = float(reg.value.mean())
        per_sample = ad.add(per_sample, ad.scale(reg, net.lam))
    total = ad.mean(per_sample)
    return LossResult(total, tr.logits.value, bce_val, reg_val)
