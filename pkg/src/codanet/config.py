"""Plain-text network/training config: ``key = value`` lines plus ``layer`` lines.

Example::

    name = s-coda
    num_classes = 10
    temperature = 1000
    nonlinearity = sq
    #       units  rank  kernel  stride  [padding]
    layer = 16     32    3       1

Blank lines and ``#`` comments are ignored. Layer columns mirror the
architecture tables: number of DAUs, rank, kernel size, stride.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class LayerSpec:
    units: int
    rank: int
    kernel: int
    stride: int
    padding: int | None = None

    def to_line(self) -> str:
        cols = [self.units, self.rank, self.kernel, self.stride]
        if self.padding is not None and self.padding != (self.kernel - 1) // 2:
            cols.append(self.padding)
        return "layer = " + " ".join(str(c) for c in cols)


@dataclass
class ConfigFile:
    values: dict[str, str] = field(default_factory=dict)
    layers: list[LayerSpec] = field(default_factory=list)

    def get(self, key, default=None, cast=str):
        if key not in self.values:
            return default
        raw = self.values[key]
        try:
            if cast is bool:
                return _parse_bool(raw)
            return cast(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from None

    def to_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in self.values.items()]
        lines += [spec.to_line() for spec in self.layers]
        return "\n".join(lines) + "\n"


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def parse_config(text: str) -> ConfigFile:
    cfg = ConfigFile()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lower()
        if key == "layer":
            cols = value.split()
            if len(cols) not in (4, 5):
                raise ConfigError(
                    f"line {lineno}: layer needs 'units rank kernel stride [padding]'"
                )
            try:
                nums = [int(c) for c in cols]
            except ValueError:
                raise ConfigError(f"line {lineno}: non-integer layer field in {value!r}") from None
            cfg.layers.append(LayerSpec(*nums))
        else:
            if key in cfg.values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            cfg.values[key] = value
    return cfg


def load_config(path) -> ConfigFile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


_S_CODA = [(16, 32, 3, 1), (16, 32, 3, 1), (32, 64, 3, 2), (32, 64, 3, 1), (32, 64, 3, 1),
           (64, 64, 3, 2), (64, 64, 3, 1), (64, 64, 3, 1), (10, 64, 1, 1)]
_M_CODA = [(16, 64, 3, 1), (16, 64, 3, 1), (32, 128, 3, 2), (32, 128, 3, 1), (32, 128, 3, 1),
           (64, 256, 3, 2), (64, 256, 3, 1), (64, 256, 3, 1), (10, 256, 1, 1)]
_L_CODA = [(16, 64, 7, 3), (32, 64, 3, 1), (32, 64, 3, 1), (64, 128, 3, 2), (64, 128, 3, 1),
           (64, 128, 3, 1), (64, 256, 3, 2), (64, 256, 3, 1), (100, 256, 3, 1)]
_XL_CODA = [(16, 64, 5, 1), (32, 64, 3, 1), (32, 128, 3, 2), (64, 128, 3, 1), (64, 128, 3, 1),
            (64, 256, 3, 2), (64, 256, 3, 1), (64, 256, 3, 1), (200, 256, 3, 2)]


def _preset(name, layers, num_classes, temperature, image_size, extra="") -> str:
    lines = [
        f"name = {name}",
        f"num_classes = {num_classes}",
        f"temperature = {temperature}",
        "nonlinearity = sq",
        "lambda = 0",
        "encode_negative = true",
        f"image_size = {image_size}",
    ]
    lines += extra.split("\n") if extra else []
    lines += [LayerSpec(*row).to_line() for row in layers]
    return "\n".join(lines) + "\n"


PRESETS: dict[str, str] = {
    "tiny1": _preset("tiny1", [(10, 8, 3, 1)], 10, 64, 8),
    "tiny3": _preset("tiny3", [(8, 8, 3, 1), (8, 16, 3, 2), (10, 16, 1, 1)], 10, 64, 16),
    "s-coda": _preset("s-coda", _S_CODA, 10, 1000, 32),
    "m-coda": _preset("m-coda", _M_CODA, 10, 1000, 32),
    "l-coda": _preset("l-coda", _L_CODA, 100, 100000, 240),
    "xl-coda": _preset("xl-coda", _XL_CODA, 200, 6400, 64),
    "mnist4": _preset(
        "mnist4",
        [(8, 8, 3, 2), (16, 16, 3, 2), (16, 16, 3, 1), (10, 16, 1, 1)],
        10,
        64,
        28,
        extra="epochs = 3\nbatch_size = 16\nlr = 3e-3\nlr_decay_every = 30",
    ),
    "noisy-digits": _preset(
        "noisy-digits",
        [(8, 8, 3, 2), (8, 8, 3, 2), (3, 8, 1, 1)],
        3,
        8,
        28,
        extra="epochs = 3\nbatch_size = 16\nlr = 1e-3\nlr_decay_every = 30",
    ),
}


def preset(name: str) -> ConfigFile:
    try:
        return parse_config(PRESETS[name.lower()])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None


def resolve_config(spec: str) -> ConfigFile:
    """A preset name, or ``preset:NAME``, or a path to a config file."""
    if spec.startswith("preset:"):
        return preset(spec.split(":", 1)[1])
    if spec.lower() in PRESETS and not Path(spec).exists():
        return preset(spec)
    return load_config(spec)
