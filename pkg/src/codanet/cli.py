"""``codanet`` command line: training, evaluation and the interpretability experiments.

Exit codes: 0 success, 2 usage, 3 data or format problem, 4 numeric failure
(including a failed ``verify`` suite).
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments as X
from . import interpret as I
from . import network as nw
from . import training as tr
from . import verify as V
from .config import PRESETS, ConfigError, load_config, preset
from .datasets import DataFormatError, PoolExhaustedError
from .imageio import ImageFormatError, read_image
from .tensor import DimensionError, GeometryError, Rng

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("codanet")


class UsageError(Exception):
    pass


def _threads():
    """Honour ``CODA_THREADS`` by capping BLAS/OpenMP pools."""
    raw = os.environ.get("CODA_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CODA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("CODA_THREADS must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def write_summary(path, values: dict) -> None:
    lines = []
    for k, v in values.items():
        if isinstance(v, (float, np.floating)):
            v = f"{float(v):.6g}"
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


def _emit(args, values: dict) -> None:
    for k, v in values.items():
        print(f"{k}: {v:.6g}" if isinstance(v, (float, np.floating)) else f"{k}: {v}")
    if getattr(args, "summary", None):
        write_summary(args.summary, values)


def _load_config(spec: str):
    if spec.lower() in PRESETS:
        return preset(spec)
    name = spec.split(":", 1)[1] if spec.startswith("preset:") else None
    if name is not None:
        return preset(name)
    if not Path(spec).is_file():
        raise UsageError(f"config {spec!r} is neither a preset ({', '.join(sorted(PRESETS))}) nor a file")
    return load_config(spec)


def _load_net(path) -> nw.CodaNet:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    net, _ = tr.load_checkpoint(path)
    return net


def _subset(data, limit):
    return data if not limit else data.subset(np.arange(min(limit, len(data))))


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg_file = _load_config(args.config)
    overrides = {"seed": args.seed, "precision": args.precision, "epochs": args.epochs}
    cfg = tr.TrainConfig.from_config(cfg_file, **{k: v for k, v in overrides.items() if v is not None})
    data = _subset(X.open_dataset(args.data, "train"), args.limit)
    net = nw.CodaNet.from_config(cfg_file, Rng(cfg.seed), cfg.dtype)
    log_, state = tr.train(net, data, cfg, on_epoch=lambda rec: print(rec.line(), flush=True))
    tr.save_checkpoint(net, state, args.out)
    Path(str(args.out) + ".log").write_text(log_.text())
    last = log_.records[-1]
    values = {"epochs": len(log_.records), "final_loss": last.loss, "train_acc": last.acc, "checkpoint": args.out}
    if args.summary:
        write_summary(args.summary, values)
    return EXIT_OK


def cmd_eval(args) -> int:
    net = _load_net(args.ckpt)
    data = _subset(X.open_dataset(args.data, args.split), args.limit)
    _emit(args, {"images": len(data), "accuracy": tr.evaluate(net, data)})
    return EXIT_OK


def _explain_image(args, net):
    if args.image and args.data:
        raise UsageError("give either --image or --data/--index, not both")
    if args.image:
        img = read_image(args.image)
        if img.shape[0] not in (1, 3):
            raise DataFormatError(f"{args.image}: unsupported channel count {img.shape[0]}")
        return img, None
    if not args.data:
        raise UsageError("explain needs --image or --data with --index")
    data = X.open_dataset(args.data, args.split)
    if not 0 <= args.index < len(data):
        raise UsageError(f"--index {args.index} out of range for {len(data)} images")
    return data.images[args.index], int(data.labels[args.index])


def cmd_explain(args) -> int:
    net = _load_net(args.ckpt)
    img, label = _explain_image(args, net)
    x, _ = nw.prepare(net, img)
    logits = nw.forward(net, x, encoded=True)[0]
    j = int(np.argmax(logits)) if args.cls is None else args.cls
    if not 0 <= j < net.num_classes:
        raise UsageError(f"--class {j} out of range for {net.num_classes} classes")
    attr = I.attribute(args.method, net, x, j, encoded=True)
    I.render_heatmap(attr, args.out)
    values = {"class": j, "logit": float(logits[j]), "attribution_sum": float(attr.sum(dtype=np.float64))}
    if str(args.method) == "coda":
        values["contribution_sum"] = values.pop("attribution_sum")
    if label is not None:
        values["label"] = label
    _emit(args, values)
    return EXIT_OK


def cmd_pointing_game(args) -> int:
    net = _load_net(args.ckpt)
    data = _subset(X.open_dataset(args.data, args.split), args.limit)
    res = X.run_pointing_game(net, data, args.methods, args.grids, args.n, args.seed)
    values = {"grids": res.grids, "chance": 1.0 / args.n**2}
    values.update({f"pointing_{m}": v for m, v in res.means().items()})
    _emit(args, values)
    return EXIT_OK


def cmd_pixel_removal(args) -> int:
    net = _load_net(args.ckpt)
    data = _subset(X.open_dataset(args.data, args.split), args.limit)
    orders = tuple(dict.fromkeys(["least", "random", *args.orders]))
    res = X.run_pixel_removal(net, data, args.count, args.method, orders, args.steps, args.seed)
    values = {"images": len(res.areas["least"])}
    for o in orders:
        values[f"area_{o}"] = float(res.areas[o].mean())
    values["least_ge_random"] = res.least_beats_random()
    _emit(args, values)
    if args.curves:
        rows = ["order\t" + "\t".join(f"{f:.4f}" for f in res.fractions)]
        rows += [f"{o}\t" + "\t".join(f"{v:.6g}" for v in res.curves[o].mean(axis=0)) for o in orders]
        Path(args.curves).write_text("\n".join(rows) + "\n")
    return EXIT_OK


def cmd_sanity_check(args) -> int:
    net = _load_net(args.ckpt)
    data = _subset(X.open_dataset(args.data, args.split), args.limit)
    res = X.run_sanity_check(net, data, args.count, args.seed)
    values = {"probes": len(res.distances)}
    L = res.distances.shape[1]
    for k in range(L):
        values[f"distance_after_{k + 1}_reinit"] = float(res.distances[:, k].mean())
    values["perturbed_fraction"] = float(res.perturbed().mean())
    _emit(args, values)
    return EXIT_OK


def cmd_ev_demo(args) -> int:
    from .datasets import load_mnist

    if not Path(args.data).is_dir():
        raise UsageError(f"--data {args.data} must be an MNIST directory")
    mnist = load_mnist(args.data, "train")
    digits = tuple(int(d) for d in args.digits.split(","))
    res = X.run_eigen_demo(mnist, digits, args.n, args.noise, args.rank, args.steps, args.lr,
                           args.nonlinearity, args.seed)
    values = {"pairs": len(res.eigenvalues)}
    values.update({f"eigenvalue_{i}": v for i, v in enumerate(res.eigenvalues)})
    values.update({f"cosine_digit_{d}": float(c) for d, c in zip(digits, res.cosines)})
    values["final_mean_output"] = res.mean_output[-1]
    _emit(args, values)
    if args.out_dir:
        from .imageio import write_image

        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        side = int(np.sqrt(res.bases[0].size))
        for i, v in enumerate(res.eigenvectors):
            I.render_heatmap(v.reshape(side, side), out / f"eigenvector_{i}.ppm")
        for d, b in zip(digits, res.bases):
            write_image(out / f"digit_{d}.pgm", b.reshape(1, side, side))
    return EXIT_OK


def cmd_verify(args) -> int:
    names = list(V.SUITES) if args.suite == "all" else [args.suite]
    ok = True
    values = {}
    for name in names:
        r = V.SUITES[name]()
        print(r.line(), flush=True)
        ok &= r.passed
        values[f"{name}_worst"] = r.worst
        values[f"{name}_pass"] = int(r.passed)
    if args.summary:
        write_summary(args.summary, values)
    return EXIT_OK if ok else EXIT_NUMERIC


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _method(text: str):
    try:
        return I.AttributionMethod.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="codanet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--summary", help="write key=value results to this file")

    def data_args(sp, split="test"):
        sp.add_argument("--data", required=True, help="MNIST dir, CIFAR .bin file or noisy-digits:DIR")
        sp.add_argument("--split", default=split, choices=("train", "test"))
        sp.add_argument("--limit", type=int, default=0, help="use only the first N images")

    sp = sub.add_parser("train", parents=[common], help="train a network and write a checkpoint")
    sp.add_argument("--config", required=True, help="preset name or config file")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--precision", type=int, choices=(32, 64))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--limit", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="test accuracy of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    data_args(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("explain", parents=[common], help="attribution heatmap for one image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image")
    sp.add_argument("--data")
    sp.add_argument("--split", default="test", choices=("train", "test"))
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--class", dest="cls", type=int, help="target class (default: predicted)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--method", type=_method, default=I.AttributionMethod("coda"),
                    help="coda, grad, ixg, occ, occ-K or occ-K-S")
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("pointing-game", parents=[common], help="localisation on class-distinct grids")
    sp.add_argument("--ckpt", required=True)
    data_args(sp)
    sp.add_argument("--grids", type=int, default=200)
    sp.add_argument("--n", type=int, default=3)
    sp.add_argument("--methods", type=lambda s: [_method(t) for t in s.split(",")],
                    default=[I.AttributionMethod("coda"), I.AttributionMethod("grad")])
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_pointing_game)

    sp = sub.add_parser("pixel-removal", parents=[common], help="logit curves as pixels are zeroed")
    sp.add_argument("--ckpt", required=True)
    data_args(sp)
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--method", type=_method, default=I.AttributionMethod("coda"))
    sp.add_argument("--orders", type=lambda s: s.split(","), default=["least", "random"])
    sp.add_argument("--steps", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--curves", help="write mean curves as a tab-separated table")
    sp.set_defaults(func=cmd_pixel_removal)

    sp = sub.add_parser("sanity-check", parents=[common], help="cascading parameter randomisation")
    sp.add_argument("--ckpt", required=True)
    data_args(sp)
    sp.add_argument("--count", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_sanity_check)

    sp = sub.add_parser("ev-demo", parents=[common], help="eigenvectors of an output-maximised DAU")
    sp.add_argument("--data", required=True, help="MNIST directory (digit templates)")
    sp.add_argument("--digits", default="0,1,3")
    sp.add_argument("--n", type=int, default=3072)
    sp.add_argument("--noise", type=float, default=0.25)
    sp.add_argument("--rank", type=int, default=3)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--lr", type=float, default=3e-3)
    sp.add_argument("--nonlinearity", default="l2", choices=("l2", "sq"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_ev_demo)

    sp = sub.add_parser("verify", parents=[common], help="run the invariant suites")
    sp.add_argument("--suite", default="all", choices=(*V.SUITES, "all"))
    sp.set_defaults(func=cmd_verify)
    return p


def _fail(code: int, message: str) -> int:
    print(f"codanet: error: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _threads():
            return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except (ConfigError, DataFormatError, ImageFormatError, tr.CheckpointFormatError, nw.InputError,
            GeometryError, DimensionError, PoolExhaustedError) as exc:
        return _fail(EXIT_DATA, str(exc))
    except (tr.NumericError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    except OSError as exc:
        return _fail(EXIT_DATA, str(exc))


if __name__ == "__main__":
    sys.exit(main())
