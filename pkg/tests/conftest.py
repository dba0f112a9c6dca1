import hashlib
import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from codanet import network as nw  # noqa: E402
from codanet import training as tr  # noqa: E402
from codanet.tensor import Rng  # noqa: E402

MNIST_DIR = Path(os.environ.get("CODA_MNIST", "/root/data/mnist"))


@pytest.fixture(scope="session")
def mnist_dir():
    if not (MNIST_DIR / "train-images-idx3-ubyte").exists() and not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
        pytest.skip(f"MNIST not found in {MNIST_DIR} (set CODA_MNIST)")
    return MNIST_DIR


@pytest.fixture(scope="session")
def train_cached(request):
    """Train (or reload) a net keyed on its config, training settings and data.

    Nets live in the pytest cache so repeated runs skip training; set
    ``CODA_RETRAIN=1`` to force a fresh run.
    """
    root = Path(request.config.cache.mkdir("codanet-nets"))

    def get(cfg_file, data, train_cfg: tr.TrainConfig, tag: str):
        key = hashlib.sha256(
            (cfg_file.to_text() + repr(train_cfg) + f"{len(data)}:{data.images[:64].tobytes().hex()[:512]}").encode()
        ).hexdigest()[:16]
        path = root / f"{tag}-{key}.ckpt"
        if path.exists() and not os.environ.get("CODA_RETRAIN"):
            net, _ = tr.load_checkpoint(path)
            return net
        net = nw.CodaNet.from_config(cfg_file, Rng(train_cfg.seed), train_cfg.dtype)
        _, state = tr.train(net, data, train_cfg)
        tr.save_checkpoint(net, state, path)
        return net

    return get


ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record one PASS/FAIL line; the lines are repeated in the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2} {title}: {detail}"
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print(f"\n    {line}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
