import time

import numpy as np
import pytest

from scaledrop.data import export_digits_idx, load_dataset, two_moons
from scaledrop.dropout import DropoutConfig, adaptive_rates
from scaledrop.model import build_model
from scaledrop.training import Hyperparams, train

MOONS_TOPOLOGY = {
    "input_shape": [2],
    "encoding": {"kind": "thermometer", "levels": 32, "low": -1.5, "high": 2.5},
    "layers": [{"type": "dense", "units": 64}, {"type": "dense", "units": 64}, {"type": "dense", "units": 2}],
}

LENET_TOPOLOGY = {
    "input_shape": [28, 28, 1],
    "encoding": {"kind": "sign", "threshold": 0.5},
    "layers": [
        {"type": "conv", "channels": 6, "kernel": 5, "pool": 2},
        {"type": "conv", "channels": 16, "kernel": 5, "pool": 2},
        {"type": "dense", "units": 120},
        {"type": "dense", "units": 84},
        {"type": "dense", "units": 10},
    ],
}

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture(scope="session")
def moons():
    """Two-moons binary MLP trained for 100 epochs."""
    start = time.perf_counter()
    tr, te = two_moons(200, 0.1, seed=7), two_moons(500, 0.1, seed=8)
    model = build_model(MOONS_TOPOLOGY, seed=0)
    cfg = DropoutConfig("unitary", adaptive_rates([l.param_count for l in model.binary_layers()]))
    hp = Hyperparams(learning_rate=1e-2, epochs=100, batch_size=32, seed=0)
    model, history = train(model, tr.x, tr.y, hp, cfg)
    return {"model": model, "cfg": cfg, "train": tr, "test": te, "history": history,
            "seconds": time.perf_counter() - start}


@pytest.fixture(scope="session")
def digits_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("digits")
    export_digits_idx(out, n_train=1000, seed=0)
    return out


@pytest.fixture(scope="session")
def lenet(digits_dir):
    """LeNet-5-shaped BNN trained 20 epochs on 1000 MNIST-format digits."""
    start = time.perf_counter()
    tr = load_dataset(digits_dir / "train-images-idx3-ubyte", "idx-images",
                      labels=digits_dir / "train-labels-idx1-ubyte")
    te = load_dataset(digits_dir / "t10k-images-idx3-ubyte", "idx-images",
                      labels=digits_dir / "t10k-labels-idx1-ubyte")
    model = build_model(LENET_TOPOLOGY, seed=0)
    cfg = DropoutConfig("unitary", adaptive_rates([l.param_count for l in model.binary_layers()]))
    hp = Hyperparams(learning_rate=1e-2, epochs=20, batch_size=32, seed=0)
    model, history = train(model, tr.x, tr.y, hp, cfg, test=(te.x, te.y))
    return {"model": model, "cfg": cfg, "train": tr, "test": te, "history": history,
            "seconds": time.perf_counter() - start}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
