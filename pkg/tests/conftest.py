import numpy as np
import pytest

from busunet.architectures import Network, UNetConfig
from busunet.data import load_dataset
from busunet.synthetic import gen_synthetic


def oracle_network(dtype=np.float32) -> Network:
    """Hand-wired levels=1 BCDU-Net that thresholds its input pixelwise.

    On noise-free synthetic data the preprocessed image is 0 off-vessel and
    at least 1/255 on-vessel, so this net reproduces the mask exactly. Only
    centre taps are nonzero, which keeps the map pointwise and hence
    independent of patch position during stitching.
    """
    net = Network(UNetConfig(levels=1, base_channels=1, d=1), seed=0, dtype=dtype)
    for _, p in net.named_parameters():
        p.data[...] = 0
    params = dict(net.named_parameters())

    def centre(name, value=1.0, cin=0, cout=0):
        w = params[name].data
        w[cout, cin, w.shape[2] // 2, w.shape[3] // 2] = value

    centre("net.u0.enc0.conv1.weight")
    centre("net.u0.enc0.conv2.weight")
    lstm = params["net.u0.dec0.lstm_fwd.b"].data
    lstm[[0, 1, 3]] = 10.0  # i, f, o gates open
    centre("net.u0.dec0.lstm_fwd.wx", 1000.0, cout=2)  # candidate = tanh(1000 x)
    centre("net.u0.dec0.proj.weight")  # forward-direction hidden state only
    centre("net.u0.dec0.conv1.weight")
    centre("net.u0.dec0.conv2.weight")
    params["net.u0.head.conv.weight"].data[...] = 100.0
    params["net.u0.head.conv.bias"].data[...] = -10.0
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def clean_dataset(tmp_path_factory):
    """Six noise-free 64x64 synthetic images."""
    return gen_synthetic(tmp_path_factory.mktemp("clean"), 6, 64, density=1.0, noise=0.0, seed=3)


@pytest.fixture(scope="session")
def noisy_dataset(tmp_path_factory):
    return gen_synthetic(tmp_path_factory.mktemp("noisy"), 6, 64, density=1.0, noise=0.1, seed=5)


@pytest.fixture(scope="session")
def clean_images(clean_dataset):
    return load_dataset(clean_dataset)


@pytest.fixture(scope="session")
def noisy_images(noisy_dataset):
    return load_dataset(noisy_dataset)


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
