import sys
import numpy as np
import pytest

from tcprune.autograd import ParameterStore
from tcprune.zoo import build_small_resnet, build_small_vgg, init_params


def randomize(graph, seed=0, profile="high"):
    """Parameters with non-zero biases/shifts and non-trivial running stats.

    Zero biases put many pre-activations exactly on the ReLU kink, which makes
    central differences meaningless; random shifts avoid that.
    """
    p = init_params(graph, seed, profile)
    rng = np.random.default_rng(seed + 1000)
    params = {}
    for k, v in p.params.items():
        if k.endswith((".bias", ".beta")):
            params[k] = rng.normal(0.0, 0.3, v.shape)
        elif k.endswith(".gamma"):
            params[k] = rng.uniform(0.5, 1.5, v.shape)
        else:
            params[k] = v
    buffers = {}
    for k, v in p.buffers.items():
        if k.endswith("running_mean"):
            buffers[k] = rng.normal(0.0, 0.2, v.shape)
        else:
            buffers[k] = rng.uniform(0.5, 2.0, v.shape)
    return ParameterStore(params, buffers, profile)


@pytest.fixture
def vgg():
    return build_small_vgg([4, 6], [8, 6], 3, input_shape=(3, 8, 8))


@pytest.fixture
def resnet():
    return build_small_resnet([(8, 4), (12, 4, 2)], 3, input_shape=(3, 8, 8), stem_channels=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
