import sys
import time
from pathlib import Path

import numpy as np
import pytest

from geodsr import tensor as T

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402


@pytest.fixture(autouse=True)
def _checked_mode():
    with T.checked(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- desk-scale training shared by the acceptance suite ------------------------------

DESK_SEED = 0


@pytest.fixture(scope="session")
def desk_data():
    from geodsr.evaluation import EvalItem
    from geodsr.synthetic import SyntheticSceneSpec, gen_synthetic

    train = gen_synthetic(SyntheticSceneSpec(count=200, seed=1, size=64))
    test = [EvalItem(d, g) for d, g in gen_synthetic(SyntheticSceneSpec(count=20, seed=999, size=64))]
    return train, test


def train_desk(train, seed=DESK_SEED, scale_range=(1.0, 16.0), **net_kw):
    """Abbreviated two-stage schedule: 300 steps at s=8, then 300 steps with random s."""
    from geodsr.network import GeoDsrNetwork, NetworkConfig
    from geodsr.training import TrainConfig, run_stage

    net = GeoDsrNetwork(NetworkConfig.desk(seed=seed, **net_kw))
    with T.checked(False):
        first = run_stage(net, train, TrainConfig.desk(stage=1, seed=seed))
        second = run_stage(net, train, TrainConfig.desk(stage=2, seed=seed, scale_range=scale_range))
    return net, first, second


@pytest.fixture(scope="session")
def desk_model(desk_data):
    t0 = time.perf_counter()
    net, first, second = train_desk(desk_data[0])
    return net, first, second, time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.RESULTS:
            terminalreporter.write_line(line)
