import numpy as np
import pytest

from shotfree.baseline import protonet_baseline_train
from shotfree.data import gen_synthetic
from shotfree.training import TrainConfig, meta_train


@pytest.fixture(scope="session")
def small_ds():
    # 30 classes -> 19 base, 5 val, 6 novel
    return gen_synthetic(num_classes=30, dim=8, samples_per_class=40, intra_spread=0.1, seed=3)


@pytest.fixture(scope="session")
def small_cfg():
    return TrainConfig(max_iterations=40, validation_interval=20, val_episodes=20, embed_dim=6, hidden=(16,),
                       per_class=6, episodes_per_iteration=2, seed=1)


@pytest.fixture(scope="session")
def trained(small_ds, small_cfg):
    return meta_train(small_ds, small_cfg)


@pytest.fixture(scope="session")
def shotfree_ck(trained):
    return trained[0]


@pytest.fixture(scope="session")
def protonet_ck(small_ds, small_cfg):
    return protonet_baseline_train(small_ds, small_cfg)[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the lines are repeated in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
