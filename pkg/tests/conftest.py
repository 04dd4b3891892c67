import numpy as np
import pytest

from crossmodal.config import RunConfig
from crossmodal.scenegen import make_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def reference_config():
    return RunConfig()


@pytest.fixture(scope="session")
def reference_data(reference_config):
    """The default benchmark: 200 training and 50 evaluation scenes."""
    cfg = reference_config
    vocab = cfg.vocab.build()
    train = make_dataset(cfg.scene, vocab, cfg.data.train_seeds(), cfg.data.mode)
    evaluation = make_dataset(cfg.scene, vocab, cfg.data.eval_seeds())
    return vocab, train, evaluation


def pytest_terminal_summary(terminalreporter):
    from helpers import CRITERIA

    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
