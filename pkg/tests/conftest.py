import numpy as np
import pytest

from modroute import tensor as T
from modroute.config import Config
from modroute.synthdata import generate

TINY_OVERRIDES = [
    "corpus.n_train=24",
    "corpus.n_val=6",
    "corpus.n_test=6",
    "corpus.d_brain=16",
    "corpus.d_latent=13",
    "corpus.d_raw=6",
    "corpus.aux_min_len=2",
    "corpus.aux_max_len=4",
    "model.d_model=8",
    "model.num_layers=1",
    "model.num_heads=2",
    "model.num_queries=2",
    "model.soft_prompt_len=3",
    "model.grid_tokens=4",
    "model.max_target_len=12",
    "router.hidden=8",
    "optim.batch_size=4",
    "optim.lr=1e-3",
    "schedule.phase1_steps=3",
    "schedule.phase2_steps=3",
    "schedule.midpoint=2",
    "eval.batch_size=8",
    "eval.rolling_window=3",
]


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def fresh_graph():
    T.reset_graph()
    yield
    T.reset_graph()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return Config().with_overrides(TINY_OVERRIDES).validate()


@pytest.fixture
def tiny_corpus(tiny_config):
    return generate(tiny_config.corpus)
