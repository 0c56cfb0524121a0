import sys

import pytest

from mfdmeta import harness as hs
from mfdmeta import mtpinn as mt

SMALL_POOL = {"n_cities": 6, "detector_counts": (10,), "replicas": 5, "city_overrides": {"n_days": 2}}
TINY_NET = {"hidden_sizes": (8, 8), "head_sizes": (4,)}


@pytest.fixture(scope="session")
def small_pool():
    """Six synthetic cities with five 10-detector replicas each."""
    return hs.build_pool(hs.ExperimentConfig(**SMALL_POOL))


@pytest.fixture
def tiny_learner():
    return mt.init_model(mt.MtpinnConfig(**TINY_NET), seed=0)

TINY_META = {"k_support": 10, "n_ite": 2, "m_query": 20, "meta_iterations": 3}
TINY_EXPERIMENT = {
    **SMALL_POOL,
    "detector_counts": [10],
    "repetitions": 2,
    "held_out": 3,
    "models": list(hs.MODELS),
    "mtpinn": TINY_NET,
    "meta": TINY_META,
    "pretrain": {"epochs": 2},
}


@pytest.fixture(scope="session")
def tiny_report():
    """Every model on two repetitions of the small pool at n=10."""
    return hs.run_experiment(dict(TINY_EXPERIMENT))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.VERDICTS):
        terminalreporter.write_line(line)
