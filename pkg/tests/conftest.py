import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_data():
    from hybridvoco import synthdata
    return synthdata.make_dataset(128, 64, seed=3)


@pytest.fixture(scope="session")
def small_codebook(small_data):
    from hybridvoco import quantizer
    tr, _ = small_data
    return quantizer.fit_codebook(quantizer.extract_batch(tr.images), K=8, iters=5, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
