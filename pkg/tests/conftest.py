import numpy as np
import pytest

from lipmem import synthworld as sw


@pytest.fixture(scope="session")
def inventory():
    return sw.build_inventory(8, 17)


@pytest.fixture(scope="session")
def small_dataset(inventory):
    return sw.make_dataset(inventory, n_identities=4, n_utterances=20, utterance_len=6,
                           noise_scale=0.05, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for ac in sorted(results):
            terminalreporter.write_line(results[ac])
