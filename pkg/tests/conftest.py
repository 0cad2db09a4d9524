import numpy as np
import pytest

from paanet.data import SynthSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def nuclei_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("nuclei")
    return generate(SynthSpec(style="nuclei", count=20, size=(32, 32), seed=3), root)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
