import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from invcascade.cascade import ProposalCascade  # noqa: E402
from invcascade.synth import synth_generate  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    return synth_generate(7, 12)


@pytest.fixture(scope="session")
def fitted_cascade(small_synth):
    est = ProposalCascade(n_shapes=30)
    est.fit([s.maps for s in small_synth], [s.boxes for s in small_synth])
    return est
