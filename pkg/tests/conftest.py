import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from finrag.core import EngineConfig  # noqa: E402
from finrag.embed import HashEmbedder  # noqa: E402

# filled by tests/test_acceptance.py, printed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def embedder():
    return HashEmbedder(256)


@pytest.fixture
def config():
    return EngineConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
