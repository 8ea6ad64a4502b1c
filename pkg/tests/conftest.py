import numpy as np
import pytest
import torch

from encscan.encoders import default_arch, make_encoder

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_encoder():
    """Untrained 16x16 encoder, cheap enough for exhaustive checks."""
    return make_encoder(default_arch(16, widths=(4, 8), pool="avgpool"), (16, 16, 3), seed=0)


@pytest.fixture
def images(rng):
    return rng.random((12, 16, 16, 3), dtype=np.float32)


_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdicts():
    """Acceptance tests append one PASS/FAIL line each; printed after the run."""
    return _VERDICTS


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
