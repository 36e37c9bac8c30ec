import numpy as np
import pytest
import torch

from reversed_ae.model import Architecture, ReversedAutoEncoder


@pytest.fixture
def tiny_model():
    """D=4, 8x8 double-precision model for gradient checks."""
    torch.manual_seed(0)
    model = ReversedAutoEncoder(Architecture(image_size=(8, 8), depth=2, base_channels=2, latent_dim=4))
    return model.double()


@pytest.fixture
def small_model():
    torch.manual_seed(1)
    return ReversedAutoEncoder(Architecture(image_size=(32, 32), depth=3, base_channels=4, latent_dim=8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance lines are collected here and echoed in the terminal summary so
# they are visible even when output capture is on.
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_record():
    def record(number, ok, detail):
        line = f"ACCEPTANCE criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
