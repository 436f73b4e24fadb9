import logging

import numpy as np
import pytest
import torch

from cardioscope.phantom import PhantomParams, generate_cohort

torch.set_num_threads(1)
logging.getLogger("cardioscope").setLevel(logging.WARNING)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """Twelve default 64^3 phantoms on disk, shared across tests."""
    out = tmp_path_factory.mktemp("cohort")
    return generate_cohort(12, PhantomParams(), seed=3, out_dir=out)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """One finished ``run-all`` on the built-in tiny config; treat as read-only."""
    from cardioscope.cli import main

    root = tmp_path_factory.mktemp("tiny") / "run"
    assert main(["run-all", "-c", "tiny", "-w", str(root)]) == 0
    return root


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
