import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from semcs.backends import Backends
from semcs.config import RunConfig
from semcs.synthetic import disc_scene  # noqa: F401  (re-exported for tests)

FIXTURES = Path(__file__).parent / "fixtures"

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def seeded_config():
    return RunConfig(backend="seeded")


@pytest.fixture(scope="session")
def backends(seeded_config):
    return Backends(seeded_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scene():
    return disc_scene()


@pytest.fixture(autouse=True)
def _no_weights_dir(monkeypatch):
    monkeypatch.delenv("SEMCS_WEIGHTS_DIR", raising=False)
    yield


def pytest_report_header(config):
    return f"torch threads: {torch.get_num_threads()}, cpu count: {os.cpu_count()}"


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
