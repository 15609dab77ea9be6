"""Shared fixtures plus the acceptance-criteria summary hook."""

import os
from pathlib import Path

import numpy as np
import pytest

# criterion number -> (status, description); filled by tests/test_acceptance.py
CRITERIA: dict[int, tuple[str, str]] = {}


def record_criterion(n: int, desc: str, status: str) -> None:
    CRITERIA[n] = (status, desc)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, desc = CRITERIA[n]
        terminalreporter.write_line(f"[criterion {n}] {status}: {desc}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def mnist_dir() -> Path | None:
    """Directory holding the official IDX files, if any are around."""
    from stdac.harness import default_data_dir, find_idx_pair
    base = os.environ.get("STDAC_DATA", default_data_dir())
    if find_idx_pair(base, "mnist", "train") is not None:
        return Path(base)
    return None
