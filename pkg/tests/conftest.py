"""Shared fixtures, hypothesis profile and the acceptance summary printer."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def record_criterion():
    """Store one acceptance verdict; printed as a block at the end of the session."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        _CRITERIA[number] = (title, bool(passed), detail)
        print(f"\nCRITERION {number:2d} {'PASS' if passed else 'FAIL'}  {title}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_phantoms():
    """Four 16^3 phantoms shared by the training, evaluation and CLI tests."""
    from xlstm_hved.data import generate_phantom_set
    return generate_phantom_set(4, seed=7, extent=(16, 16, 16))


@pytest.fixture(scope="session")
def tiny_dataset(tiny_phantoms):
    from xlstm_hved.training import TrainingSet
    return TrainingSet.from_volumes(tiny_phantoms)
