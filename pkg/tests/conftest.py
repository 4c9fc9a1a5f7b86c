from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from storeshare.tariff import ToUSchedule, sce_tou_d_a  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def sce():
    return sce_tou_d_a()


@pytest.fixture
def two_tier():
    return ToUSchedule.from_rates(13, [], [52], 14)


@pytest.fixture
def rus():
    """Three-tier ramp-up schedule: off peak, partial peak, peak."""
    return ToUSchedule.from_rates(13, [28], [52], 14)


@pytest.fixture
def rds():
    """Three-tier ramp-down schedule: off peak, peak, partial peak."""
    return ToUSchedule.from_rates(13, [], [52, 28], 14)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
