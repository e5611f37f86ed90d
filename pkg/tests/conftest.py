"""Shared fixtures for the test suite."""

from __future__ import annotations

import sys

import numpy as np
import pytest

import synthdata
from dlmgrad.cli import main


@pytest.fixture(scope="session")
def small_fit(tmp_path_factory):
    """A completed two-population fit reused by the command tests.

    Returns the output directory and the path of the input csv.
    """
    root = tmp_path_factory.mktemp("fit")
    data = root / "table.csv"
    ages = np.arange(1, 21)
    y = np.stack(
        [
            synthdata.declining_curve(ages, -4.8, -0.04),
            synthdata.declining_curve(ages, -5.2, -0.03),
        ]
    )
    rng = np.random.default_rng(7)
    y = y + 0.03 * rng.standard_normal(y.shape)
    table = synthdata.table_from_log_rates(("men", "women"), ages, y)
    synthdata.write_table_csv(data, table)
    out = root / "run"
    code = main(
        [
            "fit",
            "--data",
            str(data),
            "--out",
            str(out),
            "--seed",
            "11",
            "--iterations",
            "160",
            "--burn-in",
            "40",
        ]
    )
    assert code == 0
    return out, data


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance checklist lines that capture swallowed."""
    module = sys.modules.get("test_acceptance")
    if module is None:
        return
    lines = list(module.REPORT_LINES)
    for report in terminalreporter.stats.get("skipped", ()):
        nodeid = getattr(report, "nodeid", "")
        if "test_acceptance.py::test_criterion_" not in nodeid:
            continue
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        reason = reason.removeprefix("Skipped: ")
        tail = nodeid.rsplit("::", 1)[1].removeprefix("test_criterion_")
        num, _, title = tail.partition("_")
        lines.append(f"criterion {num} ({title.replace('_', ' ')}): SKIP - {reason}")
    if lines:
        terminalreporter.section("acceptance report")
        for line in lines:
            terminalreporter.write_line(line)
