"""Shared fixtures."""

from __future__ import annotations

import numpy as np
import pytest

from difunc import SolverConfig


@pytest.fixture
def tight() -> SolverConfig:
    return SolverConfig(tol=1e-13, rtol=1e-10, atol=1e-12)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# -- acceptance reporting: one PASS/FAIL line per criterion in the terminal summary
def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def criterion(request):
    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        request.config.acceptance_lines.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
