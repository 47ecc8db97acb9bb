from pathlib import Path

import pytest

DATA = Path(__file__).resolve().parents[1] / "src" / "dllmsim" / "data"

_acceptance_lines = []


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def report_criterion():
    def report(line: str):
        _acceptance_lines.append(line)
        print(line)
    return report


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
