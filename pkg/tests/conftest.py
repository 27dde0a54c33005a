"""
Shared pytest configuration.

End-to-end tests that train models are marked ``slow`` and only run with
``--run-slow``.
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption("--run-slow", action="store_true", default=False, help="Run slow end-to-end tests")


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line("markers", "slow: trains models end to end (enable with --run-slow)")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
