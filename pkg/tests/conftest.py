import os
from pathlib import Path

import pytest

from vflsim import data

_CANDIDATES = [Path(__file__).resolve().parents[1] / "data", Path.home() / "data"]


def mnist_root() -> Path | None:
    """MNIST IDX directory from $VFLSIM_DATA_DIR, else ./data or ~/data."""
    env = os.environ.get(data.DATA_DIR_ENV)
    roots = [Path(env)] if env else _CANDIDATES
    for root in roots:
        try:
            data.mnist_paths(root)
        except data.DataError:
            continue
        return root
    return None


@pytest.fixture(scope="session")
def mnist_dir():
    root = mnist_root()
    if root is None:
        pytest.skip(f"MNIST IDX files not found; set ${data.DATA_DIR_ENV}")
    return root


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    return data.load_mnist_binary(mnist_dir)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        terminalreporter.write_line(results[num])
