import os
from pathlib import Path

import pytest

from fxsoftmax import data

# fallback location used when MNIST_DIR is unset
FALLBACK_DIR = Path("/root/data/mnist")


def _mnist_dir():
    env = os.environ.get(data.DATA_DIR_ENV)
    candidate = Path(env) if env else FALLBACK_DIR
    return candidate if (candidate / "train-images-idx3-ubyte").exists() or (
        candidate / "train-images-idx3-ubyte.gz"
    ).exists() else None


@pytest.fixture(scope="session")
def mnist_dir():
    found = _mnist_dir()
    if found is None:
        pytest.skip(f"MNIST not found; set {data.DATA_DIR_ENV}")
    return found


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    return data.load_mnist(mnist_dir)


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
