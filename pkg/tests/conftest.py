import os

import numpy as np
import pytest

from eisnn import tensor

ACCEPTANCE_LINES = []

MNIST_DIR = os.environ.get("EISNN_MNIST_DIR", "/root/data/mnist")
CIFAR_DIR = os.environ.get("EISNN_CIFAR10_DIR")


@pytest.fixture(autouse=True)
def _default_dtype():
    tensor.set_default_dtype(np.float64)
    yield
    tensor.set_default_dtype(np.float64)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
