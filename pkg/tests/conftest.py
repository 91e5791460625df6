import numpy as np
import pytest

from chipnet.synthetic import wedge_dataset
from chipnet.train import train_toy


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_dataset():
    return wedge_dataset(200, seed=0)


@pytest.fixture(scope="session")
def trained_toy(toy_dataset):
    """Two-stage desk recipe: 30 float epochs, then 10 quantized fine-tune epochs at 18 bits."""
    import time

    t0 = time.perf_counter()
    stage1 = train_toy(toy_dataset, 30, seed=0)
    stage2 = train_toy(toy_dataset, 10, quantized=True, net=stage1.network, seed=1)
    return {"float": stage1, "quantized": stage2, "seconds": time.perf_counter() - t0}


_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
    if call.when == "call" or failed:
        prev = _criteria.get(number, (title, True))[1]
        _criteria[number] = (title, prev and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}")
