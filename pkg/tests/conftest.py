import numpy as np
import pytest

from edgeguard import model as M
from edgeguard.pipeline import FeatureMatrix

# small widths keep exhaustive finite differences cheap
TOY = dict(input_dim=8, ae_hidden=6, bottleneck=4, cnn_filters=(3, 5), lstm_units=(3, 2), branch_dim=4,
           fusion_hidden=5)


@pytest.fixture
def toy_arch():
    return M.Architecture(**TOY)


def separable(n=400, dim=4, seed=0, gap=3.0):
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < 0.5).astype(np.int8)
    X = rng.normal(size=(n, dim))
    X[:, 0] += np.where(y == 1, gap, -gap)
    return FeatureMatrix(X, y, [f"x{i}" for i in range(dim)])


@pytest.fixture
def separable_data():
    return separable


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion, aggregated over its tests

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed and not report.skipped):
        return
    number, title = marker.args
    status = "FAIL" if report.failed else "SKIP" if report.skipped else "PASS"
    prev = _criteria.get(number, (title, None))[1]
    rank = {"FAIL": 2, "PASS": 1, "SKIP": 0}
    if prev is None or rank[status] > rank[prev]:
        _criteria[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d} {status:4s}  {title}")
