import numpy as np
import pytest

from impedscope.data_model import Category
from impedscope.preprocessing import prepare
from impedscope.synth import CohortSpec, generate_cohort


@pytest.fixture(scope="session")
def small_cohort():
    """Two-class cohort: 6 + 6 patients, two samples each, a single frame per sample."""
    spec = CohortSpec({Category.HEALTHY: 6, Category.CANCER: 6}, samples_per_patient=2,
                      seed=5, n_tests=1, n_bursts=1)
    return generate_cohort(spec)


@pytest.fixture(scope="session")
def small_prepared(small_cohort):
    return prepare(small_cohort)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")
    config.acceptance_lines = {}


def _criterion_line(number, title, ok, detail=""):
    return f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}: {title}" + (f" ({detail})" if detail else "")


@pytest.fixture
def acceptance(request):
    """Record the PASS/FAIL line of the test's ``criterion`` marker, then assert."""
    number, title = request.node.get_closest_marker("criterion").args

    def check(ok: bool, detail: str = ""):
        line = _criterion_line(number, title, ok, detail)
        request.config.acceptance_lines[number] = line
        print(line)
        assert ok, line
    return check


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    lines = item.config.acceptance_lines
    number, title = marker.args
    if rep.failed and number not in lines:
        # the criterion raised before reaching its check
        lines[number] = _criterion_line(number, title, False, f"error: {call.excinfo.typename}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines.items()):
            terminalreporter.write_line(line)
