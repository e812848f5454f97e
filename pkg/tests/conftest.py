import numpy as np
import pytest

from sfa_lab.data import Dataset, synthetic_gaussian_tasks
from sfa_lab.nnet import MlpSpec, init_params


@pytest.fixture
def small_task():
    """A 3-class, 4-feature problem for a [4, 8, 3] net."""
    rng = np.random.default_rng(42)
    means = rng.uniform(-2, 2, size=(3, 4))
    y = rng.integers(0, 3, size=120)
    return Dataset(means[y] + 0.8 * rng.standard_normal((120, 4)), y, 3)


@pytest.fixture
def small_net():
    return init_params(MlpSpec((4, 8, 3)), 5)


@pytest.fixture(scope="session")
def synthetic_stream():
    return synthetic_gaussian_tasks(3, num_tasks=3, classes_per_task=3, dim=8, n_per_class=40, separation=6.0)


# -- acceptance report -------------------------------------------------------------

_criteria: dict[str, tuple] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion implemented by the test")


@pytest.fixture(autouse=True)
def _criterion_tag(request, record_property):
    mark = request.node.get_closest_marker("criterion")
    if mark is not None:
        record_property("criterion", mark.args[0])


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props or not (report.when == "call" or report.failed):
        return
    name = report.nodeid.split("::")[-1]
    _criteria[report.nodeid] = (props["criterion"], name, report.passed, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for crit, name, ok, detail in sorted(_criteria.values()):
        label = crit if crit == "supplementary" else f"criterion {crit}"
        line = f"{label:<14} {'PASS' if ok else 'FAIL'}  {name}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
