import numpy as np
import pytest

from cagnet_sim.gnn_reference import init_glorot
from cagnet_sim.rng import make_rng
from cagnet_sim.sparse_core import build_dataset, generate_erdos_renyi


def make_dataset(n=16, d=8, seed=1, f0=16, classes=4, undirected=False, train_every=1):
    raw = generate_erdos_renyi(n, min(d, n - 1), seed, undirected=undirected)
    rng = make_rng(seed + 100)
    mask = np.zeros(n, dtype=bool)
    mask[::train_every] = True
    return build_dataset(raw, rng.standard_normal((n, f0)), rng.integers(0, classes, n), mask)


def rel(a, b):
    ref = np.linalg.norm(b)
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / (ref if ref else 1.0)


@pytest.fixture
def small_problem():
    ds = make_dataset(n=16, d=4, seed=3)
    return ds, init_glorot((16, 8, 4), seed=5, learning_rate=0.5)


# One summary line per acceptance criterion, printed after the run.
_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    detail = getattr(item, "criterion_detail", "")
    _criteria[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, verdict, detail = _criteria[number]
        line = f"criterion {number:>2} [{verdict}] {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)


@pytest.fixture
def detail(request):
    """Attach a one-line measurement summary to the criterion report."""

    def record(text: str) -> None:
        request.node.criterion_detail = text
        print(text)

    return record
