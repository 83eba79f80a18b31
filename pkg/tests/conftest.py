import numpy as np
import pytest
from hypothesis import settings

from loopflow import benchmarks
from loopflow.topology import build_spanning_tree, trace_loops

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture(scope="session")
def desk34():
    net = benchmarks.desk34()
    tree = build_spanning_tree(net)
    return net, tree, trace_loops(tree, net)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def detail(request):
    """Collects one-line findings for the criterion under test."""
    notes = []
    request.node.stash[_CRITERIA] = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    notes = item.stash.get(_CRITERIA, [])
    if rep.failed and call.excinfo is not None:
        notes = notes + [str(call.excinfo.value).splitlines()[0][:160]]
    line = f"criterion {mark.args[0]:2d}: {'PASS' if rep.passed else 'FAIL'}  " + "; ".join(notes)
    item.config.stash[_CRITERIA][mark.args[0]] = line


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
