import numpy as np
import pytest

from expath.kg import build_graph

CYCLE = "abcdef"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = marker.args
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        if rep.skipped and not detail:
            detail = str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else ""
        item.config._criteria[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        title, status, detail = criteria[number]
        line = f"criterion {number:2d} {status}: {title}"
        if detail:
            line += f" [{detail}]"
        terminalreporter.write_line(line)


def cycle_graph():
    """Six entities on a directed ring with a reverse relation."""
    train = [(CYCLE[i], "next", CYCLE[(i + 1) % 6]) for i in range(6)]
    train += [(CYCLE[(i + 1) % 6], "prev", CYCLE[i]) for i in range(6)]
    return build_graph(train, [], [])


def random_graph(seed, max_entities=200, max_relations=8, max_facts=2000, test_share=0.0):
    """Seeded random multigraph; optionally moves a share of facts to test."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, max_entities + 1))
    m = int(rng.integers(1, max_relations + 1))
    k = int(rng.integers(m, max_facts + 1))
    triples = set()
    for _ in range(k):
        h, t = rng.integers(0, n, size=2)
        if h != t:
            triples.add((f"e{h}", f"r{int(rng.integers(m))}", f"e{t}"))
    triples = sorted(triples)
    order = rng.permutation(len(triples))
    n_test = int(test_share * len(triples))
    test = [triples[i] for i in order[:n_test]]
    train = [triples[i] for i in order[n_test:]]
    return build_graph(train, [], test)


@pytest.fixture
def cycle_kg():
    return cycle_graph()
