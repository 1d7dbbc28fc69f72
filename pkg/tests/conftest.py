import pytest

from faasfabric.clock import NS_PER_MS
from faasfabric.counters import Counters
from faasfabric.fabric import Fabric, FabricConfig
from faasfabric.mempool import OwnerRef, PoolRegistry


def make_fabric(nodes=("A", "B"), tenants=(1,), buffers=16, size=4096, **config):
    counters = Counters()
    registry = PoolRegistry(counters)
    fabric = Fabric(FabricConfig(**config), counters=counters)
    for node in nodes:
        fabric.add_node(node)
        for t in tenants:
            pool = registry.create_pool(t, node, buffers, size)
            registry.import_pool(registry.export_pool(pool), f"engine-{node}")
            fabric.register_memory(pool, node)
    return fabric, registry


def settle(fabric, ms=50):
    """Advance the virtual clock past connection setup."""
    fabric.clock.run(until=fabric.clock.now + ms * NS_PER_MS)


@pytest.fixture
def two_nodes():
    return make_fabric()


def engine(node):
    return OwnerRef.engine(node)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


_criteria: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    n, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    entry = _criteria.setdefault(n, [title, True, []])
    entry[1] &= rep.passed
    if detail:
        entry[2].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok, details = _criteria[n]
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}"
        if details:
            line += " (" + "; ".join(details) + ")"
        terminalreporter.write_line(line)
