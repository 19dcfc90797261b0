import numpy as np
import pytest

from relaxcomm.transport import NetworkProfile, SimCluster


def run_cluster(n, fn, *args, nodes=None, profile=None, **kwargs):
    """Run ``fn(ep, *args)`` on every worker of a fresh simulated cluster."""
    cluster = SimCluster(n, nodes, profile)
    try:
        return cluster.run(fn, *args, **kwargs)
    finally:
        cluster.close()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def slow_net():
    return NetworkProfile.uniform(latency=1e-3, bandwidth=1e9)


# --- acceptance reporting --------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
