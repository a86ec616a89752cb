import numpy as np
import pytest

from nemprice.market import Arc, MarketNetwork, PanelDataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_region_network():
    arcs = (Arc("ab", "A", "B", 100.0, 120.0), Arc("ba", "B", "A", 100.0, 80.0))
    return MarketNetwork(("A", "B"), arcs, (("ab", "ba"),))


def make_panel(network, T=48, seed=0, period="30min"):
    rng = np.random.default_rng(seed)
    r, A = network.r, len(network.arcs)
    ts = np.arange(T) * np.timedelta64(30 if period == "30min" else 60, "m") + np.datetime64("2020-01-01T00:00")
    price = rng.uniform(10, 100, (T, r))
    load = rng.uniform(1000, 2000, (T, r))
    flow = np.zeros((T, A))
    for fwd, rev in network.arc_pairs:
        i, j = network.arc_index(fwd), network.arc_index(rev)
        x = rng.uniform(-50, 50, T)
        flow[:, i] = np.maximum(x, 0)
        flow[:, j] = np.maximum(-x, 0)
    loss = rng.normal(0, 5, (T, r))
    return PanelDataset.build(network, ts, price, load, flow, loss)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, with the measured quantities the test recorded."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when != "call" and outcome != "error":
                continue
            name = nodeid.split("::test_criterion_")[1]
            number, _, label = name.partition("_")
            detail = "; ".join(f"{k}={v}" for k, v in getattr(rep, "user_properties", []))
            lines.append((int(number), f"criterion {int(number):2d} {'PASS' if outcome == 'passed' else 'FAIL'}  "
                                       f"{label}  {detail}".rstrip()))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
