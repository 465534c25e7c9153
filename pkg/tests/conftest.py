import numpy as np
import pytest

from wdmqkd.core import LinkConfig, NetworkConfig, ProtocolConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def link():
    return LinkConfig(wavelength_label="1550")


def small_network(labels=("1550", "1549"), block=100_000, **link_kw) -> NetworkConfig:
    """A fast network: short alignment and chunks, small blocks, dead-time limited click rate."""
    link_kw.setdefault("channel_loss_db", 6.0)
    links = tuple(LinkConfig(wavelength_label=lab, seed=i + 1, **link_kw) for i, lab in enumerate(labels))
    return NetworkConfig(
        links=links,
        protocol=ProtocolConfig(block_size_sifted=block, sync_prefix_rounds=2_000_000),
        alignment_time=1.0,
        chunk_time=10.0,
    )


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    outcome: dict[int, bool] = {}
    for status in ("passed", "failed", "error", "xfailed", "xpassed", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            if status == "passed" and rep.when == "setup":
                continue
            k = int(nodeid.split("test_criterion_")[1].split("_")[0])
            outcome[k] = outcome.get(k, True) and status == "passed"
    if outcome:
        terminalreporter.section("acceptance criteria")
        for k in sorted(outcome):
            terminalreporter.write_line(f"criterion {k}: {'PASS' if outcome[k] else 'FAIL'}")
