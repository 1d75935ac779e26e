from __future__ import annotations

import pytest
from hypothesis import settings

from qoverlay.classical import ClassicalChannelParams, Network
from qoverlay.control import Controller, LinkSpec
from qoverlay.overlay import Runtime
from qoverlay.qkd import QkdLink
from qoverlay.quantum import QuantumLinkParams

settings.register_profile("ci", deadline=None, max_examples=40)
settings.load_profile("ci")


def make_pair(drop: float = 0.0, latency: int = 0, seed: int = 1, loss: float = 0.1,
              flip: float = 0.01, low_watermark: int = 256, **runtime_kw):
    """Runtime with nodes A and B joined by one link."""
    net = Network()
    for n in "AB":
        net.add_node(n)
    net.set_channel("A", "B", ClassicalChannelParams(drop, latency, seed))
    rt = Runtime(net, **runtime_kw)
    link = rt.add_link(QkdLink("A", "B", QuantumLinkParams(loss, flip, seed=seed),
                               low_watermark=low_watermark))
    return rt, link


def open_pair(config, **kw):
    rt, link = make_pair(**kw)
    a = rt.open_circuit("A", "B", config)
    b = rt.host("B").circuits[a.circuit_id]
    b.await_open()
    return rt, link, a, b


def make_chain(nodes, drop: float = 0.0, latency: int = 1, seed: int = 3, parallel: bool = False,
               **kw) -> Controller:
    """Controller with a linear chain of linked nodes; interior nodes are trusted."""
    ctl = Controller(parallel=parallel, **kw)
    for i, n in enumerate(nodes):
        ctl.add_node(n, trusted=0 < i < len(nodes) - 1)
    for i, (a, b) in enumerate(zip(nodes, nodes[1:])):
        ctl.configure_link(LinkSpec((a, b), QuantumLinkParams(0.1, 0.01, seed=seed + i),
                                    ClassicalChannelParams(drop, latency, seed + 100 + i)))
    return ctl


@pytest.fixture
def pair():
    return make_pair()


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
