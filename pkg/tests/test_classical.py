from __future__ import annotations

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from qoverlay.classical import ClassicalChannelParams, Message, Network
from qoverlay.errors import InvalidInput, UnknownNode


def net_ab(drop=0.0, latency=0, seed=0):
    net = Network()
    net.add_node("A")
    net.add_node("B")
    net.set_channel("A", "B", ClassicalChannelParams(drop, latency, seed))
    return net


class TestSend:
    def test_lossless_same_tick(self):
        net = net_ab()
        for i in range(20):
            net.post("A", "B", "x", bytes([i]))
        got = net.receive_all("B", "x")
        assert [m.payload for m in got] == [bytes([i]) for i in range(20)]

    def test_certain_drop(self):
        net = net_ab(drop=1.0)
        tickets = [net.post("A", "B", "x", b"p") for _ in range(50)]
        net.advance(10)
        assert all(t.dropped for t in tickets)
        assert net.receive("B", "x") is None

    def test_binomial_delivery(self):
        net = net_ab(drop=0.3, seed=4)
        for _ in range(10_000):
            net.post("A", "B", "x", b"")
        n = len(net.receive_all("B", "x"))
        assert abs(n - 7000) <= 3 * math.sqrt(10_000 * 0.3 * 0.7)

    def test_unknown_node(self):
        net = net_ab()
        with pytest.raises(UnknownNode):
            net.post("A", "Z", "x", b"")
        with pytest.raises(UnknownNode):
            net.receive("Z", "x")

    def test_self_send(self):
        with pytest.raises(InvalidInput):
            net_ab().post("A", "A", "x", b"")

    def test_message_ids_increase(self):
        net = net_ab()
        net.send(Message("A", "B", "x", b"", 5))
        with pytest.raises(InvalidInput):
            net.send(Message("A", "B", "x", b"", 5))
        assert net.post("A", "B", "x", b"").message_id == 6

    def test_channel_params_validation(self):
        with pytest.raises(InvalidInput):
            ClassicalChannelParams(drop_probability=1.5)
        with pytest.raises(InvalidInput):
            ClassicalChannelParams(latency_ticks=-1)


class TestReceive:
    def test_empty(self):
        assert net_ab().receive("B", "x") is None

    def test_fifo(self):
        net = net_ab(latency=2)
        net.post("A", "B", "x", b"A")
        net.post("A", "B", "x", b"B")
        net.advance(2)
        assert [m.payload for m in net.receive_all("B", "x")] == [b"A", b"B"]

    def test_mixed_latency(self):
        net = net_ab()
        net.send(Message("A", "B", "x", b"slow"), ClassicalChannelParams(0.0, 5))
        net.send(Message("A", "B", "x", b"fast"), ClassicalChannelParams(0.0, 0))
        assert net.receive("B", "x").payload == b"fast"
        assert net.receive("B", "x") is None
        net.advance(5)
        assert net.receive("B", "x").payload == b"slow"

    def test_latency_holds_message(self):
        net = net_ab(latency=3)
        net.post("A", "B", "x", b"m")
        net.advance(2)
        assert net.receive("B", "x") is None
        assert net.next_delivery_tick() == 3
        net.advance(1)
        assert net.receive("B", "x").payload == b"m"

    def test_labels_are_separate(self):
        net = net_ab()
        net.post("A", "B", "one", b"1")
        assert net.receive("B", "two") is None
        assert net.receive("B", "one").payload == b"1"

    def test_set_down(self):
        net = net_ab()
        net.set_down("A", "B")
        assert net.post("A", "B", "x", b"").dropped
        net.set_down("A", "B", False)
        assert not net.post("A", "B", "x", b"").dropped


class TestProperties:
    @given(payloads=st.lists(st.binary(max_size=64), max_size=30), latency=st.integers(0, 4))
    def test_integrity_and_fifo(self, payloads, latency):
        net = net_ab(latency=latency)
        for p in payloads:
            net.post("A", "B", "x", p)
        net.advance(latency)
        assert [m.payload for m in net.receive_all("B", "x")] == payloads

    @given(seed=st.integers(0, 2**63), drop=st.floats(0, 1))
    def test_deterministic(self, seed, drop):
        runs = []
        for _ in range(2):
            net = net_ab(drop=drop, seed=seed)
            runs.append([net.post("A", "B", "x", b"").dropped for _ in range(64)])
        assert runs[0] == runs[1]
