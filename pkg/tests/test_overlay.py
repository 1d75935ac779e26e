from __future__ import annotations

import hashlib
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_pair, open_pair
from qoverlay.errors import DeliveryFailed, DesyncError, InvalidInput, UnknownNode
from qoverlay.management import EventKind
from qoverlay.overlay import (
    BYTESTREAM,
    LOSSY,
    RELIABLE,
    SYNC,
    CipherMode,
    CircuitConfig,
    CircuitKind,
    State,
)
from qoverlay.overlay import crypto, wire
from qoverlay.qkd.keypool import audit_ledger


def flip_first_bit_tap(budget):
    """Adversary flipping one ciphertext bit in the first ``budget`` data frames."""
    hits = []

    def tap(msg, tick):
        if msg.channel_label != wire.DATA_LABEL or len(hits) >= budget:
            return None
        fr = wire.decode_frame(msg.payload)
        if fr.frame_type is not wire.FrameType.DATA or not fr.body:
            return None
        hits.append(fr.sequence_id)
        data = bytearray(msg.payload)
        data[wire.HEADER_BYTES] ^= 1
        return bytes(data)

    tap.hits = hits
    return tap


class TestConfig:
    def test_needs_refresh_trigger(self):
        with pytest.raises(InvalidInput):
            CircuitConfig(LOSSY, key_refresh_datagrams=None, key_refresh_ticks=None)
        CircuitConfig(SYNC, key_refresh_datagrams=None)

    def test_otp_region_bounds_datagram(self):
        with pytest.raises(InvalidInput):
            CircuitConfig(LOSSY, cipher_mode=CipherMode.ONE_TIME_PAD, max_datagram_bytes=100,
                          otp_region_bytes=50)

    @pytest.mark.parametrize("kind", list(CircuitKind))
    def test_json_roundtrip(self, kind):
        c = CircuitConfig(kind, key_refresh_ticks=7, cipher_mode="one_time_pad")
        assert CircuitConfig.from_json(c.to_json()) == c

    @pytest.mark.parametrize("kind", list(CircuitKind))
    def test_kind_codes(self, kind):
        assert CircuitKind.from_code(kind.code) is kind


class TestWire:
    @given(st.sampled_from(list(wire.FrameType)), st.integers(0, 255), st.integers(0, 2**64 - 1),
           st.integers(0, 2**64 - 1), st.integers(0, 2**32 - 1), st.binary(max_size=200),
           st.binary(min_size=16, max_size=16))
    def test_frame_roundtrip(self, ft, flags, cid, seq, epoch, body, tag):
        fr = wire.Frame(ft, 2, flags, cid, seq, epoch, 5, body, tag)
        assert wire.decode_frame(fr.encode()) == fr

    @given(st.sampled_from(list(wire.CtlType)), st.integers(0, 2**64 - 1), st.integers(0, 2**32 - 1),
           st.binary(max_size=64), st.booleans())
    def test_ctl_roundtrip(self, t, cid, rid, body, reply):
        c = wire.Ctl(t, cid, rid, body, reply)
        assert wire.decode_ctl(c.encode()) == c

    def test_header_layout(self):
        fr = wire.Frame(wire.FrameType.DATA, 3, 1, 0x0102, 7, 2, 9, b"xy", bytes(16))
        raw = fr.encode()
        assert wire.HEADER_BYTES == 31
        assert raw[:3] == bytes([1, 3, 1])
        assert int.from_bytes(raw[3:11], "little") == 0x0102
        assert int.from_bytes(raw[11:19], "little") == 7
        assert int.from_bytes(raw[19:23], "little") == 2
        assert int.from_bytes(raw[23:27], "little") == 9
        assert int.from_bytes(raw[27:31], "little") == 2
        assert raw[31:33] == b"xy" and len(raw) == 31 + 2 + 16

    @pytest.mark.parametrize("raw", [b"", bytes(50)])
    def test_decode_rejects(self, raw):
        with pytest.raises(InvalidInput):
            wire.decode_frame(raw)

    def test_keystream_definition(self):
        seed = bytes(range(32))
        expect = hashlib.shake_256(seed + (5).to_bytes(8, "little") + (9).to_bytes(8, "little")).digest(40)
        assert crypto.keystream(seed, 5, 9, 40) == expect

    def test_tag_detects_change(self):
        k = bytes(32)
        t = crypto.tag(k, b"head", b"body")
        assert crypto.verify(k, t, b"head", b"body")
        assert not crypto.verify(k, t, b"head", b"bodz")


class TestOpen:
    def test_both_ends_epoch_zero(self):
        rt, link, a, b = open_pair(CircuitConfig(LOSSY))
        assert a.circuit_id == b.circuit_id and a.kind is b.kind is LOSSY
        assert a.epoch == b.epoch == 0 and a.state is b.state is State.OPEN

    def test_unknown_peer(self, pair):
        rt, _ = pair
        with pytest.raises(UnknownNode):
            rt.open_circuit("A", "Z", CircuitConfig(LOSSY))

    def test_empty_pool_runs_session_first(self):
        rt, link = make_pair()
        pool = link.pools["A"]
        assert pool.session_counter == 0
        config = CircuitConfig(RELIABLE)
        rt.open_circuit("A", "B", config)
        assert pool.session_counter >= 1
        # Pool accounting: material equals distilled output, one epoch consumed,
        # and the first open leaves at least the watermark behind.
        distilled = sum(o.distilled_bits for o in link.history if o.ok) // 8
        assert len(pool.material) == distilled
        assert pool.consumed_bytes("circuit:") == config.epoch_bytes()
        assert pool.available >= pool.low_watermark
        assert link.pools["B"].material == pool.material

    def test_wrong_kind_operations(self):
        rt, link, a, b = open_pair(CircuitConfig(LOSSY))
        with pytest.raises(InvalidInput):
            a.send_reliable(b"x")
        with pytest.raises(InvalidInput):
            a.stream_write(b"x")
        with pytest.raises(InvalidInput):
            a.sync_random(8)

    def test_oversize(self):
        rt, link, a, b = open_pair(CircuitConfig(LOSSY, max_datagram_bytes=8))
        with pytest.raises(InvalidInput):
            a.send_lossy(bytes(9))


class TestLossy:
    def test_lossless_delivery(self):
        rt, link, a, b = open_pair(CircuitConfig(LOSSY))
        r = a.send_lossy(b"payload")
        assert r.key_epoch == 0 and r.size == 7
        assert b.recv_all() == [b"payload"]

    def test_certain_drop_sender_succeeds(self):
        rt, link, a, b = open_pair(CircuitConfig(LOSSY))
        rt.network.set_down("A", "B")
        for _ in range(5):
            a.send_lossy(b"gone")
        rt.run_ticks(10)
        assert b.recv_all() == [] and a.stats.sent == 5

    def test_binomial_delivery(self):
        n, p = 10_000, 0.2
        rt, link, a, b = open_pair(CircuitConfig(LOSSY, key_refresh_datagrams=2000), drop=p, seed=21)
        payloads = [i.to_bytes(4, "little") for i in range(n)]
        for pl in payloads:
            a.send_lossy(pl)
        rt.run_ticks(50)
        got = b.recv_all()
        assert abs(len(got) - n * (1 - p)) <= 3 * math.sqrt(n * p * (1 - p))
        # At-most-once and authentic: every surfaced payload was sent, none twice.
        assert len(set(got)) == len(got) and set(got) <= set(payloads)

    def test_tampered_frames_discarded(self):
        rt, link, a, b = open_pair(CircuitConfig(LOSSY))
        tap = rt.network.add_tap(flip_first_bit_tap(10))
        for i in range(20):
            a.send_lossy(bytes([i]) * 4)
        got = b.recv_all()
        assert len(tap.hits) == 10 and b.stats.dropped == 10
        assert got == [bytes([i]) * 4 for i in range(10, 20)]


class TestReliable:
    def test_single_transmission(self):
        rt, link, a, b = open_pair(CircuitConfig(RELIABLE))
        c = a.send_reliable(b"hi")
        assert c.attempts == 1 and a.stats.retransmitted == 0 and a.stats.delivered == 1
        assert b.recv_all() == [b"hi"]

    def test_exactly_once_under_loss(self):
        rt, link, a, b = open_pair(CircuitConfig(RELIABLE, retransmit_limit=50), drop=0.3, seed=5)
        payloads = [i.to_bytes(2, "big") * 3 for i in range(1000)]
        items = [a.send_reliable(p, wait=False) for p in payloads]
        a.drain()
        assert all(it.done for it in items)
        got = b.recv_all()
        assert Counter(got) == Counter(payloads)
        assert a.stats.retransmitted > 0 and b.stats.dropped > 0

    def test_certain_drop_fails(self):
        events = []
        rt, link, a, b = open_pair(CircuitConfig(RELIABLE, retransmit_limit=5), emit=events.append)
        rt.network.set_down("A", "B")
        with pytest.raises(DeliveryFailed):
            a.send_reliable(b"x")
        assert a.stats.retransmitted == 4 and a.stats.failed == 1 and a.degraded
        assert [e.kind for e in events].count(EventKind.DELIVERY_FAILED) == 1

    def test_tamper_retransmitted(self):
        rt, link, a, b = open_pair(CircuitConfig(RELIABLE))
        tap = rt.network.add_tap(flip_first_bit_tap(3))
        a.send_reliable(b"secret")
        assert b.recv_all() == [b"secret"]
        assert tap.hits == [0, 0, 0] and b.stats.dropped == 3 and a.stats.retransmitted == 3


class TestBytestream:
    def test_hello_world(self):
        rt, link, a, b = open_pair(CircuitConfig(BYTESTREAM))
        a.stream_write(b"hello")
        a.stream_write(b"world")
        a.stream_close()
        a.drain()
        assert b.stream_read() == b"helloworld" and b.eof

    def test_megabyte_lossy_channel(self):
        data = np.random.default_rng(8).bytes(1 << 20)
        rt, link, a, b = open_pair(CircuitConfig(BYTESTREAM, max_datagram_bytes=4096, window=256,
                                                 retransmit_limit=50), drop=0.3, seed=8)
        a.stream_write(data)
        a.stream_close()
        a.drain()
        assert hashlib.sha256(b.stream_read()).digest() == hashlib.sha256(data).digest()

    def test_prefix_while_in_flight(self):
        data = bytes(range(256)) * 40
        rt, link, a, b = open_pair(CircuitConfig(BYTESTREAM, max_datagram_bytes=100), drop=0.3,
                                   latency=2, seed=2)
        a.stream_write(data)
        got = bytearray()
        while not a.idle:
            rt.run_ticks(1)
            got += b.stream_read()
            assert data.startswith(bytes(got))
        got += b.stream_read()
        assert bytes(got) == data

    def test_interleaved_directions(self):
        rt, link, a, b = open_pair(CircuitConfig(BYTESTREAM, max_datagram_bytes=16), drop=0.2, seed=4)
        ab, ba = bytearray(), bytearray()
        for i in range(30):
            x, y = f"a{i};".encode() * 3, f"b{i};".encode() * 2
            a.stream_write(x)
            b.stream_write(y)
            ab += x
            ba += y
        a.stream_close()
        b.stream_close()
        a.drain()
        b.drain()
        assert b.stream_read() == bytes(ab) and a.stream_read() == bytes(ba)

    def test_write_after_close(self):
        rt, link, a, b = open_pair(CircuitConfig(BYTESTREAM))
        a.stream_close()
        with pytest.raises(InvalidInput):
            a.stream_write(b"late")


def single_byte_pair(byte):
    rt, link = make_pair(low_watermark=0)
    for pool in link.pools.values():
        pool.append(bytes([byte]))
    return rt, link


class TestSync:
    def test_direct_pool_read(self):
        rt, link = single_byte_pair(0xAB)
        a = rt.open_circuit("A", "B", CircuitConfig(SYNC))
        b = rt.host("B").circuits[a.circuit_id]
        assert a.sync_random(8) == 0xAB
        assert b.sync_random(8) == 0xAB

    def test_thousand_paired_draws(self):
        rt, link, a, b = open_pair(CircuitConfig(SYNC))
        bits = np.random.default_rng(1).integers(1, 65, 1000)
        xs = [a.sync_random(int(n)) for n in bits]
        ys = [b.sync_random(int(n)) for n in bits]
        assert xs == ys
        assert all(0 <= x < 2 ** int(n) for x, n in zip(xs, bits))
        assert link.pools["A"].session_counter >= 2

    @given(st.lists(st.integers(1, 200), min_size=1, max_size=12), st.booleans())
    def test_equal_schedule_equal_values(self, schedule, interleave):
        rt, link, a, b = open_pair(CircuitConfig(SYNC, sync_region_bytes=64))
        if interleave:
            pairs = [(a.sync_random(n), b.sync_random(n)) for n in schedule]
            xs, ys = zip(*pairs)
        else:
            xs = [a.sync_random(n) for n in schedule]
            ys = [b.sync_random(n) for n in schedule]
        assert list(xs) == list(ys)

    def test_mismatched_widths_desync(self):
        events = []
        rt, link, a, b = open_pair(CircuitConfig(SYNC, echo_period=4), emit=events.append)
        for _ in range(4):
            a.sync_random(8)
        for _ in range(4):
            b.sync_random(16)
        # Offsets after call 4 differ (4 vs 8 bytes): the echo exposes it.
        with pytest.raises(DesyncError):
            a.sync_random(8)
        with pytest.raises(DesyncError):
            b.sync_random(16)
        assert EventKind.DESYNC in {e.kind for e in events}

    def test_zero_bits(self):
        rt, link, a, b = open_pair(CircuitConfig(SYNC))
        with pytest.raises(InvalidInput):
            a.sync_random(0)


class TestRefresh:
    def test_datagram_count_trigger(self):
        rt, link, a, b = open_pair(CircuitConfig(LOSSY, key_refresh_datagrams=10))
        for _ in range(9):
            a.send_lossy(b"x")
        rt.run_ticks(1)
        assert a.epoch == b.epoch == 0
        a.send_lossy(b"x")
        rt.run_ticks(1)
        assert a.epoch == b.epoch == 1

    def test_timer_trigger(self):
        events = []
        rt, link, a, b = open_pair(CircuitConfig(LOSSY, key_refresh_datagrams=None, key_refresh_ticks=100),
                                   emit=events.append)
        start = a.epoch_started
        rt.run_ticks(99 - (rt.now - start))
        assert a.epoch == 0
        rt.run_ticks(2)
        assert a.epoch == b.epoch == 1
        rolled = [e for e in events if e.kind is EventKind.EPOCH_ROLLED]
        assert rolled[0].tick == start + 100

    def test_explicit_refresh_both_ends(self):
        rt, link, a, b = open_pair(CircuitConfig(RELIABLE))
        assert a.refresh_key() == 1
        assert b.refresh_key() == 2
        assert a.epoch == b.epoch == 2

    def test_refresh_during_retransmission(self):
        rt, link, a, b = open_pair(CircuitConfig(RELIABLE, ack_timeout_ticks=20), latency=1)
        tap = rt.network.add_tap(flip_first_bit_tap(1))
        item = a.send_reliable(b"across", wait=False)
        assert a.refresh_key() == 1
        rt.run_until(lambda: item.settled)
        assert item.done and item.epoch == 0 and tap.hits == [0]
        assert a.stats.retransmitted == 1 and b.epoch == 1
        assert b.recv_all() == [b"across"]

    def test_failed_refresh_keeps_epoch(self):
        events = []
        rt, link, a, b = open_pair(CircuitConfig(RELIABLE), emit=events.append)
        rt.set_link_down(link)
        with pytest.raises(Exception):
            a.refresh_key()
        assert a.epoch == 0 and a.degraded
        assert EventKind.SESSION_ABORTED in {e.kind for e in events}
        rt.set_link_down(link, False)
        assert a.send_reliable(b"still works").key_epoch == 0


class TestKeyAccounting:
    def test_otp_ledger_across_uses(self):
        rt, link, a, b = open_pair(CircuitConfig(LOSSY, cipher_mode=CipherMode.ONE_TIME_PAD,
                                                 otp_region_bytes=256, max_datagram_bytes=64))
        s = rt.open_circuit("A", "B", CircuitConfig(SYNC, sync_region_bytes=32))
        t = rt.host("B").circuits[s.circuit_id]
        rng = np.random.default_rng(3)
        sent = 0
        for i in range(200):
            payload = rng.bytes(int(rng.integers(1, 65)))
            a.send_lossy(payload)
            sent += len(payload)
            if i % 10 == 0:
                assert s.sync_random(40) == t.sync_random(40)
            if i % 50 == 0:
                a.refresh_key()
        assert a.stats.pad_bytes_used == a.stats.plaintext_bytes_sent == sent
        assert a.stats.key_bytes_consumed >= sent
        for pool in link.pools.values():
            audit_ledger(pool.ledger)
        assert ([(e.offset, e.length) for e in link.pools["A"].ledger]
                == sorted((e.offset, e.length) for e in link.pools["B"].ledger))
        assert b.recv_all() and a.epoch > 3

    @given(st.lists(st.binary(min_size=1, max_size=32), min_size=1, max_size=30))
    def test_otp_never_reuses(self, payloads):
        rt, link, a, b = open_pair(CircuitConfig(RELIABLE, cipher_mode=CipherMode.ONE_TIME_PAD,
                                                 otp_region_bytes=48, max_datagram_bytes=32))
        for p in payloads:
            a.send_reliable(p)
        assert a.stats.pad_bytes_used == sum(map(len, payloads))
        assert b.recv_all() == payloads
        audit_ledger(link.pools["A"].ledger)

    def test_stats_monotone(self):
        rt, link, a, b = open_pair(CircuitConfig(RELIABLE), drop=0.2, seed=9)
        prev = a.snapshot()
        for i in range(50):
            a.send_reliable(bytes([i]))
            cur = a.snapshot()
            assert all(getattr(cur, f) >= getattr(prev, f) for f in vars(cur))
            prev = cur
