"""BB84 sessions run over a simulated quantum link and the classical network.

The sender (the link's first endpoint) drives a sequence of request/response
exchanges on the ``qkd-sift`` label; the receiver answers each request using
only its own detections and what it has been told. Both ends reach their
verdict independently, which is what the abort-symmetry tests check.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ..classical import Network
from ..errors import InsufficientKey, InvalidInput, SessionTimeout
from ..quantum import QuantumLinkParams, transmit
from . import wire
from .keypool import KeyPool
from .postprocess import (
    DIGEST_BITS,
    SiftedKey,
    block_parities,
    estimate_qber,
    key_digest,
    parity_pass,
    pass_permutation,
    privacy_amplify,
    sift_indices,
)
from .wire import MsgType, Reader, Writer

log = logging.getLogger(__name__)

QKD_LABEL = "qkd-sift"


class Status(str, enum.Enum):
    OK = "ok"
    ABORTED_QBER = "aborted_qber"
    ABORTED_INSUFFICIENT = "aborted_insufficient"


@dataclass(frozen=True)
class QkdSessionParams:
    pulse_count: int = 10_000
    sample_fraction: float = 0.1
    qber_abort_threshold: float = 0.11
    reconciliation_block_size: int = 16
    reconciliation_passes: int = 8
    privacy_safety_margin_bits: int = 64
    seed: int = 0
    rpc_timeout_ticks: int = 4
    max_attempts: int = 32
    min_distilled_bytes: int = 8

    def __post_init__(self):
        if not 0.0 < self.sample_fraction < 1.0:
            raise InvalidInput("sample_fraction must lie in (0, 1)")
        if not 0.0 < self.qber_abort_threshold < 1.0:
            raise InvalidInput("qber_abort_threshold must lie in (0, 1)")
        if self.reconciliation_block_size <= 0:
            raise InvalidInput("reconciliation_block_size must be positive")
        if self.reconciliation_passes < 1:
            raise InvalidInput("reconciliation_passes must be at least 1")
        if self.pulse_count < 16 * self.reconciliation_block_size:
            raise InvalidInput("pulse_count must be at least 16 x reconciliation_block_size")
        if self.privacy_safety_margin_bits < 0:
            raise InvalidInput("privacy_safety_margin_bits must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise InvalidInput("seed must be a 64-bit unsigned integer")


@dataclass
class QkdOutcome:
    status: Status
    qber_estimate: float
    distilled_bits: int
    sifted_bits: int = 0
    pulses: int = 0
    detail: str = ""
    peer: "QkdOutcome | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.status is Status.OK and self.distilled_bits <= 0:
            raise InvalidInput("an ok session must distil key")

    @property
    def ok(self) -> bool:
        return self.status is Status.OK

    @property
    def key_rate(self) -> float:
        return self.distilled_bits / self.pulses if self.pulses else 0.0


def _sample_size(sifted: int, fraction: float) -> int:
    return min(sifted, max(1, round(fraction * sifted)))


def _final_material(reconciled: np.ndarray) -> np.ndarray:
    # The disclosed digest costs its length in key bits.
    return reconciled[: max(0, len(reconciled) - DIGEST_BITS)]


class _Receiver:
    """Receiver half of a session; sees only its detections and the wire."""

    def __init__(self, bases, detected, bits, params: QkdSessionParams, pool: KeyPool, pulses: int):
        self.bases = bases
        self.detected = detected
        self.bits = bits
        self.params = params
        self.pool = pool
        self.key: SiftedKey | None = None
        self.qber = 0.0
        self.reconciled: np.ndarray | None = None
        self.pending: bytes | None = None
        self.outcome = QkdOutcome(Status.ABORTED_INSUFFICIENT, 0.0, 0, pulses=pulses,
                                  detail="incomplete")

    def handle(self, rec: wire.Record) -> bytes:
        r = Reader(rec.payload)
        p = self.params
        if rec.msg_type is MsgType.SIFT:
            sender_bases = r.bits()
            idx = sift_indices(sender_bases, self.bases, self.detected)
            self.key = SiftedKey(self.bits[idx], idx)
            self.outcome.sifted_bits = len(idx)
            if len(idx) == 0:
                self.outcome.detail = "nothing sifted"
            return Writer().bits(self.detected.astype(np.uint8)).bits(self.bases).getvalue()
        if rec.msg_type is MsgType.SAMPLE:
            sample = r.u32s()
            sender_bits = r.bits()
            pos = np.searchsorted(self.key.source_indices, sample)
            mine = self.key.bits[pos]
            self.qber, self.key = estimate_qber(self.key, sample, sender_bits)
            self.outcome.qber_estimate = self.qber
            if self.qber > p.qber_abort_threshold:
                self.outcome.status = Status.ABORTED_QBER
                self.outcome.detail = "qber above threshold"
            return Writer().bits(mine).getvalue()
        if rec.msg_type is MsgType.PARITY:
            pass_index, seed, sender_par = r.u8(), r.raw(16), r.bits()
            bits = self.key.bits if self.reconciled is None else self.reconciled
            order = pass_permutation(len(bits), seed, pass_index)
            mine = block_parities(bits[order], p.reconciliation_block_size)
            self.reconciled, _ = parity_pass(bits, sender_par, p.reconciliation_block_size,
                                             seed, pass_index)
            return Writer().bits(mine).getvalue()
        if rec.msg_type is MsgType.VERIFY:
            digest_key, sender_digest, pa_seed = r.raw(16), r.raw(8), r.raw(32)
            mine = key_digest(self.reconciled, digest_key)
            if mine != sender_digest:
                self.outcome.detail = "reconciliation_failed"
            else:
                try:
                    self.pending = privacy_amplify(
                        _final_material(self.reconciled),
                        self.qber, p.privacy_safety_margin_bits, pa_seed,
                    )
                    if len(self.pending) < p.min_distilled_bytes:
                        self.pending = None
                        self.outcome.detail = "distilled key too short"
                except InsufficientKey:
                    self.outcome.detail = "distilled key too short"
            return Writer().raw(mine).getvalue()
        if rec.msg_type is MsgType.COMMIT:
            n = r.u32()
            accepted = self.pending is not None and len(self.pending) == n
            if accepted:
                self.pool.append(self.pending)
                self.outcome.status = Status.OK
                self.outcome.distilled_bits = 8 * n
                self.outcome.detail = ""
                self.pending = None
            return Writer().u8(int(accepted)).getvalue()
        raise InvalidInput(f"unexpected qkd message {rec.msg_type!r}")


class _Exchange:
    """Stop-and-wait request/response with retransmission over the network."""

    def __init__(self, network: Network, src: str, dst: str, session_id: int,
                 responder: _Receiver, advance: Callable[[], None],
                 timeout: int, attempts: int):
        self.network = network
        self.src, self.dst = src, dst
        self.session_id = session_id & 0xFFFFFFFF
        self.responder = responder
        self.advance = advance
        self.timeout = timeout
        self.attempts = attempts
        self._rid = 0
        self._replies: dict[int, bytes] = {}

    def _serve(self) -> None:
        for msg in self.network.receive_all(self.dst, QKD_LABEL):
            if msg.source != self.src:
                continue
            rec = wire.decode(msg.payload)
            if rec.response or rec.session_id != self.session_id:
                continue
            if rec.request_id not in self._replies:
                body = self.responder.handle(rec)
                self._replies[rec.request_id] = wire.encode(
                    wire.Record(rec.msg_type, self.session_id, rec.request_id, body, True))
            self.network.post(self.dst, self.src, QKD_LABEL, self._replies[rec.request_id])

    def call(self, msg_type: MsgType, payload: bytes) -> Reader:
        self._rid += 1
        frame = wire.encode(wire.Record(msg_type, self.session_id, self._rid, payload))
        for _ in range(self.attempts):
            self.network.post(self.src, self.dst, QKD_LABEL, frame)
            deadline = self.network.now + self.timeout
            while True:
                self._serve()
                for msg in self.network.receive_all(self.src, QKD_LABEL):
                    if msg.source != self.dst:
                        continue
                    rec = wire.decode(msg.payload)
                    if rec.response and rec.session_id == self.session_id and rec.request_id == self._rid:
                        return Reader(rec.payload)
                if self.network.now >= deadline:
                    break
                self.advance()
        raise SessionTimeout(
            f"no answer from {self.dst} to {msg_type.name} after {self.attempts} attempts")


def run_session(
    quantum: QuantumLinkParams,
    network: Network,
    sender: str,
    receiver: str,
    sender_pool: KeyPool,
    receiver_pool: KeyPool,
    params: QkdSessionParams,
    session_index: int = 0,
    advance: Callable[[], None] | None = None,
) -> QkdOutcome:
    """Run one BB84 session and append the distilled key to both pools.

    Returns the sender's outcome; ``outcome.peer`` holds the receiver's
    independently reached verdict.
    """
    advance = advance or (lambda: network.advance(1))
    n = params.pulse_count
    rng_tx = np.random.default_rng(np.random.SeedSequence([params.seed, session_index, 0]))
    rng_rx = np.random.default_rng(np.random.SeedSequence([params.seed, session_index, 1]))
    tx_bases = rng_tx.integers(0, 2, n, dtype=np.uint8)
    tx_bits = rng_tx.integers(0, 2, n, dtype=np.uint8)
    rx_bases = rng_rx.integers(0, 2, n, dtype=np.uint8)
    det = transmit(tx_bases, tx_bits, rx_bases, quantum, stream=session_index)

    bob = _Receiver(rx_bases, det.detected, det.bits, params, receiver_pool, n)
    latency = network.channel_params(sender, receiver).latency_ticks
    rpc = _Exchange(network, sender, receiver, session_index, bob, advance,
                    max(params.rpc_timeout_ticks, 2 * latency + 1), params.max_attempts)
    block = params.reconciliation_block_size

    def finish(status: Status, qber: float, bits: int, sifted: int, detail: str = "") -> QkdOutcome:
        out = QkdOutcome(status, qber, bits, sifted, n, detail, peer=bob.outcome)
        log.debug("qkd session %s-%s #%d: %s qber=%.4f bits=%d", sender, receiver,
                  session_index, status.value, qber, bits)
        return out

    r = rpc.call(MsgType.SIFT, Writer().bits(tx_bases).getvalue())
    detected, peer_bases = r.bits().astype(bool), r.bits()
    idx = sift_indices(tx_bases, peer_bases, detected)
    key = SiftedKey(tx_bits[idx], idx)
    sifted = len(key)
    if sifted == 0:
        bob.outcome.detail = "nothing sifted"
        return finish(Status.ABORTED_INSUFFICIENT, 0.0, 0, 0, "nothing sifted")

    k = _sample_size(sifted, params.sample_fraction)
    sample = np.sort(rng_tx.choice(key.source_indices, size=k, replace=False))
    mine = key.bits[np.searchsorted(key.source_indices, sample)]
    r = rpc.call(MsgType.SAMPLE, Writer().u32s(sample).bits(mine).getvalue())
    qber, key = estimate_qber(key, sample, r.bits())
    if qber > params.qber_abort_threshold:
        return finish(Status.ABORTED_QBER, qber, 0, sifted, "qber above threshold")

    # Discard passes repeat on reshuffled survivors until one finds no
    # mismatched block; the digest check below catches any even residue.
    reconciled = key.bits
    for pass_index in range(params.reconciliation_passes):
        perm_seed = rng_tx.bytes(16)
        parities = block_parities(reconciled[pass_permutation(len(reconciled), perm_seed, pass_index)], block)
        r = rpc.call(MsgType.PARITY,
                     Writer().u8(pass_index).raw(perm_seed).bits(parities).getvalue())
        reconciled, mismatched = parity_pass(reconciled, r.bits(), block, perm_seed, pass_index)
        if mismatched == 0:
            break

    digest_key, pa_seed = rng_tx.bytes(16), rng_tx.bytes(32)
    digest = key_digest(reconciled, digest_key)
    r = rpc.call(MsgType.VERIFY, Writer().raw(digest_key).raw(digest).raw(pa_seed).getvalue())
    if r.raw(8) != digest:
        return finish(Status.ABORTED_INSUFFICIENT, qber, 0, sifted, "reconciliation_failed")
    try:
        distilled = privacy_amplify(_final_material(reconciled), qber,
                                    params.privacy_safety_margin_bits, pa_seed)
    except InsufficientKey:
        distilled = b""
    if len(distilled) < params.min_distilled_bytes:
        return finish(Status.ABORTED_INSUFFICIENT, qber, 0, sifted, "distilled key too short")

    r = rpc.call(MsgType.COMMIT, Writer().u32(len(distilled)).getvalue())
    if not r.u8():
        return finish(Status.ABORTED_INSUFFICIENT, qber, 0, sifted, "peer refused commit")
    sender_pool.append(distilled)
    return finish(Status.OK, qber, 8 * len(distilled), sifted)


class QkdLink:
    """A quantum link with its two key pools and session bookkeeping.

    The first endpoint is the pool master: it runs sessions as the sender and
    allocates every range later consumed from the pools.
    """

    def __init__(self, a: str, b: str, quantum: QuantumLinkParams,
                 params: QkdSessionParams | None = None, low_watermark: int = 256):
        if a == b:
            raise InvalidInput("link endpoints must differ")
        self.a, self.b = a, b
        self.quantum = quantum
        self.params = params or QkdSessionParams(seed=quantum.seed)
        self.pools = {a: KeyPool(low_watermark), b: KeyPool(low_watermark)}
        self.attempts = 0
        self.history: list[QkdOutcome] = []
        self.last_qber: float | None = None

    @property
    def master(self) -> str:
        return self.a

    def peer_of(self, node: str) -> str:
        return self.b if node == self.a else self.a

    def run_session(self, network: Network, advance: Callable[[], None] | None = None,
                    pulse_count: int | None = None) -> QkdOutcome:
        params = self.params if pulse_count is None else replace(self.params, pulse_count=pulse_count)
        index = self.attempts
        self.attempts += 1
        out = run_session(self.quantum, network, self.a, self.b, self.pools[self.a],
                          self.pools[self.b], params, session_index=index, advance=advance)
        self.history.append(out)
        if out.sifted_bits:
            self.last_qber = out.qber_estimate
        return out
