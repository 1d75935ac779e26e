"""Classical post-processing of BB84 detections.

Bits travel as ``numpy.uint8`` arrays of 0/1 values. The hashing primitives
below are defined bit-exactly so both endpoints derive identical output:

* Toeplitz hash: a seed expands through SHAKE-256 into ``m + n - 1`` bits
  ``s`` (byte order, most significant bit first). The matrix entry is
  ``T[i][j] = s[i - j + n - 1]`` and output bit ``i`` is
  ``XOR_j T[i][j] & x[j]``.
* Key digest: BLAKE2b-64 keyed with a 16-byte key over
  ``u32-le(bit length) || packbits(bits)``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import InsufficientKey, InvalidInput, ReconciliationFailed
from ..quantum import DetectionRecord

DIGEST_BITS = 64


@dataclass
class SiftedKey:
    bits: np.ndarray
    source_indices: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        self.source_indices = np.asarray(self.source_indices, dtype=np.int64)
        if len(self.bits) != len(self.source_indices):
            raise InvalidInput("bits and source_indices differ in length")
        if len(self.source_indices) > 1 and np.any(np.diff(self.source_indices) <= 0):
            raise InvalidInput("source_indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.bits)


def sift_indices(sender_bases, receiver_bases, detected) -> np.ndarray:
    sender_bases = np.asarray(sender_bases)
    receiver_bases = np.asarray(receiver_bases)
    detected = np.asarray(detected, dtype=bool)
    if not len(sender_bases) == len(receiver_bases) == len(detected):
        raise InvalidInput("sender bases, receiver bases and detections differ in length")
    return np.flatnonzero(detected & (sender_bases == receiver_bases))


def sift(
    sender_bases: Sequence,
    sender_bits: Sequence[int],
    receiver_bases: Sequence,
    detections: Sequence[DetectionRecord],
) -> tuple[SiftedKey, SiftedKey]:
    """Keep the detected pulses whose bases agree, at both ends."""
    if not len(sender_bases) == len(sender_bits) == len(receiver_bases) == len(detections):
        raise InvalidInput("inputs to sift differ in length")
    detected = np.fromiter((not d.lost for d in detections), dtype=bool, count=len(detections))
    rx_bits = np.fromiter((d.bit or 0 for d in detections), dtype=np.uint8, count=len(detections))
    idx = sift_indices(
        np.asarray([int(b) for b in sender_bases]),
        np.asarray([int(b) for b in receiver_bases]),
        detected,
    )
    tx_bits = np.asarray(sender_bits, dtype=np.uint8)
    return SiftedKey(tx_bits[idx], idx), SiftedKey(rx_bits[idx], idx)


def estimate_qber(
    local: SiftedKey, sample_indices: Sequence[int], peer_bits: Sequence[int]
) -> tuple[float, SiftedKey]:
    """Error fraction on a disclosed sample and the key with the sample removed.

    ``sample_indices`` are pulse indices (a subset of ``local.source_indices``)
    and ``peer_bits`` the peer's disclosed values at those pulses.
    """
    sample = np.asarray(sample_indices, dtype=np.int64)
    peer = np.asarray(peer_bits, dtype=np.uint8)
    if len(sample) == 0:
        raise InvalidInput("empty QBER sample")
    if len(sample) != len(peer):
        raise InvalidInput("sample indices and peer bits differ in length")
    pos = np.searchsorted(local.source_indices, sample)
    if np.any(pos >= len(local)) or np.any(local.source_indices[np.minimum(pos, len(local) - 1)] != sample):
        raise InvalidInput("disclosed index not present in the sifted key")
    errors = int(np.count_nonzero(local.bits[pos] != peer))
    keep = np.ones(len(local), dtype=bool)
    keep[pos] = False
    return errors / len(sample), SiftedKey(local.bits[keep], local.source_indices[keep])


def block_parities(bits, block_size: int) -> np.ndarray:
    """Parity of each consecutive block; a short trailing block counts as a block."""
    if block_size <= 0:
        raise InvalidInput("block_size must be positive")
    bits = np.asarray(bits, dtype=np.uint8)
    n_blocks = -(-len(bits) // block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.uint8)
    padded[: len(bits)] = bits
    return (padded.reshape(n_blocks, block_size).sum(axis=1) & 1).astype(np.uint8)


def keep_blocks(bits, keep: np.ndarray, block_size: int) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8)
    block_of = np.arange(len(bits)) // block_size
    return bits[np.asarray(keep, dtype=bool)[block_of]]


def strip_parity_bits(bits, block_size: int) -> np.ndarray:
    """Drop the last bit of every block."""
    bits = np.asarray(bits, dtype=np.uint8)
    mask = np.ones(len(bits), dtype=bool)
    mask[block_size - 1 :: block_size] = False
    if len(bits) % block_size:
        mask[-1] = False
    return bits[mask]


def pass_permutation(n: int, seed: bytes, pass_index: int) -> np.ndarray:
    """Bit order for a reconciliation pass: identity first, then seeded shuffles."""
    if pass_index == 0:
        return np.arange(n)
    ss = np.random.SeedSequence([int.from_bytes(seed, "little"), pass_index])
    return np.random.default_rng(ss).permutation(n)


def parity_pass(bits, peer_parities, block_size: int, seed: bytes, pass_index: int):
    """One discard pass on the permuted key; returns (survivors, mismatched block count).

    Survivors keep the permuted order and lose the last bit of every kept
    block, which offsets the parity disclosed for it.
    """
    permuted = np.asarray(bits, dtype=np.uint8)[pass_permutation(len(bits), seed, pass_index)]
    keep = block_parities(permuted, block_size) == np.asarray(peer_parities, dtype=np.uint8)
    return strip_parity_bits(keep_blocks(permuted, keep, block_size), block_size), int(np.count_nonzero(~keep))


def key_digest(bits, key: bytes) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    h = hashlib.blake2b(key=key, digest_size=DIGEST_BITS // 8)
    h.update(len(bits).to_bytes(4, "little"))
    h.update(np.packbits(bits).tobytes())
    return h.digest()


def reconcile(
    alice_bits, bob_bits, block_size: int, digest_key: bytes = b"\x00" * 16
) -> tuple[np.ndarray, np.ndarray]:
    """Single-pass block-parity reconciliation between two local bit arrays.

    Blocks whose parities disagree are dropped at both ends; a keyed digest
    of the survivors must then agree or :class:`ReconciliationFailed` is
    raised. The networked session performs the same steps over the wire.
    """
    a = np.asarray(alice_bits, dtype=np.uint8)
    b = np.asarray(bob_bits, dtype=np.uint8)
    if len(a) != len(b):
        raise InvalidInput("keys to reconcile differ in length")
    keep = block_parities(a, block_size) == block_parities(b, block_size)
    a_out, b_out = keep_blocks(a, keep, block_size), keep_blocks(b, keep, block_size)
    if key_digest(a_out, digest_key) != key_digest(b_out, digest_key):
        raise ReconciliationFailed("reconciled keys still differ")
    return a_out, b_out


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def amplified_length(n: int, qber: float, safety_margin: int) -> int:
    """Bits kept by privacy amplification: ``floor(n(1 - 2 h2(q))) - margin``."""
    return max(0, math.floor(n * (1.0 - 2.0 * binary_entropy(qber))) - safety_margin)


def toeplitz_seed_bits(seed: bytes, count: int) -> np.ndarray:
    raw = hashlib.shake_256(seed).digest(-(-count // 8))
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:count]


def toeplitz_hash(bits, out_len: int, seed: bytes) -> np.ndarray:
    x = np.asarray(bits, dtype=np.uint8)
    n = len(x)
    if out_len <= 0 or n == 0:
        return np.zeros(0, dtype=np.uint8)
    s = toeplitz_seed_bits(seed, out_len + n - 1)
    # Row i of T dotted with x is entry i + n - 1 of the full convolution s * x.
    conv = np.convolve(s.astype(np.int32), x.astype(np.int32))
    return (conv[n - 1 : n - 1 + out_len] & 1).astype(np.uint8)


def privacy_amplify(bits, qber_estimate: float, safety_margin: int, seed: bytes) -> bytes:
    """Compress reconciled bits into distilled key bytes.

    The output length follows :func:`amplified_length`, rounded down to whole
    bytes. Raises :class:`InsufficientKey` when nothing would remain.
    """
    n = len(bits)
    m = amplified_length(n, qber_estimate, safety_margin) // 8 * 8
    if m == 0:
        raise InsufficientKey(f"{n} reconciled bits at qber {qber_estimate:.4f} leave no key")
    return np.packbits(toeplitz_hash(bits, m, seed)).tobytes()
