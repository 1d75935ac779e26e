"""Pulse-level model of a qubit-carrying link.

Each pulse is lost with ``loss_probability``; a surviving pulse may be
intercepted and re-prepared by an intercept-resend adversary, then measured
by the receiver. Matched-basis measurements reproduce the pulse bit (flipped
with ``flip_probability``); mismatched-basis measurements are uniform.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInput


class Basis(enum.IntEnum):
    RECTILINEAR = 0
    DIAGONAL = 1


class Eavesdropper(str, enum.Enum):
    NONE = "none"
    INTERCEPT_RESEND = "intercept_resend"


@dataclass(frozen=True)
class QubitSymbol:
    basis: Basis
    bit: int

    def __post_init__(self):
        if self.bit not in (0, 1):
            raise InvalidInput(f"bit must be 0 or 1, got {self.bit!r}")
        object.__setattr__(self, "basis", Basis(self.basis))


@dataclass(frozen=True)
class QuantumLinkParams:
    loss_probability: float = 0.1
    flip_probability: float = 0.01
    eavesdropper: Eavesdropper = Eavesdropper.NONE
    seed: int = 0

    def __post_init__(self):
        for name in ("loss_probability", "flip_probability"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidInput(f"{name} must lie in [0, 1], got {value}")
        if not 0 <= self.seed < 2**64:
            raise InvalidInput("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "eavesdropper", Eavesdropper(self.eavesdropper))


@dataclass(frozen=True)
class DetectionRecord:
    pulse_index: int
    bit: int | None  # None means the pulse was lost

    @property
    def lost(self) -> bool:
        return self.bit is None


class Detections(NamedTuple):
    """Array form of a transmission: ``detected[i]`` false means pulse i was lost."""

    detected: np.ndarray
    bits: np.ndarray


def transmit(
    sender_bases: np.ndarray,
    sender_bits: np.ndarray,
    receiver_bases: np.ndarray,
    params: QuantumLinkParams,
    stream: int = 0,
) -> Detections:
    """Vectorised transmission of a pulse train.

    ``stream`` selects an independent random stream under the same link seed,
    so successive sessions on one link do not replay each other's noise.
    Lost pulses carry bit 0 in ``bits``; consult ``detected``.
    """
    sender_bases = np.asarray(sender_bases, dtype=np.uint8)
    sender_bits = np.asarray(sender_bits, dtype=np.uint8)
    receiver_bases = np.asarray(receiver_bases, dtype=np.uint8)
    n = len(sender_bases)
    if len(sender_bits) != n or len(receiver_bases) != n:
        raise InvalidInput(
            f"length mismatch: {n} bases, {len(sender_bits)} bits, "
            f"{len(receiver_bases)} receiver bases"
        )

    loss_ss, eve_ss, flip_ss, coin_ss = np.random.SeedSequence(
        [params.seed, stream]
    ).spawn(4)
    # Every stream is drawn for all pulses so raising a probability only ever
    # enlarges the affected set under a fixed seed.
    detected = np.random.default_rng(loss_ss).random(n) >= params.loss_probability

    pulse_bases = sender_bases
    pulse_bits = sender_bits
    if params.eavesdropper is Eavesdropper.INTERCEPT_RESEND:
        eve_rng = np.random.default_rng(eve_ss)
        eve_bases = eve_rng.integers(0, 2, n, dtype=np.uint8)
        eve_coins = eve_rng.integers(0, 2, n, dtype=np.uint8)
        eve_bits = np.where(eve_bases == sender_bases, sender_bits, eve_coins)
        pulse_bases, pulse_bits = eve_bases, eve_bits.astype(np.uint8)

    flips = np.random.default_rng(flip_ss).random(n) < params.flip_probability
    coins = np.random.default_rng(coin_ss).integers(0, 2, n, dtype=np.uint8)
    matched = receiver_bases == pulse_bases
    bits = np.where(matched, pulse_bits ^ flips.astype(np.uint8), coins)
    bits = np.where(detected, bits, 0).astype(np.uint8)
    return Detections(detected, bits)


def transmit_pulses(
    symbols: Sequence[QubitSymbol],
    receiver_bases: Sequence[Basis],
    params: QuantumLinkParams,
) -> list[DetectionRecord]:
    """Transmit prepared symbols and return one detection record per pulse."""
    if len(symbols) != len(receiver_bases):
        raise InvalidInput(
            f"{len(symbols)} symbols but {len(receiver_bases)} receiver bases"
        )
    bases = np.fromiter((int(s.basis) for s in symbols), dtype=np.uint8, count=len(symbols))
    bits = np.fromiter((s.bit for s in symbols), dtype=np.uint8, count=len(symbols))
    rx = np.fromiter((int(b) for b in receiver_bases), dtype=np.uint8, count=len(symbols))
    det = transmit(bases, bits, rx, params)
    return [
        DetectionRecord(i, int(det.bits[i]) if det.detected[i] else None)
        for i in range(len(symbols))
    ]
