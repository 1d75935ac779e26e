"""Secure circuits over QKD key pools: the four data-plane abstractions."""

from .circuit import CircuitEnd, Confirmation, EpochKeys, Outgoing, SendReceipt, State
from .config import (
    BYTESTREAM,
    LOSSY,
    RELIABLE,
    SYNC,
    CipherMode,
    CircuitConfig,
    CircuitKind,
    CircuitStats,
)
from .runtime import Host, Runtime

CircuitHandle = CircuitEnd

__all__ = [
    "BYTESTREAM", "LOSSY", "RELIABLE", "SYNC", "CipherMode", "CircuitConfig", "CircuitEnd",
    "CircuitHandle", "CircuitKind", "CircuitStats", "Confirmation", "EpochKeys", "Host",
    "Outgoing", "Runtime", "SendReceipt", "State",
]
