"""BB84 key distillation: sifting, QBER estimation, reconciliation, amplification."""

from .keypool import KeyPool, KeyPoolSnapshot, LedgerEntry, audit_ledger
from .postprocess import (
    SiftedKey,
    amplified_length,
    binary_entropy,
    block_parities,
    estimate_qber,
    key_digest,
    privacy_amplify,
    reconcile,
    sift,
    toeplitz_hash,
)
from .session import QKD_LABEL, QkdLink, QkdOutcome, QkdSessionParams, Status, run_session

__all__ = [
    "KeyPool", "KeyPoolSnapshot", "LedgerEntry", "audit_ledger",
    "SiftedKey", "amplified_length", "binary_entropy", "block_parities", "estimate_qber",
    "key_digest", "privacy_amplify", "reconcile", "sift", "toeplitz_hash",
    "QKD_LABEL", "QkdLink", "QkdOutcome", "QkdSessionParams", "Status", "run_session",
]
