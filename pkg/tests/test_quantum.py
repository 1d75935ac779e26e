from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qoverlay.errors import InvalidInput
from qoverlay.quantum import (
    Basis,
    Eavesdropper,
    QuantumLinkParams,
    QubitSymbol,
    transmit,
    transmit_pulses,
)


def random_train(n, seed):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, n, dtype=np.uint8), rng.integers(0, 2, n, dtype=np.uint8)


class TestTypes:
    @pytest.mark.parametrize("bit", [-1, 2])
    def test_symbol_rejects_bad_bit(self, bit):
        with pytest.raises(InvalidInput):
            QubitSymbol(Basis.RECTILINEAR, bit)

    @pytest.mark.parametrize("field", ["loss_probability", "flip_probability"])
    @pytest.mark.parametrize("value", [-0.1, 1.1])
    def test_params_range(self, field, value):
        with pytest.raises(InvalidInput):
            QuantumLinkParams(**{field: value})

    def test_seed_range(self):
        with pytest.raises(InvalidInput):
            QuantumLinkParams(seed=2**64)


class TestTransmitPulses:
    def test_certain_loss(self):
        syms = [QubitSymbol(Basis(i % 2), i % 2) for i in range(50)]
        recs = transmit_pulses(syms, [Basis.RECTILINEAR] * 50, QuantumLinkParams(1.0, 0.0))
        assert all(r.lost for r in recs)

    def test_noiseless_identity(self):
        bases, bits = random_train(500, 1)
        syms = [QubitSymbol(Basis(int(b)), int(x)) for b, x in zip(bases, bits)]
        recs = transmit_pulses(syms, [s.basis for s in syms], QuantumLinkParams(0.0, 0.0))
        assert [r.bit for r in recs] == [s.bit for s in syms]

    def test_indices_contiguous(self):
        syms = [QubitSymbol(Basis.DIAGONAL, 1)] * 10
        recs = transmit_pulses(syms, [Basis.DIAGONAL] * 10, QuantumLinkParams())
        assert [r.pulse_index for r in recs] == list(range(10))

    def test_length_mismatch(self):
        with pytest.raises(InvalidInput):
            transmit_pulses([QubitSymbol(Basis.DIAGONAL, 0)], [], QuantumLinkParams())
        with pytest.raises(InvalidInput):
            transmit(np.zeros(3), np.zeros(3), np.zeros(2), QuantumLinkParams())

    def test_intercept_resend_error_rate(self):
        # Adversary basis matches half the time (no error), else error 1/2: 0.25 overall.
        bases, bits = random_train(100_000, 2)
        det = transmit(bases, bits, bases, QuantumLinkParams(0.0, 0.0, Eavesdropper.INTERCEPT_RESEND, 5))
        assert abs(np.mean(det.bits != bits) - 0.25) <= 0.01


class TestProperties:
    @given(seed=st.integers(0, 2**64 - 1), stream=st.integers(0, 100))
    def test_deterministic(self, seed, stream):
        bases, bits = random_train(256, 3)
        p = QuantumLinkParams(0.3, 0.1, Eavesdropper.INTERCEPT_RESEND, seed)
        a = transmit(bases, bits, bases[::-1].copy(), p, stream)
        b = transmit(bases, bits, bases[::-1].copy(), p, stream)
        assert np.array_equal(a.detected, b.detected) and np.array_equal(a.bits, b.bits)

    @pytest.mark.parametrize("loss", [0.0, 0.1, 0.5, 0.9])
    def test_loss_fraction_binomial(self, loss):
        n = 20_000
        bases, bits = random_train(n, 4)
        det = transmit(bases, bits, bases, QuantumLinkParams(loss, 0.0, seed=9))
        sigma = math.sqrt(n * loss * (1 - loss))
        assert abs(np.count_nonzero(~det.detected) - n * loss) <= 3 * sigma + 1e-9

    def test_mismatched_basis_uniform(self):
        n = 20_000
        bases, bits = random_train(n, 5)
        det = transmit(bases, bits, 1 - bases, QuantumLinkParams(0.0, 0.0, seed=11))
        assert abs(np.count_nonzero(det.bits == 0) - n / 2) <= 3 * math.sqrt(n / 4)

    @given(seed=st.integers(0, 2**32))
    def test_noiseless_matched_is_identity(self, seed):
        bases, bits = random_train(300, seed)
        det = transmit(bases, bits, bases, QuantumLinkParams(0.0, 0.0, seed=seed))
        assert det.detected.all() and np.array_equal(det.bits, bits)

    def test_flip_rate(self):
        n = 50_000
        bases, bits = random_train(n, 6)
        det = transmit(bases, bits, bases, QuantumLinkParams(0.0, 0.05, seed=12))
        assert abs(np.count_nonzero(det.bits != bits) - 0.05 * n) <= 3 * math.sqrt(n * 0.05 * 0.95)

    def test_raising_loss_enlarges_lost_set(self):
        bases, bits = random_train(5000, 7)
        lo = transmit(bases, bits, bases, QuantumLinkParams(0.2, 0.0, seed=13))
        hi = transmit(bases, bits, bases, QuantumLinkParams(0.4, 0.0, seed=13))
        assert np.all(hi.detected <= lo.detected)
