from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from coopweight import transport
from coopweight.channel import FlatChannelConfig, MultipathChannelConfig


class TestPack:
    @given(arrays(np.float64, array_shapes(min_dims=1, max_dims=3, max_side=7),
                  elements=st.floats(-1e3, 1e3)))
    def test_round_trip_any_shape(self, f):
        packet = transport.pack(f)
        np.testing.assert_allclose(transport.unpack(packet, packet.payload), f, rtol=1e-12, atol=1e-9)

    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-50, 50)))
    def test_unit_power_unless_zero(self, f):
        packet = transport.pack(f)
        power = np.mean(np.abs(packet.payload) ** 2)
        if np.any(f != 0):
            assert power == pytest.approx(1.0)
        else:
            assert packet.scale == 1.0 and power == 0.0

    def test_odd_length_padded(self):
        packet = transport.pack(np.array([1.0, 2.0, 3.0]))
        assert packet.payload.size == 2
        assert packet.payload[1].imag == 0.0
        assert packet.shape == (3,)

    def test_iq_pairing(self):
        packet = transport.pack(np.array([[3.0, 4.0]]))
        assert packet.scale == pytest.approx(5.0)
        assert packet.payload[0] == pytest.approx(0.6 + 0.8j)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(ValueError):
            transport.pack(np.array([0.0, bad]))

    def test_unpack_size_mismatch(self):
        packet = transport.pack(np.ones(6))
        with pytest.raises(ValueError, match="3"):
            transport.unpack(packet, np.ones(2))

    def test_hexdump(self):
        packet = transport.pack(np.array([1.0, 0.0]), source_id=4)
        text = packet.hexdump()
        assert text.startswith("agent=4 shape=(2,) scale=1.0 ")
        assert text.endswith(np.array([1 + 0j], np.complex64).tobytes().hex())


class TestTransmit:
    def test_ideal_is_identity(self, rng):
        f = rng.normal(size=(8, 4, 4))
        np.testing.assert_allclose(transport.transmit(f, None, rng), f, atol=1e-12)

    def test_flat_noiseless(self, rng):
        f = rng.normal(size=(3, 5))
        link = FlatChannelConfig(snr_db=np.inf, d=3.0)
        np.testing.assert_allclose(transport.transmit(f, link, rng), f, atol=1e-10)

    def test_multipath_perfect_csi_noiseless(self, rng):
        f = rng.normal(size=(2, 9, 9))
        link = MultipathChannelConfig(snr_db=np.inf, perfect_csi=True)
        np.testing.assert_allclose(transport.transmit(f, link, rng), f, atol=1e-8)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31))
    def test_error_shrinks_with_snr(self, seed):
        f = np.random.default_rng(seed).normal(size=512)
        err = []
        for snr in (0.0, 20.0):
            # same fading draw at both SNRs
            out = transport.transmit(f, FlatChannelConfig(snr_db=snr), np.random.default_rng(seed))
            err.append(np.mean((out - f) ** 2))
        assert err[1] < err[0]

    def test_deterministic_given_rng(self):
        f = np.arange(20.0)
        link = MultipathChannelConfig(snr_db=5.0)
        a = transport.transmit(f, link, np.random.default_rng(9))
        b = transport.transmit(f, link, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_perturbed_csi_adds_error(self):
        f = np.random.default_rng(1).normal(size=400)
        clean = transport.transmit(f, FlatChannelConfig(snr_db=np.inf), np.random.default_rng(2))
        bad = transport.transmit(f, FlatChannelConfig(snr_db=np.inf, csi_variance=0.3), np.random.default_rng(2))
        assert np.mean((clean - f) ** 2) < 1e-20 < np.mean((bad - f) ** 2)

    def test_zf_floor_reported(self, rng):
        diag = Counter()
        transport.transmit(np.ones(4), FlatChannelConfig(snr_db=30.0, d=1e4, n=3.0), rng, diagnostics=diag)
        assert diag["zf_floor"] == 1  # one scalar estimate per packet

    def test_unknown_link(self, rng):
        with pytest.raises(TypeError):
            transport.transmit(np.ones(2), "awgn", rng)


@pytest.mark.parametrize("magnitude", [5e-324, 1e-310, 1e-150, 1e150, 1e300])
def test_pack_extreme_magnitudes(magnitude):
    f = np.array([magnitude, -magnitude / 2, 0.0])
    packet = transport.pack(f)
    assert np.mean(np.abs(packet.payload) ** 2) == pytest.approx(1.0)
    assert np.all(np.isfinite(packet.payload))
