import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuroeq.channel import (
    PAPER_TAPS,
    ChannelSpec,
    SnrPoint,
    apply_nonlinearity,
    bpsk_demodulate,
    bpsk_modulate,
    fir_convolve,
    sigma_from_snr,
    transmit,
)


def test_modulate_examples():
    np.testing.assert_array_equal(bpsk_modulate([0, 1, 0]), [1, -1, 1])
    assert bpsk_modulate([]).shape == (0,)


def test_modulate_round_trip_exhaustive():
    bits = np.array(list(itertools.product((0, 1), repeat=8)))
    np.testing.assert_array_equal(bpsk_demodulate(bpsk_modulate(bits)), bits)


def test_modulate_rejects_non_binary():
    with pytest.raises(ValueError):
        bpsk_modulate([0, 2])


def test_fir_examples():
    np.testing.assert_allclose(fir_convolve([1, 0, 0], PAPER_TAPS), PAPER_TAPS)
    np.testing.assert_allclose(fir_convolve([1, -1, 1], PAPER_TAPS), [0.3482, 0.5222, -0.1740], atol=1e-12)
    np.testing.assert_array_equal(fir_convolve([1, -1, 1, 1], [1.0]), [1, -1, 1, 1])


def test_fir_full_is_numpy_convolve():
    rng = np.random.default_rng(0)
    s, h = rng.normal(size=9), rng.normal(size=4)
    np.testing.assert_allclose(fir_convolve(s, h, full=True), np.convolve(s, h), atol=1e-12)
    np.testing.assert_allclose(fir_convolve(s, h), np.convolve(s, h)[:9], atol=1e-12)


def test_fir_rejects_empty_taps():
    with pytest.raises(ValueError):
        fir_convolve([1, 1], [])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=20),
    st.lists(st.floats(-2, 2), min_size=1, max_size=5),
)
def test_fir_matches_direct_sum(s, h):
    v = fir_convolve(s, h)
    for i in range(len(s)):
        expect = sum(h[k] * s[i - k] for k in range(len(h)) if i - k >= 0)
        assert v[i] == pytest.approx(expect, abs=1e-9)


def test_nonlinearity_examples():
    assert apply_nonlinearity(1.0, "paper_poly_cos") == pytest.approx(0.6)
    assert apply_nonlinearity(0.5, "paper_poly_cos") == pytest.approx(0.5375)
    assert apply_nonlinearity(1.0, "cubic") == pytest.approx(0.1)
    assert apply_nonlinearity(-0.7, "identity") == -0.7


def test_nonlinearity_errors():
    with pytest.raises(ValueError):
        apply_nonlinearity(1.0, "tanh")
    with pytest.raises(ValueError):
        apply_nonlinearity([np.inf], "identity")


def test_magnitude_form_is_odd():
    v = np.linspace(-2, 2, 41)
    np.testing.assert_allclose(apply_nonlinearity(-v, "poly_cos_magnitude"), -apply_nonlinearity(v, "poly_cos_magnitude"))


@pytest.mark.parametrize(
    "point,var",
    [(SnrPoint(0, "es_n0"), 0.5), (SnrPoint(0, "eb_n0", 0.5), 1.0), (SnrPoint(10, "es_n0"), 0.05)],
)
def test_sigma_examples(point, var):
    assert sigma_from_snr(point) ** 2 == pytest.approx(var)


def test_snr_point_validation():
    with pytest.raises(ValueError):
        SnrPoint(0, "eb_n0", 0.0)
    with pytest.raises(ValueError):
        SnrPoint(0, "snr")
    with pytest.raises(ValueError):
        sigma_from_snr(SnrPoint(float("nan")))


def test_channel_spec_validation():
    with pytest.raises(ValueError):
        ChannelSpec(())
    with pytest.raises(ValueError):
        ChannelSpec((1.0, np.nan))
    with pytest.raises(ValueError):
        ChannelSpec(noise_sigma=-1)
    with pytest.raises(ValueError):
        ChannelSpec(nonlinearity="foo")


def test_transmit_examples():
    bits = np.array([0, 1, 1, 0])
    np.testing.assert_array_equal(transmit(bits, ChannelSpec((1.0,))), [1, -1, -1, 1])
    np.testing.assert_allclose(transmit([0, 0, 0], ChannelSpec(PAPER_TAPS)), np.cumsum(PAPER_TAPS))
    a = transmit(bits, ChannelSpec(noise_sigma=0.3), np.random.default_rng(5))
    b = transmit(bits, ChannelSpec(noise_sigma=0.3), np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_transmit_impulse_gives_taps():
    # bit 1 -> -1 so an impulse is "all zeros except the first symbol" in the linear domain;
    # compare against the differenced response instead
    one = transmit([1, 0, 0], ChannelSpec(PAPER_TAPS))
    zero = transmit([0, 0, 0], ChannelSpec(PAPER_TAPS))
    np.testing.assert_allclose((zero - one) / 2, PAPER_TAPS)


def test_transmit_noiseless_composes():
    rng = np.random.default_rng(1)
    bits = rng.integers(0, 2, size=(5, 16))
    spec = ChannelSpec(PAPER_TAPS, "paper_poly_cos")
    expect = apply_nonlinearity(fir_convolve(bpsk_modulate(bits), PAPER_TAPS), "paper_poly_cos")
    np.testing.assert_allclose(transmit(bits, spec), expect)


def test_transmit_tail_and_history():
    spec = ChannelSpec(PAPER_TAPS)
    bits = np.array([0, 1, 1])
    full = transmit(bits, spec, tail=True)
    np.testing.assert_allclose(full, np.convolve(bpsk_modulate(bits), PAPER_TAPS))
    hist = np.array([1, 0])
    both = transmit(np.concatenate([hist, bits]), spec)
    np.testing.assert_allclose(transmit(bits, spec, history=hist), both[2:])


def test_transmit_needs_rng_when_noisy():
    with pytest.raises(ValueError):
        transmit([0, 1], ChannelSpec(noise_sigma=0.1))


def test_dispersed_power_is_unit():
    rng = np.random.default_rng(2)
    v = fir_convolve(bpsk_modulate(rng.integers(0, 2, 100_000)), PAPER_TAPS)
    assert abs(np.mean(v**2) - 1.0) < 0.02


def test_noise_moments():
    sigma, n = 0.7, 100_000
    r = transmit(np.zeros(n, dtype=int), ChannelSpec((1.0,), noise_sigma=sigma), np.random.default_rng(3))
    noise = r - 1.0
    assert abs(noise.mean()) < 3 * sigma / np.sqrt(n)
    # variance of the sample variance is about 2 sigma^4 / n
    assert abs(noise.var() - sigma**2) < 3 * sigma**2 * np.sqrt(2 / n)
