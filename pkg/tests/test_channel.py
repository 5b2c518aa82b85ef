import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from comnet.channel import (
    ChannelModel,
    ChannelRealization,
    apply_channel,
    channel_frequency_correlation,
    draw_channel,
    draw_taps,
    frequency_response,
    noise_variance,
)
from comnet.ofdm_phy import InputError, OfdmConfig, modulate_frames

WITH_CP, NO_CP = OfdmConfig(), OfdmConfig(cp_mode="no_cp")


def _frames(rng, n, cfg):
    bits = rng.integers(0, 2, size=(n, 384))
    x_data, tx = modulate_frames(bits, cfg)
    return x_data, tx


def test_pdp_normalised_exponential():
    pdp = ChannelModel(16, 4.0).power_delay_profile
    assert pdp.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(pdp[1:] / pdp[:-1], np.exp(-0.25), rtol=1e-12)


def test_model_validation():
    with pytest.raises(InputError):
        ChannelModel(0)
    with pytest.raises(InputError):
        ChannelModel(4, 0.0)


def test_single_tap_is_flat():
    r = draw_channel(ChannelModel(1), np.random.default_rng(0))
    np.testing.assert_allclose(np.abs(r.freq_response), abs(r.taps[0]), rtol=1e-12)


def test_tap_and_subcarrier_energy():
    rng = np.random.default_rng(1)
    taps = draw_taps(ChannelModel(), rng, 10 ** 5)
    assert np.mean(np.sum(np.abs(taps) ** 2, axis=-1)) == pytest.approx(1.0, rel=0.02)
    power = np.mean(np.abs(frequency_response(taps)) ** 2, axis=0)
    assert np.all(np.abs(power - 1) < 0.03)


def test_frequency_response_is_scaled_unitary_dft():
    taps = draw_taps(ChannelModel(), np.random.default_rng(2))
    padded = np.zeros(64, complex)
    padded[:16] = taps
    np.testing.assert_allclose(frequency_response(taps), 8 * np.fft.fft(padded, norm="ortho"), atol=1e-12)


def test_noise_variance():
    assert noise_variance(0) == 1.0
    assert noise_variance(20) == pytest.approx(0.01)


def test_with_cp_noiseless_is_per_subcarrier_product():
    rng = np.random.default_rng(3)
    x, tx = _frames(rng, 50, WITH_CP)
    taps = draw_taps(ChannelModel(), rng, 50)
    yp, yd = apply_channel(tx, taps, WITH_CP, 10.0, None)
    h = frequency_response(taps)
    np.testing.assert_allclose(yp, h * WITH_CP.pilot_symbol, atol=1e-9)
    np.testing.assert_allclose(yd, h * x, atol=1e-9)


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 16), st.floats(0.5, 10.0))
def test_with_cp_equivalence_property(seed, taps_n, decay):
    rng = np.random.default_rng(seed)
    model = ChannelModel(taps_n, decay)
    x, tx = _frames(rng, 1, WITH_CP)
    r = draw_channel(model, rng)
    _, yd = apply_channel(tx[0], r, WITH_CP, 0.0, None)
    np.testing.assert_allclose(yd, r.freq_response * x[0], atol=1e-9)


def test_no_cp_single_tap_matches_with_cp():
    rng = np.random.default_rng(4)
    bits = rng.integers(0, 2, size=(10, 384))
    taps = draw_taps(ChannelModel(1), rng, 10)
    a = apply_channel(modulate_frames(bits, WITH_CP)[1], taps, WITH_CP, 0, None)
    b = apply_channel(modulate_frames(bits, NO_CP)[1], taps, NO_CP, 0, None)
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def test_no_cp_multitap_has_isi_matching_direct_convolution():
    rng = np.random.default_rng(5)
    x, tx = _frames(rng, 1, NO_CP)
    taps = draw_taps(ChannelModel(), rng)
    _, yd = apply_channel(tx[0], taps, NO_CP, 0, None)
    assert not np.allclose(yd, frequency_response(taps) * x[0], atol=1e-3)
    rx = np.array([sum(taps[l] * tx[0][n - l] for l in range(16) if n - l >= 0) for n in range(128)])
    np.testing.assert_allclose(yd, np.fft.fft(rx[64:], norm="ortho"), atol=1e-12)


def test_mismatch_errors():
    rng = np.random.default_rng(6)
    _, tx = _frames(rng, 1, WITH_CP)
    with pytest.raises(InputError):
        apply_channel(tx[0][:-1], draw_taps(ChannelModel(), rng), WITH_CP, 0, None)
    with pytest.raises(InputError):
        apply_channel(tx[0], draw_taps(ChannelModel(17), rng), WITH_CP, 0, None)


def test_noise_calibration():
    rng = np.random.default_rng(7)
    x, tx = _frames(rng, 10 ** 4, WITH_CP)
    taps = draw_taps(ChannelModel(), rng, 10 ** 4)
    clean = apply_channel(tx, taps, WITH_CP, 12.0, None)[1]
    noisy = apply_channel(tx, taps, WITH_CP, 12.0, rng)[1]
    snr = 10 * np.log10(np.mean(np.abs(clean) ** 2) / np.mean(np.abs(noisy - clean) ** 2))
    assert abs(snr - 12.0) < 0.1


def test_correlation_matrix_properties():
    r = channel_frequency_correlation(ChannelModel())
    np.testing.assert_allclose(np.diag(r), 1.0, atol=1e-14)
    np.testing.assert_allclose(r, r.conj().T, atol=1e-14)
    assert np.linalg.eigvalsh(r).min() >= -1e-10
    np.testing.assert_allclose(channel_frequency_correlation(ChannelModel(1)), np.ones((64, 64)), atol=1e-14)


def test_correlation_matches_monte_carlo():
    model = ChannelModel()
    h = frequency_response(draw_taps(model, np.random.default_rng(8), 10 ** 5))
    emp = h.T @ h.conj() / h.shape[0]
    assert np.max(np.abs(emp - channel_frequency_correlation(model))) < 0.02


def test_realization_container():
    r = draw_channel(ChannelModel(4), np.random.default_rng(9))
    assert isinstance(r, ChannelRealization) and r.taps.shape == (4,) and r.freq_response.shape == (64,)
