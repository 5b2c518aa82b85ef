"""Tapped-delay-line Rayleigh block-fading channel with AWGN.

The power-delay profile is exponential, ``PDP[l] ~ exp(-l / tau)``, normalised
to unit total power.  One realization covers a whole frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ofdm_phy import InputError, OfdmConfig, NUM_SUBCARRIERS


@dataclass(frozen=True)
class ChannelModel:
    num_taps: int = 16
    decay: float = 4.0

    def __post_init__(self):
        if self.num_taps < 1:
            raise InputError("num_taps must be >= 1")
        if not self.decay > 0:
            raise InputError("decay must be positive")

    @property
    def power_delay_profile(self) -> np.ndarray:
        p = np.exp(-np.arange(self.num_taps) / self.decay)
        return p / p.sum()


@dataclass
class ChannelRealization:
    taps: np.ndarray
    freq_response: np.ndarray


def frequency_response(taps: np.ndarray, n: int = NUM_SUBCARRIERS) -> np.ndarray:
    # unnormalised DFT == sqrt(n) * unitary DFT, so y(k) = h(k) x(k) with CP
    return np.fft.fft(taps, n=n, axis=-1)


def draw_taps(model: ChannelModel, rng: np.random.Generator, size=()) -> np.ndarray:
    shape = tuple(np.atleast_1d(size)) if size != () else ()
    std = np.sqrt(model.power_delay_profile / 2.0)
    g = rng.standard_normal(shape + (2, model.num_taps))
    return (g[..., 0, :] + 1j * g[..., 1, :]) * std


def draw_channel(model: ChannelModel, rng: np.random.Generator, n: int = NUM_SUBCARRIERS) -> ChannelRealization:
    taps = draw_taps(model, rng)
    return ChannelRealization(taps=taps, freq_response=frequency_response(taps, n))


def noise_variance(snr_db) -> np.ndarray:
    """Noise variance per frequency-domain symbol for unit symbol energy."""
    return 10.0 ** (-np.asarray(snr_db, dtype=float) / 10.0)


def convolve_frames(tx_time: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Linear convolution truncated to the input length (batched, last axis)."""
    n = tx_time.shape[-1]
    nfft = 1 << int(np.ceil(np.log2(n + taps.shape[-1] - 1)))
    out = np.fft.ifft(np.fft.fft(tx_time, nfft, axis=-1) * np.fft.fft(taps, nfft, axis=-1), axis=-1)
    return out[..., :n]


def receive_windows(rx_time: np.ndarray, config: OfdmConfig) -> tuple[np.ndarray, np.ndarray]:
    """Strip CPs (if any) and FFT the pilot and data windows."""
    n, sym = config.num_subcarriers, config.symbol_length
    start = sym - n
    y_pilot = np.fft.fft(rx_time[..., start:sym], axis=-1, norm="ortho")
    y_data = np.fft.fft(rx_time[..., sym + start:2 * sym], axis=-1, norm="ortho")
    return y_pilot, y_data


def apply_channel(
    tx_time: np.ndarray,
    realization: ChannelRealization | np.ndarray,
    config: OfdmConfig,
    snr_db,
    rng: np.random.Generator | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Pass a (batch of) frame(s) through the channel and the receiver FFT.

    ``realization`` may be a :class:`ChannelRealization` or a raw tap array
    broadcastable against ``tx_time``.  ``rng=None`` gives a noiseless channel.
    """
    taps = realization.taps if isinstance(realization, ChannelRealization) else np.asarray(realization)
    if tx_time.shape[-1] != 2 * config.symbol_length:
        raise InputError(
            f"tx_time has {tx_time.shape[-1]} samples, config expects {2 * config.symbol_length}"
        )
    if config.cp_mode == "with_cp" and taps.shape[-1] > config.cp_length:
        raise InputError(f"{taps.shape[-1]} taps exceed the cyclic prefix of {config.cp_length}")
    rx = convolve_frames(tx_time, taps)
    if rng is not None:
        sigma2 = noise_variance(snr_db)
        if np.ndim(sigma2):
            sigma2 = sigma2.reshape(sigma2.shape + (1,) * (rx.ndim - sigma2.ndim))
        g = rng.standard_normal((2,) + rx.shape)
        rx = rx + np.sqrt(sigma2 / 2.0) * (g[0] + 1j * g[1])
    return receive_windows(rx, config)


def channel_frequency_correlation(model: ChannelModel, n: int = NUM_SUBCARRIERS) -> np.ndarray:
    """Analytic ``R_hh = E[h h^H]`` of the frequency response."""
    k = np.arange(n)
    lag = k[:, None] - k[None, :]
    phase = np.exp(-2j * np.pi * np.arange(model.num_taps)[:, None, None] * lag / n)
    return np.tensordot(model.power_delay_profile, phase, axes=1)
