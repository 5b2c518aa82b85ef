"""OFDM transmitter chain: LTE 64-QAM mapping, unitary (I)FFT, cyclic prefix,
pilot symbol and time-domain clipping.

All array functions accept leading batch dimensions; the last axis is the
symbol / sample axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

NUM_SUBCARRIERS = 64
CP_LENGTH = 16
BITS_PER_SYMBOL = 6
BITS_PER_FRAME = NUM_SUBCARRIERS * BITS_PER_SYMBOL
PILOT_SEED = 20190101

QAM_SCALE = 1.0 / np.sqrt(42.0)


class InputError(ValueError):
    """Raised when an input has the wrong length, shape or content."""


def _lte_64qam_table() -> np.ndarray:
    # 3GPP TS 36.211 table 7.1.5-1: I from bits (0, 2, 4), Q from bits (1, 3, 5)
    labels = np.arange(64)
    b = (labels[:, None] >> (5 - np.arange(6))) & 1
    s = 1 - 2 * b
    i = s[:, 0] * (4 - s[:, 2] * (2 - s[:, 4]))
    q = s[:, 1] * (4 - s[:, 3] * (2 - s[:, 5]))
    return (i + 1j * q) * QAM_SCALE


@dataclass(frozen=True)
class QamConstellation:
    """LTE 64-QAM with unit average energy.

    ``points[label]`` is the constellation point of the 6-bit label read
    MSB-first, i.e. label ``0b101111`` carries bits ``1,0,1,1,1,1``.
    """

    order: int = 64
    points: np.ndarray = field(default_factory=_lte_64qam_table)

    @property
    def bit_labels(self) -> np.ndarray:
        labels = np.arange(self.order)
        return ((labels[:, None] >> (5 - np.arange(BITS_PER_SYMBOL))) & 1).astype(np.int8)


LTE_64QAM = QamConstellation()
_WEIGHTS = 1 << (5 - np.arange(BITS_PER_SYMBOL))


def qam_map(bits: np.ndarray, constellation: QamConstellation = LTE_64QAM) -> np.ndarray:
    """Map bits (last axis, multiple of 6) to 64-QAM symbols."""
    bits = np.asarray(bits)
    if bits.shape[-1] % BITS_PER_SYMBOL:
        raise InputError(f"bit count {bits.shape[-1]} is not divisible by {BITS_PER_SYMBOL}")
    groups = bits.reshape(*bits.shape[:-1], -1, BITS_PER_SYMBOL).astype(np.int64)
    return constellation.points[groups @ _WEIGHTS]


def qam_demap_hard(symbols: np.ndarray, constellation: QamConstellation = LTE_64QAM) -> np.ndarray:
    """Minimum-distance hard decision; ties resolve to the lower label."""
    symbols = np.asarray(symbols)
    dist = np.abs(symbols[..., None] - constellation.points) ** 2
    # argmin returns the first minimum, which is the lower label
    labels = np.argmin(dist, axis=-1)
    bits = constellation.bit_labels[labels]
    return bits.reshape(*symbols.shape[:-1], -1)


def make_pilot(seed: int = PILOT_SEED, n: int = NUM_SUBCARRIERS) -> np.ndarray:
    """Fixed unit-modulus QPSK pilot sequence."""
    rng = np.random.default_rng(seed)
    b = rng.integers(0, 2, size=(2, n))
    return ((1 - 2 * b[0]) + 1j * (1 - 2 * b[1])) / np.sqrt(2.0)


@dataclass(frozen=True)
class ClippingConfig:
    clipping_ratio: float = 1.6
    clip_pilot: bool = True

    def __post_init__(self):
        if not self.clipping_ratio > 0:
            raise InputError("clipping_ratio must be positive")


@dataclass(frozen=True)
class OfdmConfig:
    num_subcarriers: int = NUM_SUBCARRIERS
    cp_length: int = CP_LENGTH
    cp_mode: str = "with_cp"
    clipping: Optional[ClippingConfig] = None
    pilot_seed: int = PILOT_SEED
    bits_per_symbol: int = BITS_PER_SYMBOL

    def __post_init__(self):
        if self.cp_mode not in ("with_cp", "no_cp"):
            raise InputError(f"unknown cp_mode {self.cp_mode!r}")
        if not 0 <= self.cp_length < self.num_subcarriers:
            raise InputError("cp_length must be smaller than num_subcarriers")
        object.__setattr__(self, "pilot_symbol", make_pilot(self.pilot_seed, self.num_subcarriers))

    @property
    def symbol_length(self) -> int:
        """Transmitted samples per OFDM symbol."""
        return self.num_subcarriers + (self.cp_length if self.cp_mode == "with_cp" else 0)

    @property
    def bits_per_frame(self) -> int:
        return self.num_subcarriers * self.bits_per_symbol


def ofdm_modulate(freq_symbols: np.ndarray, config: OfdmConfig) -> np.ndarray:
    freq_symbols = np.asarray(freq_symbols)
    if freq_symbols.shape[-1] != config.num_subcarriers:
        raise InputError(
            f"expected {config.num_subcarriers} frequency symbols, got {freq_symbols.shape[-1]}"
        )
    time = np.fft.ifft(freq_symbols, axis=-1, norm="ortho")
    if config.cp_mode == "with_cp" and config.cp_length:
        time = np.concatenate([time[..., -config.cp_length:], time], axis=-1)
    return time


def ofdm_demodulate(time_samples: np.ndarray, config: OfdmConfig) -> np.ndarray:
    """Inverse of :func:`ofdm_modulate` for one CP-stripped 64-sample window."""
    time_samples = np.asarray(time_samples)
    if time_samples.shape[-1] != config.num_subcarriers:
        raise InputError(
            f"expected {config.num_subcarriers} time samples, got {time_samples.shape[-1]}"
        )
    return np.fft.fft(time_samples, axis=-1, norm="ortho")


def clip(time_samples: np.ndarray, config: ClippingConfig, rms: Optional[np.ndarray] = None) -> np.ndarray:
    """Clamp sample magnitudes to ``CR * RMS`` with phase preserved.

    ``rms`` defaults to the RMS of ``time_samples`` along the last axis; pass it
    explicitly to hold the threshold fixed across repeated application.
    """
    time_samples = np.asarray(time_samples)
    if time_samples.shape[-1] == 0:
        raise InputError("cannot clip an empty signal")
    if rms is None:
        rms = np.sqrt(np.mean(np.abs(time_samples) ** 2, axis=-1, keepdims=True))
    threshold = config.clipping_ratio * rms
    mag = np.abs(time_samples)
    scale = np.minimum(1.0, threshold / np.maximum(mag, 1e-300))
    return time_samples * scale


@dataclass
class OfdmFrame:
    bits: np.ndarray
    x_data: np.ndarray
    x_pilot: np.ndarray
    tx_time: np.ndarray


def modulate_frames(bits: np.ndarray, config: OfdmConfig) -> tuple[np.ndarray, np.ndarray]:
    """Batched transmitter: returns ``(x_data, tx_time)`` for bits ``[..., 384]``."""
    bits = np.asarray(bits)
    if bits.shape[-1] != config.bits_per_frame:
        raise InputError(f"expected {config.bits_per_frame} bits per frame, got {bits.shape[-1]}")
    x_data = qam_map(bits)
    pilot = np.broadcast_to(config.pilot_symbol, x_data.shape)
    t_pilot = ofdm_modulate(pilot, config)
    t_data = ofdm_modulate(x_data, config)
    if config.clipping is not None:
        t_data = clip(t_data, config.clipping)
        if config.clipping.clip_pilot:
            t_pilot = clip(t_pilot, config.clipping)
    return x_data, np.concatenate([t_pilot, t_data], axis=-1)


def build_frame(bits: np.ndarray, config: OfdmConfig, rng: Optional[np.random.Generator] = None) -> OfdmFrame:
    """Build one pilot+data frame. ``rng`` draws the bits when ``bits`` is None."""
    if bits is None:
        if rng is None:
            raise InputError("either bits or rng is required")
        bits = rng.integers(0, 2, size=config.bits_per_frame, dtype=np.int8)
    bits = np.asarray(bits)
    if bits.shape != (config.bits_per_frame,):
        raise InputError(f"expected {config.bits_per_frame} bits, got shape {bits.shape}")
    x_data, tx_time = modulate_frames(bits, config)
    return OfdmFrame(bits=bits, x_data=x_data, x_pilot=config.pilot_symbol.copy(), tx_time=tx_time)
