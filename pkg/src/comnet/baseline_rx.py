"""Conventional receiver blocks: LS / LMMSE channel estimation, ZF / MMSE
detection and the genie detector that divides by the true channel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import noise_variance
from .ofdm_phy import InputError

ZF_EPS = 1e-12


def realify(v: np.ndarray) -> np.ndarray:
    """``[..., n]`` complex -> ``[..., 2n]`` real as ``[Re, Im]``."""
    return np.concatenate([v.real, v.imag], axis=-1)


def complexify(r: np.ndarray) -> np.ndarray:
    n = r.shape[-1] // 2
    return r[..., :n] + 1j * r[..., n:]


def realify_matrix(w: np.ndarray) -> np.ndarray:
    """Real block form ``[[Re W, -Im W], [Im W, Re W]]`` acting on ``realify(v)``."""
    return np.block([[w.real, -w.imag], [w.imag, w.real]])


@dataclass(frozen=True)
class LmmseWeights:
    complex_matrix: np.ndarray
    real_matrix: np.ndarray
    snr_design: float


def ls_estimate(y_pilot: np.ndarray, x_pilot: np.ndarray) -> np.ndarray:
    x_pilot = np.asarray(x_pilot)
    if np.any(x_pilot == 0):
        raise InputError("pilot contains a zero entry; LS estimate undefined")
    return np.asarray(y_pilot) / x_pilot


def pilot_beta(x_pilot: np.ndarray) -> float:
    """``E|x|^2 * E[1/|x|^2]`` over the pilot entries (1 for constant modulus)."""
    p = np.abs(np.asarray(x_pilot)) ** 2
    return float(np.mean(p) * np.mean(1.0 / p))


def build_lmmse_weights(r_hh: np.ndarray, snr_db: float, x_pilot: np.ndarray) -> LmmseWeights:
    """``W = R (R + beta/SNR I)^-1`` for the given channel correlation."""
    n = r_hh.shape[0]
    reg = pilot_beta(x_pilot) * float(noise_variance(snr_db))
    a = r_hh + reg * np.eye(n)
    # W A = R  <=>  A^H W^H = R^H; both R and A are Hermitian
    w = np.linalg.solve(a, r_hh).conj().T
    return LmmseWeights(complex_matrix=w, real_matrix=realify_matrix(w), snr_design=float(snr_db))


def lmmse_estimate(weights: LmmseWeights, h_ls: np.ndarray) -> np.ndarray:
    return complexify(realify(np.asarray(h_ls)) @ weights.real_matrix.T)


def zf_detect(y_data: np.ndarray, h_hat: np.ndarray, return_flags: bool = False):
    """Per-subcarrier division; subcarriers with ``|h| < 1e-12`` yield 0 and are flagged."""
    y_data, h_hat = np.broadcast_arrays(np.asarray(y_data, dtype=complex), np.asarray(h_hat, dtype=complex))
    flags = np.abs(h_hat) < ZF_EPS
    out = np.zeros(y_data.shape, dtype=complex)
    np.divide(y_data, h_hat, out=out, where=~flags)
    if return_flags:
        return out, flags
    return out


def mmse_detect(y_data: np.ndarray, h_hat: np.ndarray, snr_db) -> np.ndarray:
    sigma2 = noise_variance(snr_db)
    if np.ndim(sigma2):
        sigma2 = sigma2[..., None]
    return np.conj(h_hat) * y_data / (np.abs(h_hat) ** 2 + sigma2)


def genie_detect(y_data: np.ndarray, h_true: np.ndarray) -> np.ndarray:
    return zf_detect(y_data, h_true)
