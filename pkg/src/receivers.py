"""Model-driven receiver stages: LS/MMSE channel estimation, training removal, ZF/MMSE equalization, demapping."""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from src.config import DdstConfig
from src.dsp import dft, zero_pad
from src.errors import ConfigError, DimensionError, IllConditionedPilotError
from src.frame import DdstProjector, pilot_bins
from src.link import ChannelStatistics

logger = logging.getLogger(__name__)

PILOT_FLOOR = 1e-9
ZF_FLOOR = 1e-8

ArrayOrScalar = Union[float, np.ndarray]


@dataclass(frozen=True, eq=False)
class ChannelEstimate:
    """Ĥ over all N bins and the P time taps it came from; ``method`` is LS, MMSE or CE-Net."""

    freq_full: np.ndarray
    time_taps: np.ndarray
    method: str


@dataclass(frozen=True, eq=False)
class EqualizedFrame:
    time_symbols: np.ndarray
    method: str
    clipped_bins: Union[int, np.ndarray] = 0


def _check_length(v: np.ndarray, n: int, what: str) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim == 0 or v.shape[-1] != n:
        raise DimensionError(f'{what} must have length {n}, found {v.shape[-1] if v.ndim else 0}')
    return v


def taps_to_response(time_taps: np.ndarray, n: int) -> np.ndarray:
    """Zero-pad P taps to N and take the sqrt(N)-scaled DFT, the convention of ChannelRealization."""
    return np.fft.fft(zero_pad(time_taps, n), axis=-1)


def ls_estimate(y: np.ndarray, c: np.ndarray, config: DdstConfig) -> ChannelEstimate:
    """
    LS estimate from the pilot bins.

    Ĥ_P[k] = Y(kQ) / C(kQ), ĥ = P-point inverse DFT of Ĥ_P, zero-padded to N and transformed back.
    In the noiseless, distortionless case with L <= P this is the true frequency response.

    Args:
        y: received frame(s), shape (..., N)
        c: training sequence, shape (N,) or matching ``y``
        config: frame config

    Returns:
        LS channel estimate.
    """
    y = _check_length(y, config.n, 'Received frame')
    c = _check_length(c, config.n, 'Training sequence')
    bins = pilot_bins(config)
    pilots = dft(c)[..., bins]
    if np.any(np.abs(pilots) < PILOT_FLOOR):
        raise IllConditionedPilotError(
            f'Training sequence has a pilot bin below {PILOT_FLOOR:g}: min |C(kQ)| = {np.abs(pilots).min():.3g}'
        )
    ratio = np.fft.fft(y, axis=-1)[..., bins] / np.fft.fft(c, axis=-1)[..., bins]
    time_taps = np.fft.ifft(ratio, axis=-1)
    return ChannelEstimate(taps_to_response(time_taps, config.n), time_taps, 'LS')


def effective_noise_variance(c: np.ndarray, config: DdstConfig, sigma_v2: ArrayOrScalar) -> np.ndarray:
    """Per-tap noise variance of the LS taps: (1/P^2) sum_k sigma_v^2 / |C(kQ)|^2 with C the unitary DFT."""
    pilots = dft(np.asarray(c))[..., pilot_bins(config)]
    spread = np.sum(1 / np.abs(pilots) ** 2, axis=-1) / config.p**2
    return np.asarray(sigma_v2, dtype=float) * spread


def mmse_estimate(
    y: np.ndarray,
    c: np.ndarray,
    config: DdstConfig,
    channel_stats: Optional[ChannelStatistics],
    sigma_v2: ArrayOrScalar,
) -> ChannelEstimate:
    """
    Per-tap LMMSE shrinkage of the LS taps, ĥ = r / (r + sigma_eff^2) ĥ_LS, then the LS zero-pad/DFT chain.

    Distortion leaking into the pilot bins is not part of sigma_eff^2.
    """
    if channel_stats is None:
        raise ConfigError('MMSE channel estimation needs the channel tap statistics')
    ls = ls_estimate(y, c, config)
    powers = np.asarray(channel_stats.tap_powers, dtype=float)
    if powers.shape[-1] != config.p:
        raise DimensionError(f'Tap statistics must have length P={config.p}, found {powers.shape[-1]}')
    sigma_eff = effective_noise_variance(c, config, sigma_v2)
    if sigma_eff.ndim:
        sigma_eff = sigma_eff[..., None]
    denominator = powers + sigma_eff
    shape = np.broadcast(powers, denominator).shape
    weights = np.divide(powers, denominator, out=np.ones(shape), where=denominator > 0)
    time_taps = weights * ls.time_taps
    return ChannelEstimate(taps_to_response(time_taps, config.n), time_taps, 'MMSE')


def remove_training(y: np.ndarray, proj: DdstProjector) -> np.ndarray:
    """ŷ = Θ y."""
    return proj.apply(y)


def zf_equalize(y_clean: np.ndarray, est: ChannelEstimate) -> EqualizedFrame:
    """
    Per-bin channel inversion, ŝ = F^H (F ŷ / Ĥ).

    Bins with |Ĥ| below 1e-8 keep their phase and are clipped to that magnitude; the count per frame is
    returned in ``clipped_bins``.
    """
    y_clean = _check_length(y_clean, est.freq_full.shape[-1], 'Frame')
    response = est.freq_full
    magnitude = np.abs(response)
    clipped = magnitude < ZF_FLOOR
    if np.any(clipped):
        response = np.where(clipped, ZF_FLOOR * np.exp(1j * np.angle(response)), response)
        logger.debug('ZF equalizer clipped %d near-zero channel bins', int(clipped.sum()))
    symbols = dft(dft(y_clean) / response, 'inverse')
    counts = clipped.sum(axis=-1)
    return EqualizedFrame(symbols, 'ZF', int(counts) if np.ndim(counts) == 0 else counts)


def mmse_equalize(y_clean: np.ndarray, est: ChannelEstimate, sigma_v2: ArrayOrScalar, es: float) -> EqualizedFrame:
    """Per-bin LMMSE equalizer G = Ĥ* / (|Ĥ|^2 + sigma_v^2 / E_s)."""
    y_clean = _check_length(y_clean, est.freq_full.shape[-1], 'Frame')
    ratio = np.asarray(sigma_v2, dtype=float) / es
    if ratio.ndim:
        ratio = ratio[..., None]
    response = est.freq_full
    denominator = np.maximum(np.abs(response) ** 2 + ratio, ZF_FLOOR**2)
    symbols = dft(dft(y_clean) * np.conj(response) / denominator, 'inverse')
    return EqualizedFrame(symbols, 'MMSE')


def demap_qpsk(frame: Union[EqualizedFrame, np.ndarray]) -> np.ndarray:
    """Hard Gray decisions; a zero real or imaginary part decides bit 0."""
    symbols = frame.time_symbols if isinstance(frame, EqualizedFrame) else np.asarray(frame)
    bits = np.stack([symbols.real < 0, symbols.imag < 0], axis=-1).astype(np.int8)
    return bits.reshape(symbols.shape[:-1] + (2 * symbols.shape[-1],))


def count_errors(detected: np.ndarray, truth: np.ndarray) -> Tuple[int, int]:
    """Hamming distance and the number of compared bits."""
    detected, truth = np.asarray(detected), np.asarray(truth)
    if detected.shape != truth.shape:
        raise DimensionError(f'Bit blocks differ in shape: detected {detected.shape}, truth {truth.shape}')
    return int(np.count_nonzero(detected != truth)), int(truth.size)
