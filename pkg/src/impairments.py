"""Transmitter and propagation impairments: Saleh amplifier, EVM calibration, tapped-delay-line channel, AWGN."""
import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple, Union

import numpy as np

from src.config import DdstConfig, HpaSettings
from src.dsp import circular_convolve, zero_pad
from src.errors import CalibrationError, ConfigError, UndefinedInputError
from src.utils import SeedLike, make_rng

logger = logging.getLogger(__name__)

PDP_DECAY_DB = 3.0
EVM_TOLERANCE = 0.05
MAX_INPUT_SCALE = 1e6


@dataclass(frozen=True)
class SalehHpa:
    """
    Memoryless Saleh amplifier acting on the complex-envelope magnitude.

    With r = input_scale * |x|: A(r) = alpha_a r / (1 + beta_a r^2), Phi(r) = alpha_phi r^2 / (1 + beta_phi r^2).
    """

    alpha_a: float = 1.96
    beta_a: float = 0.99
    alpha_phi: float = 2.53
    beta_phi: float = 2.82
    input_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.input_scale <= 0:
            raise ConfigError(f'HPA input scale must be positive, found {self.input_scale}')
        if self.beta_a < 0 or self.beta_phi < 0:
            raise ConfigError('Saleh beta parameters must be non-negative')

    @classmethod
    def from_settings(cls, settings: HpaSettings) -> 'SalehHpa':
        return cls(settings.alpha_a, settings.beta_a, settings.alpha_phi, settings.beta_phi)

    def am_am(self, r: np.ndarray) -> np.ndarray:
        return self.alpha_a * r / (1 + self.beta_a * r**2)

    def am_pm(self, r: np.ndarray) -> np.ndarray:
        return self.alpha_phi * r**2 / (1 + self.beta_phi * r**2)

    def with_input_scale(self, input_scale: float) -> 'SalehHpa':
        return replace(self, input_scale=input_scale)

    @property
    def small_signal_gain(self) -> float:
        """Slope of the AM/AM curve at the origin, referred to the unscaled input."""
        return self.alpha_a * self.input_scale


def apply_hpa(x: np.ndarray, hpa: SalehHpa) -> np.ndarray:
    """x_dis = f_dis(x), sample by sample; zero stays zero."""
    x = np.asarray(x, dtype=complex)
    r = hpa.input_scale * np.abs(x)
    return hpa.am_am(r) * np.exp(1j * (np.angle(x) + hpa.am_pm(r)))


def measure_evm(x: np.ndarray, hpa: SalehHpa) -> float:
    """
    EVM in percent of the amplified samples against the small-signal linear reference.

    Args:
        x: amplifier input, one frame or a batch of frames (pooled)
        hpa: amplifier

    Returns:
        100 * sqrt(sum |x_dis - R|^2 / sum |R|^2) with R = alpha_a * input_scale * x.
    """
    x = np.asarray(x, dtype=complex)
    reference = hpa.small_signal_gain * x
    reference_energy = np.sum(np.abs(reference) ** 2)
    if reference_energy == 0:
        raise UndefinedInputError('EVM is undefined for an all-zero input')
    error_energy = np.sum(np.abs(apply_hpa(x, hpa) - reference) ** 2)
    return float(100 * np.sqrt(error_energy / reference_energy))


def calibrate_drive_level(
    target_evm: float, hpa: SalehHpa, reference_frames: np.ndarray, tolerance: float = EVM_TOLERANCE
) -> float:
    """
    Bisection on the input scale until the pooled EVM over ``reference_frames`` hits ``target_evm``.

    Args:
        target_evm: percent, in (0, 90)
        hpa: amplifier whose drive level is searched (its own input_scale is ignored)
        reference_frames: transmit frames from the operating distribution, shape (count, N)
        tolerance: accepted distance to the target in percentage points

    Returns:
        input scale.
    """
    if not 0 < target_evm < 90:
        raise ConfigError(f'EVM target must lie in (0, 90) percent, found {target_evm}')
    tolerance = min(tolerance, 0.1 * target_evm)
    evaluated: List[Tuple[float, float]] = [(0.0, 0.0)]

    def evm_at(scale: float) -> float:
        value = measure_evm(reference_frames, hpa.with_input_scale(scale))
        for other_scale, other_value in evaluated:
            lower_but_larger = other_scale < scale and other_value > value + 1e-9
            higher_but_smaller = other_scale > scale and other_value < value - 1e-9
            if lower_but_larger or higher_but_smaller:
                raise CalibrationError(
                    f'EVM is not monotone in the drive level near scale {scale:.6g} (target {target_evm}%)'
                )
        evaluated.append((scale, value))
        return value

    low, high = 0.0, 1.0
    while evm_at(high) < target_evm:
        low, high = high, 2 * high
        if high > MAX_INPUT_SCALE:
            raise CalibrationError(f'EVM target {target_evm}% is not reachable below input scale {MAX_INPUT_SCALE:g}')

    for _ in range(200):
        mid = (low + high) / 2
        value = evm_at(mid)
        if abs(value - target_evm) <= tolerance:
            logger.debug('Calibrated EVM %.3f%% at input scale %.6g', value, mid)
            return mid
        if value < target_evm:
            low = mid
        else:
            high = mid
    raise CalibrationError(f'Bisection did not reach EVM target {target_evm}% within {tolerance} pp')


def exponential_pdp(num_paths: int, decay_db: float = PDP_DECAY_DB) -> np.ndarray:
    """Power-delay profile decaying ``decay_db`` per tap, normalized to unit sum."""
    pdp = 10 ** (-decay_db * np.arange(num_paths) / 10)
    return pdp / pdp.sum()


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    """L-tap cyclic multipath channel over frames of length n; ``taps`` is (L,) or one row per frame."""

    taps: np.ndarray
    n: int

    @property
    def num_paths(self) -> int:
        return int(self.taps.shape[-1])

    @property
    def padded_taps(self) -> np.ndarray:
        return zero_pad(self.taps, self.n)

    @property
    def freq_response(self) -> np.ndarray:
        """H[m] = sum_l h_l exp(-j2pi ml/N), i.e. sqrt(N) times the unitary DFT of the padded taps."""
        return np.fft.fft(self.padded_taps, axis=-1)

    @classmethod
    def identity(cls, n: int) -> 'ChannelRealization':
        return cls(np.ones(1, dtype=complex), n)


def draw_taps(num_paths: int, config: DdstConfig, rng: SeedLike, count: Optional[int] = None) -> np.ndarray:
    """Rayleigh taps with the exponential profile, each realization scaled to unit energy."""
    if not 1 <= num_paths <= config.p:
        raise ConfigError(f'Number of paths L={num_paths} must lie in [1, P={config.p}]')
    rng = make_rng(rng)
    shape = (num_paths,) if count is None else (count, num_paths)
    gains = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(exponential_pdp(num_paths) / 2)
    return gains / np.linalg.norm(gains, axis=-1, keepdims=True)


def draw_channel(
    num_paths: int, config: DdstConfig, seed: SeedLike, count: Optional[int] = None
) -> ChannelRealization:
    """One realization, or ``count`` independent ones stacked along the first axis."""
    return ChannelRealization(draw_taps(num_paths, config, seed, count), config.n)


def noise_variance(snr_db: Union[float, np.ndarray], distorted_power: float) -> np.ndarray:
    """sigma_v^2 = E_xdis * 10^(-SNR/10); an infinite SNR gives zero."""
    snr_db = np.asarray(snr_db, dtype=float)
    return distorted_power * 10 ** (-snr_db / 10)


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """One SNR for every frame, or one per frame."""

    snr_db: Union[float, np.ndarray]
    distorted_power: float = 1.0

    @property
    def variance(self) -> Union[float, np.ndarray]:
        variance = noise_variance(self.snr_db, self.distorted_power)
        return float(variance) if variance.ndim == 0 else variance


def complex_noise(shape: Tuple[int, ...], variance: Union[float, np.ndarray], rng: SeedLike) -> np.ndarray:
    """Circular complex Gaussian samples; ``variance`` broadcasts against the leading axes."""
    rng = make_rng(rng)
    scale = np.sqrt(np.asarray(variance, dtype=float) / 2)
    if scale.ndim:
        scale = scale[..., None]
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def estimate_distorted_power(x_dis: np.ndarray) -> float:
    return float(np.mean(np.abs(x_dis) ** 2))


def linear_gain(x: np.ndarray, x_dis: np.ndarray) -> complex:
    """Least-squares complex gain g minimizing sum |x_dis - g x|^2 over the ensemble."""
    x, x_dis = np.asarray(x), np.asarray(x_dis)
    energy = np.sum(np.abs(x) ** 2)
    if energy == 0:
        raise UndefinedInputError('Linear gain is undefined for an all-zero input')
    return complex(np.sum(x_dis * np.conj(x)) / energy)


def apply_channel(taps: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Cyclic multipath: taps (..., L) are zero-padded to the frame length and circularly convolved."""
    return circular_convolve(zero_pad(taps, np.shape(x)[-1]), x)


def transmit(
    x: np.ndarray, hpa: SalehHpa, channel: ChannelRealization, noise: NoiseSpec, seed: SeedLike
) -> np.ndarray:
    """
    y = H_c f_dis(x) + v.

    Args:
        x: superimposed frame(s), shape (..., N)
        hpa: amplifier
        channel: one realization for every frame in ``x``, or one per frame
        noise: SNR against the ensemble distorted power, scalar or per frame
        seed: noise stream; nothing is drawn when every frame is noiseless

    Returns:
        received frame(s).
    """
    y = apply_channel(channel.taps, apply_hpa(x, hpa))
    variance = noise.variance
    if not np.any(variance):
        return y
    return y + complex_noise(y.shape, variance, seed)
