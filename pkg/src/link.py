"""End-to-end link model: a calibrated amplifier, a fixed training sequence and batched frame simulation."""
import logging
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from src.config import DdstConfig
from src.frame import DdstProjector, apply_projection, build_training_sequence, modulate_qpsk, random_bits, superimpose
from src.impairments import (
    NoiseSpec,
    SalehHpa,
    apply_hpa,
    calibrate_drive_level,
    draw_channel,
    estimate_distorted_power,
    exponential_pdp,
    linear_gain,
    measure_evm,
    transmit,
)
from src.utils import SeedLike, make_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ChannelStatistics:
    """Diagonal prior covariance of the effective channel taps over the training period."""

    tap_powers: np.ndarray


@dataclass(frozen=True, eq=False)
class FrameBatch:
    bits: np.ndarray
    symbols: np.ndarray
    projected: np.ndarray
    transmitted: np.ndarray
    distorted: np.ndarray
    received: np.ndarray
    taps: np.ndarray
    freq_response: np.ndarray
    effective_response: np.ndarray
    snr_db: np.ndarray
    noise_variance: np.ndarray

    def __len__(self) -> int:
        return int(self.received.shape[0])


@dataclass(frozen=True, eq=False)
class LinkModel:
    """
    Everything the transmitter, the channel and the receivers share for one operating point.

    ``gain`` is the ensemble linear gain of the amplifier: the receivers see the channel as gain * H.
    """

    config: DdstConfig
    hpa: SalehHpa
    num_paths: int
    training: np.ndarray
    distorted_power: float
    gain: complex
    evm: float
    target_evm: Optional[float] = None

    @property
    def projector(self) -> DdstProjector:
        return DdstProjector(self.config)

    def with_num_paths(self, num_paths: int) -> 'LinkModel':
        return replace(self, num_paths=num_paths)

    def channel_statistics(self) -> ChannelStatistics:
        powers = np.zeros(self.config.p)
        powers[: self.num_paths] = abs(self.gain) ** 2 * exponential_pdp(self.num_paths)
        return ChannelStatistics(powers)

    def simulate(self, count: int, snr_db: Union[float, np.ndarray], rng: SeedLike) -> FrameBatch:
        """
        Run ``count`` frames through modulation, projection, superposition, the amplifier, the channel and noise.

        Args:
            count: number of frames
            snr_db: one SNR for all frames or one per frame; +inf is noiseless
            rng: random stream for bits, channels and noise

        Returns:
            every intermediate stage of the batch.
        """
        rng = make_rng(rng)
        bits = random_bits(self.config, rng, count)
        symbols = modulate_qpsk(bits, self.config.symbol_energy)
        projected = apply_projection(symbols, self.projector)
        transmitted = superimpose(projected, np.broadcast_to(self.training, projected.shape))
        channel = draw_channel(self.num_paths, self.config, rng, count)
        snr = np.broadcast_to(np.asarray(snr_db, dtype=float), (count,)).copy()
        noise = NoiseSpec(snr, self.distorted_power)
        received = transmit(transmitted, self.hpa, channel, noise, rng)
        freq_response = channel.freq_response
        return FrameBatch(
            bits=bits,
            symbols=symbols,
            projected=projected,
            transmitted=transmitted,
            distorted=apply_hpa(transmitted, self.hpa),
            received=received,
            taps=channel.taps,
            freq_response=freq_response,
            effective_response=self.gain * freq_response,
            snr_db=snr,
            noise_variance=np.asarray(noise.variance),
        )


def reference_frames(config: DdstConfig, training: np.ndarray, count: int, rng: SeedLike) -> np.ndarray:
    """Superimposed transmit frames drawn from the operating distribution."""
    bits = random_bits(config, rng, count)
    projected = apply_projection(modulate_qpsk(bits, config.symbol_energy), DdstProjector(config))
    return superimpose(projected, np.broadcast_to(training, projected.shape))


def build_link(
    config: DdstConfig,
    hpa: SalehHpa,
    target_evm: Optional[float],
    num_paths: int,
    seed: SeedLike,
    reference_count: int = 1000,
) -> LinkModel:
    """
    Draw the training sequence, calibrate the drive level and freeze the ensemble statistics.

    Args:
        config: frame config
        hpa: amplifier with its Saleh parameters
        target_evm: percent; ``None`` keeps the amplifier's own input scale
        num_paths: channel length L
        seed: seed of the training sequence and the reference ensemble
        reference_count: frames in the reference ensemble

    Returns:
        link model.
    """
    rng = make_rng(seed)
    training = build_training_sequence(config, rng)
    reference = reference_frames(config, training, reference_count, rng)
    if target_evm is not None:
        hpa = hpa.with_input_scale(calibrate_drive_level(target_evm, hpa, reference))
    distorted = apply_hpa(reference, hpa)
    evm = measure_evm(reference, hpa)
    link = LinkModel(
        config=config,
        hpa=hpa,
        num_paths=num_paths,
        training=training,
        distorted_power=estimate_distorted_power(distorted),
        gain=linear_gain(reference, distorted),
        evm=evm,
        target_evm=target_evm,
    )
    logger.info(
        'Link ready: EVM %.2f%% at input scale %.4g, distorted power %.4g, L=%d',
        evm,
        hpa.input_scale,
        link.distorted_power,
        num_paths,
    )
    return link
