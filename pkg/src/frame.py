"""DDST transmit frame construction: QPSK mapping, the data-dependent projection and the periodic training."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.config import DdstConfig
from src.dsp import dft
from src.errors import DimensionError, FormatError
from src.utils import SeedLike, make_rng


def pilot_bins(config: DdstConfig) -> np.ndarray:
    """Frequency bins kQ, k = 0..P-1, that carry the whole training spectrum."""
    return np.arange(config.p) * config.q


@dataclass(frozen=True)
class DdstProjector:
    """
    Applies J = (1/Q) J_Q ⊗ I_P and Θ = I - J without building N x N matrices.

    J_Q[q, q'] = exp(j2pi t (q - q') / Q) is rank one, so J s is a phase-weighted mean of the
    Q length-P blocks of s, replicated back over the blocks with the conjugate weights.
    """

    config: DdstConfig

    @property
    def block_weights(self) -> np.ndarray:
        q = np.arange(self.config.q)
        return np.exp(2j * np.pi * self.config.t * q / self.config.q)

    def _blocks(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        if v.ndim == 0 or v.shape[-1] != self.config.n:
            found = v.shape[-1] if v.ndim else 0
            raise DimensionError(f'Frame length mismatch: expected {self.config.n}, found {found}')
        return v.reshape(v.shape[:-1] + (self.config.q, self.config.p))

    def apply_j(self, v: np.ndarray) -> np.ndarray:
        blocks = self._blocks(v)
        w = self.block_weights[:, None]
        mean = np.mean(np.conj(w) * blocks, axis=-2, keepdims=True)
        return (w * mean).reshape(np.shape(v))

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Θ v = v - J v along the last axis."""
        return np.asarray(v) - self.apply_j(v)

    def dense_j(self) -> np.ndarray:
        """Materialized J, only for small cross-checks."""
        q = np.arange(self.config.q)
        j_q = np.exp(2j * np.pi * self.config.t * np.subtract.outer(q, q) / self.config.q)
        return np.kron(j_q, np.eye(self.config.p)) / self.config.q

    def dense_theta(self) -> np.ndarray:
        return np.eye(self.config.n) - self.dense_j()


def random_bits(config: DdstConfig, rng: SeedLike, count: Optional[int] = None) -> np.ndarray:
    """Uniform bits for one frame (2N) or a batch (count, 2N)."""
    shape = (2 * config.n,) if count is None else (count, 2 * config.n)
    return make_rng(rng).integers(0, 2, size=shape, dtype=np.int8)


def modulate_qpsk(bits: np.ndarray, energy_per_symbol: float) -> np.ndarray:
    """
    Gray QPSK: bit pair (b0, b1) -> ((1 - 2 b0) + j (1 - 2 b1)) sqrt(E / 2).

    Args:
        bits: 0/1 values, shape (..., 2N)
        energy_per_symbol: |symbol|^2 of every constellation point

    Returns:
        symbols, shape (..., N).
    """
    bits = np.asarray(bits)
    if bits.ndim == 0 or bits.shape[-1] % 2:
        raise FormatError(f'QPSK needs an even number of bits, found {bits.shape[-1] if bits.ndim else 0}')
    if np.any((bits != 0) & (bits != 1)):
        raise FormatError('Bits must be 0 or 1')
    pairs = bits.reshape(bits.shape[:-1] + (-1, 2)).astype(float)
    scale = np.sqrt(energy_per_symbol / 2)
    return scale * ((1 - 2 * pairs[..., 0]) + 1j * (1 - 2 * pairs[..., 1]))


def apply_projection(s: np.ndarray, proj: DdstProjector) -> np.ndarray:
    """s_tds = Θ s."""
    return proj.apply(s)


def pilot_spectrum_is_cleared(s_tds: np.ndarray, config: DdstConfig) -> bool:
    """True when every pilot bin of the projected data is below 1e-9 of the frame norm."""
    s_tds = np.asarray(s_tds)
    spectrum = dft(s_tds, size=config.n)[..., pilot_bins(config)]
    norm = np.linalg.norm(s_tds, axis=-1, keepdims=True)
    return bool(np.all(np.abs(spectrum) <= 1e-9 * norm))


def build_training_sequence(config: DdstConfig, seed: SeedLike, count: Optional[int] = None) -> np.ndarray:
    """
    Q repetitions of one random length-P base sequence, scaled to the training power.

    The base sequence is constant-modulus with uniform random phase in the frequency domain, so every
    pilot bin C(kQ) has the same magnitude and the LS division is uniformly conditioned.

    Args:
        config: frame config
        seed: seed or generator
        count: number of independent sequences; ``None`` returns a single (N,) vector

    Returns:
        exactly P-periodic training sequence(s) with mean |c|^2 equal to the training power.
    """
    rng = make_rng(seed)
    shape = (config.p,) if count is None else (count, config.p)
    base_spectrum = np.exp(2j * np.pi * rng.random(shape))
    # unnormalized inverse DFT of a unit-modulus spectrum has mean power 1/P
    base = np.fft.ifft(base_spectrum, axis=-1) * np.sqrt(config.training_power * config.p)
    return np.tile(base, config.q)


def superimpose(s_tds: np.ndarray, c: np.ndarray) -> np.ndarray:
    """x = s_tds + c."""
    s_tds, c = np.asarray(s_tds), np.asarray(c)
    if s_tds.shape[-1] != c.shape[-1]:
        raise DimensionError(f'Cannot superimpose length {c.shape[-1]} training on length {s_tds.shape[-1]} data')
    return s_tds + c
