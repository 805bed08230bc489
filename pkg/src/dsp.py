"""Unitary DFT and the complex-vector helpers shared by the transmitter and the receivers.

All functions work along the last axis, so a batch of frames is a ``(count, N)`` array.
"""
from typing import Optional

import numpy as np
from scipy.linalg import circulant

from src.errors import DimensionError

DIRECTIONS = ('forward', 'inverse')


def dft(v: np.ndarray, direction: str = 'forward', size: Optional[int] = None) -> np.ndarray:
    """
    Unitary DFT (1/sqrt(N) in both directions) along the last axis.

    Args:
        v: complex samples, shape (..., N)
        direction: 'forward' uses exp(-j2pi kn/N), 'inverse' is its conjugate transpose
        size: expected transform size; checked against the last axis when given

    Returns:
        transformed samples with the same shape.
    """
    v = np.asarray(v)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise DimensionError('DFT input must be a non-empty vector')
    if size is not None and v.shape[-1] != size:
        raise DimensionError(f'DFT size mismatch: expected {size}, found {v.shape[-1]}')
    if direction == 'forward':
        return np.fft.fft(v, axis=-1, norm='ortho')
    if direction == 'inverse':
        return np.fft.ifft(v, axis=-1, norm='ortho')
    raise ValueError(f'Unknown DFT direction {direction!r}, expected one of {DIRECTIONS}')


def zero_pad(h: np.ndarray, n: int) -> np.ndarray:
    """Append zeros to the last axis of ``h`` up to length ``n``."""
    h = np.asarray(h)
    if h.shape[-1] > n:
        raise DimensionError(f'Cannot zero-pad {h.shape[-1]} taps to length {n}')
    pad = [(0, 0)] * (h.ndim - 1) + [(0, n - h.shape[-1])]
    return np.pad(h, pad)


def circular_convolve(h: np.ndarray, x: np.ndarray) -> np.ndarray:
    """
    Multiply ``x`` by the circulant matrix whose first column is ``h`` (spectral method).

    Args:
        h: channel taps already zero-padded to the frame length, shape (..., N)
        x: frame, shape (..., N)

    Returns:
        H_c x with shape broadcast from the inputs.
    """
    h, x = np.asarray(h), np.asarray(x)
    if h.shape[-1] != x.shape[-1]:
        raise DimensionError(f'Circular convolution length mismatch: taps {h.shape[-1]}, frame {x.shape[-1]}')
    n = x.shape[-1]
    return dft(np.sqrt(n) * dft(h) * dft(x), 'inverse')


def circular_convolve_direct(h: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Single-frame circulant matrix-vector product, the reference for the spectral path."""
    h, x = np.asarray(h), np.asarray(x)
    if h.ndim != 1 or h.shape != x.shape:
        raise DimensionError(f'Direct circular convolution needs equal 1-D inputs, found {h.shape} and {x.shape}')
    return circulant(h) @ x


def reshape_complex_to_real(v: np.ndarray) -> np.ndarray:
    """Stack real parts then imaginary parts: (..., N) complex -> (..., 2N) real."""
    v = np.asarray(v)
    return np.concatenate([v.real, v.imag], axis=-1)


def reshape_real_to_complex(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`reshape_complex_to_real`: first N entries real, last N imaginary."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] % 2:
        raise DimensionError(f'Real-valued vector must have even length, found {v.shape[-1]}')
    n = v.shape[-1] // 2
    return v[..., :n] + 1j * v[..., n:]
