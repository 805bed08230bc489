"""
Dense MLP engine shared by CE-Net and SD-Net.

Rows are samples: a layer maps a (batch, d_in) array with W of shape (d_in, d_out) and b of shape (d_out,).
The input batch-norm has no learnable scale or shift. A residual network adds its raw input to the output of the
last layer, which then starts at zero so the untrained network is the identity map.
"""
import hashlib
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from src.config import TrainingConfig
from src.errors import CheckpointFormatError, DimensionError, DivergenceError
from src.utils import SeedLike, make_rng

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
BN_EPSILON = 1e-9
BN_MOMENTUM = 0.99
ACTIVATIONS = ('none', 'relu', 'linear')


@dataclass(frozen=True)
class MlpArchitecture:
    layer_sizes: Tuple[int, ...]
    activations: Tuple[str, ...]
    input_batch_norm: bool = True
    residual: bool = False

    def __post_init__(self) -> None:
        if len(self.layer_sizes) < 2 or len(self.layer_sizes) != len(self.activations):
            raise DimensionError(
                f'Need at least two layers and one activation tag per layer, found sizes {self.layer_sizes} '
                f'and activations {self.activations}'
            )
        if any(size < 1 for size in self.layer_sizes):
            raise DimensionError(f'Layer sizes must be positive, found {self.layer_sizes}')
        if self.activations[0] != 'none' or any(a not in ACTIVATIONS[1:] for a in self.activations[1:]):
            raise DimensionError(
                f'Input layer takes "none" and later layers "relu" or "linear", found {self.activations}'
            )
        if self.residual and self.layer_sizes[0] != self.layer_sizes[-1]:
            raise DimensionError(f'A residual network needs equal input and output widths, found {self.layer_sizes}')

    @classmethod
    def ce_net(cls, n: int, residual: bool = False) -> 'MlpArchitecture':
        return cls((2 * n, 2 * n, 2 * n, 2 * n), ('none', 'relu', 'relu', 'linear'), residual=residual)

    @classmethod
    def sd_net(cls, n: int, residual: bool = False) -> 'MlpArchitecture':
        return cls(
            (2 * n, 2 * n, 12 * n, 6 * n, 2 * n), ('none', 'relu', 'relu', 'relu', 'linear'), residual=residual
        )

    @property
    def weight_shapes(self) -> List[Tuple[int, int]]:
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'layer_sizes': list(self.layer_sizes),
            'activations': list(self.activations),
            'input_batch_norm': self.input_batch_norm,
            'residual': self.residual,
        }


@dataclass(eq=False)
class MlpModel:
    architecture: MlpArchitecture
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    bn_mean: np.ndarray
    bn_var: np.ndarray
    step: int = 0
    config_hash: str = ''

    def copy(self) -> 'MlpModel':
        return MlpModel(
            self.architecture,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.bn_mean.copy(),
            self.bn_var.copy(),
            self.step,
            self.config_hash,
        )

    @property
    def parameters(self) -> List[np.ndarray]:
        return self.weights + self.biases


@dataclass
class Gradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    inputs: np.ndarray


@dataclass
class _ForwardCache:
    normalized: np.ndarray
    batch_mean: np.ndarray
    batch_var: np.ndarray
    activations: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)


def glorot_init(arch: MlpArchitecture, seed: SeedLike) -> MlpModel:
    """
    Glorot-uniform weights, zero biases, batch-norm statistics at mean 0 and variance 1.

    The last layer of a residual network is drawn like the others and then zeroed, so seeds line up with the
    plain network of the same sizes.
    """
    rng = make_rng(seed)
    weights = []
    for fan_in, fan_out in arch.weight_shapes:
        limit = np.sqrt(6 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
    if arch.residual:
        weights[-1] = np.zeros_like(weights[-1])
    biases = [np.zeros(fan_out) for _, fan_out in arch.weight_shapes]
    width = arch.layer_sizes[0]
    return MlpModel(arch, weights, biases, np.zeros(width), np.ones(width))


def _as_batch(model: MlpModel, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=float)
    batch = x[None, :] if x.ndim == 1 else x
    width = model.architecture.layer_sizes[0]
    if batch.ndim != 2 or batch.shape[1] != width:
        raise DimensionError(f'Network input width must be {width}, found shape {x.shape}')
    return batch


def _run(model: MlpModel, batch: np.ndarray, mode: str) -> Tuple[np.ndarray, _ForwardCache]:
    if mode not in ('train', 'infer'):
        raise ValueError(f'Unknown mode {mode!r}, expected "train" or "infer"')
    if mode == 'train':
        mean, var = batch.mean(axis=0), batch.var(axis=0)
    else:
        mean, var = model.bn_mean, model.bn_var
    if model.architecture.input_batch_norm:
        normalized = (batch - mean) / np.sqrt(var + BN_EPSILON)
    else:
        normalized = batch
    cache = _ForwardCache(normalized, mean, var, activations=[normalized])
    a = normalized
    for w, b, tag in zip(model.weights, model.biases, model.architecture.activations[1:]):
        z = a @ w + b
        a = np.maximum(z, 0) if tag == 'relu' else z
        cache.pre_activations.append(z)
        cache.activations.append(a)
    if model.architecture.residual:
        a = a + batch
    return a, cache


def forward(model: MlpModel, inputs: np.ndarray, mode: str = 'infer') -> np.ndarray:
    """
    Forward pass.

    Args:
        model: network
        inputs: one row of width layer_sizes[0] or a batch of rows
        mode: 'train' normalizes with batch statistics, 'infer' with the running statistics

    Returns:
        outputs with the same leading shape as ``inputs``.
    """
    batch = _as_batch(model, inputs)
    out, _ = _run(model, batch, mode)
    return out[0] if np.ndim(inputs) == 1 else out


def regularization(model: MlpModel) -> float:
    return float(sum(np.sum(w**2) for w in model.weights))


def loss(model: MlpModel, inputs: np.ndarray, labels: np.ndarray, alpha: float, mode: str = 'train') -> float:
    """Mean over the batch of the squared error norm plus alpha times the squared norms of all weights."""
    outputs = forward(model, _as_batch(model, inputs), mode)
    labels = np.asarray(labels, dtype=float).reshape(outputs.shape)
    return float(np.mean(np.sum((outputs - labels) ** 2, axis=1)) + alpha * regularization(model))


def gradients(
    model: MlpModel, inputs: np.ndarray, labels: np.ndarray, alpha: float
) -> Tuple[float, Gradients, _ForwardCache]:
    """Train-mode loss and its exact gradients, including the batch-norm input gradient."""
    batch = _as_batch(model, inputs)
    out, cache = _run(model, batch, 'train')
    labels = np.asarray(labels, dtype=float).reshape(out.shape)
    size = batch.shape[0]
    residual = out - labels
    value = float(np.sum(residual**2) / size + alpha * regularization(model))

    delta = 2 * residual / size
    skip = delta if model.architecture.residual else 0.0
    grad_w: List[np.ndarray] = [np.empty(0)] * len(model.weights)
    grad_b: List[np.ndarray] = [np.empty(0)] * len(model.weights)
    tags = model.architecture.activations[1:]
    for i in reversed(range(len(model.weights))):
        if tags[i] == 'relu':
            delta = delta * (cache.pre_activations[i] > 0)
        grad_w[i] = cache.activations[i].T @ delta + 2 * alpha * model.weights[i]
        grad_b[i] = delta.sum(axis=0)
        delta = delta @ model.weights[i].T

    if model.architecture.input_batch_norm:
        inv_std = 1 / np.sqrt(cache.batch_var + BN_EPSILON)
        xhat = cache.normalized
        delta = inv_std * (delta - delta.mean(axis=0) - xhat * (delta * xhat).mean(axis=0))
    return value, Gradients(grad_w, grad_b, delta + skip), cache


class AdamOptimizer:
    """Bias-corrected Adam over a fixed list of parameter arrays."""

    def __init__(self, learning_rate: float, beta1: float, beta2: float, epsilon: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m: Optional[List[np.ndarray]] = None
        self.v: Optional[List[np.ndarray]] = None

    @classmethod
    def from_config(cls, config: TrainingConfig) -> 'AdamOptimizer':
        return cls(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon)

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> List[np.ndarray]:
        if self.m is None or self.v is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        updated = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g**2
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            updated.append(p - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon))
        return updated


def backward_and_step(
    model: MlpModel, inputs: np.ndarray, labels: np.ndarray, config: TrainingConfig, optimizer: AdamOptimizer
) -> float:
    """
    One Adam step on a mini-batch; updates ``model`` in place.

    Args:
        model: network, mutated
        inputs: batch of inputs
        labels: batch of labels
        config: supplies the L2 coefficient
        optimizer: Adam state carried across steps

    Returns:
        train-mode loss of the batch before the update.
    """
    value, grads, cache = gradients(model, inputs, labels, config.l2_coefficient)
    step = model.step + 1
    flat = grads.weights + grads.biases
    if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in flat):
        raise DivergenceError(f'Non-finite loss or gradient at training step {step}')
    updated = optimizer.step(model.parameters, flat)
    if not all(np.all(np.isfinite(p)) for p in updated):
        raise DivergenceError(f'Non-finite parameters after training step {step}')
    count = len(model.weights)
    model.weights, model.biases = updated[:count], updated[count:]
    model.bn_mean = BN_MOMENTUM * model.bn_mean + (1 - BN_MOMENTUM) * cache.batch_mean
    model.bn_var = BN_MOMENTUM * model.bn_var + (1 - BN_MOMENTUM) * cache.batch_var
    model.step = step
    return value


def _tensors(model: MlpModel) -> Dict[str, np.ndarray]:
    arrays = {f'weight_{i}': w for i, w in enumerate(model.weights)}
    arrays.update({f'bias_{i}': b for i, b in enumerate(model.biases)})
    arrays['bn_mean'] = model.bn_mean
    arrays['bn_var'] = model.bn_var
    return arrays


def _meta(model: MlpModel, kind: str) -> Dict[str, Any]:
    return {
        'version': CHECKPOINT_VERSION,
        'kind': kind,
        **model.architecture.to_dict(),
        'step': model.step,
        'config_hash': model.config_hash,
    }


def checkpoint_digest(model: MlpModel) -> str:
    """SHA-256 over the metadata and every tensor, independent of archive timestamps."""
    digest = hashlib.sha256(json.dumps(_meta(model, 'mlp'), sort_keys=True).encode('utf-8'))
    for name, array in sorted(_tensors(model).items()):
        digest.update(name.encode('utf-8'))
        digest.update(np.ascontiguousarray(array, dtype=np.float64).tobytes())
    return digest.hexdigest()


def save_checkpoint(model: MlpModel, path: Union[str, Path], kind: str = 'mlp') -> Path:
    """Write an .npz archive with float64 tensors and a JSON ``meta`` entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: np.asarray(a, dtype=np.float64) for name, a in _tensors(model).items()}
    with open(path, 'wb') as fh:
        np.savez(fh, meta=np.array(json.dumps(_meta(model, kind), sort_keys=True)), **arrays)
    logger.info('Saved %s checkpoint at step %d to %s', kind, model.step, path)
    return path


def load_checkpoint(path: Union[str, Path], expected_arch: Optional[MlpArchitecture] = None) -> MlpModel:
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Args:
        path: archive path
        expected_arch: when given, the stored architecture must match it

    Returns:
        model.
    """
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive['meta']))
            if meta.get('version') != CHECKPOINT_VERSION:
                raise CheckpointFormatError(f'Unsupported checkpoint version {meta.get("version")} in {path}')
            arch = MlpArchitecture(
                tuple(meta['layer_sizes']),
                tuple(meta['activations']),
                bool(meta['input_batch_norm']),
                bool(meta.get('residual', False)),
            )
            count = len(arch.layer_sizes) - 1
            weights = [archive[f'weight_{i}'] for i in range(count)]
            biases = [archive[f'bias_{i}'] for i in range(count)]
            bn_mean, bn_var = archive['bn_mean'], archive['bn_var']
    except CheckpointFormatError:
        raise
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as e:
        raise CheckpointFormatError(f'Cannot read checkpoint {path}: {e}') from e

    if expected_arch is not None and arch != expected_arch:
        raise CheckpointFormatError(
            f'Checkpoint {path} has architecture {arch.layer_sizes} {arch.activations}, '
            f'expected {expected_arch.layer_sizes} {expected_arch.activations}'
        )
    found = [w.shape for w in weights]
    if found != arch.weight_shapes or [b.shape for b in biases] != [(s,) for _, s in arch.weight_shapes]:
        raise CheckpointFormatError(f'Checkpoint {path} tensors {found} do not match layers {arch.layer_sizes}')
    return MlpModel(arch, weights, biases, bn_mean, bn_var, int(meta['step']), str(meta['config_hash']))
