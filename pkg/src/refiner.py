"""CE-Net and SD-Net: training-SNR policies, dataset builders, network refinement steps and the training loop."""
import hashlib
import json
import logging
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.config import TrainingConfig
from src.dsp import reshape_complex_to_real, reshape_real_to_complex
from src.errors import DependencyError, DimensionError, FormatError
from src.link import LinkModel
from src.mlp import AdamOptimizer, MlpModel, backward_and_step, forward, regularization
from src.receivers import ChannelEstimate, EqualizedFrame, ls_estimate, remove_training, zf_equalize
from src.utils import SeedLike, make_rng

logger = logging.getLogger(__name__)

DATASET_VERSION = 1
MIXED_SNR_GRID = tuple(float(s) for s in range(0, 46, 5))
CHUNK_FRAMES = 1000
EVAL_ROWS = 1000


@dataclass(frozen=True)
class SnrPolicy:
    """Per-sample training SNR: uniform over ``grid`` (a one-entry grid is a fixed SNR)."""

    grid: Tuple[float, ...] = MIXED_SNR_GRID
    name: str = 'mixed'

    @classmethod
    def parse(cls, text: str) -> 'SnrPolicy':
        """'mixed', 'inf', a single value '45' or a comma list '0,10,20'."""
        text = text.strip().lower()
        if text == 'mixed':
            return cls()
        try:
            grid = tuple(float(part) for part in text.split(',') if part.strip())
        except ValueError as e:
            raise FormatError(f'Cannot parse training SNR policy {text!r}') from e
        if not grid:
            raise FormatError('Training SNR policy is empty')
        return cls(grid, text)

    def sample(self, count: int, rng: SeedLike) -> np.ndarray:
        if len(self.grid) == 1:
            return np.full(count, self.grid[0])
        return make_rng(rng).choice(np.asarray(self.grid), size=count)


@dataclass(eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    snr_db: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.inputs.shape[0] != self.labels.shape[0] or self.inputs.shape[0] != self.snr_db.shape[0]:
            raise DimensionError(
                f'Dataset row counts differ: inputs {self.inputs.shape}, labels {self.labels.shape}, '
                f'snr {self.snr_db.shape}'
            )
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.labels))):
            raise FormatError('Dataset contains non-finite entries')

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def width(self) -> int:
        return int(self.inputs.shape[1])

    def digest(self) -> str:
        """SHA-256 over the float64 contents, independent of archive timestamps."""
        digest = hashlib.sha256()
        for array in (self.inputs, self.labels, self.snr_db):
            digest.update(np.ascontiguousarray(array, dtype=np.float64).tobytes())
        return digest.hexdigest()

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {'version': DATASET_VERSION, **self.meta}
        with open(path, 'wb') as fh:
            np.savez(
                fh, inputs=self.inputs, labels=self.labels, snr_db=self.snr_db, meta=np.array(json.dumps(meta))
            )
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Dataset':
        try:
            with np.load(path, allow_pickle=False) as archive:
                meta = json.loads(str(archive['meta']))
                return cls(archive['inputs'], archive['labels'], archive['snr_db'], meta)
        except (OSError, KeyError, ValueError, zipfile.BadZipFile) as e:
            raise FormatError(f'Cannot read dataset {path}: {e}') from e


def _chunks(count: int, size: int, desc: str, progress: bool):
    starts = range(0, count, size)
    for start in tqdm(starts, desc=desc, disable=not progress):
        yield start, min(size, count - start)


def refine_estimate(est: ChannelEstimate, model: MlpModel) -> ChannelEstimate:
    """CE-Net step: the reshaped estimate goes through the network and back to complex bins."""
    freq = reshape_real_to_complex(forward(model, reshape_complex_to_real(est.freq_full)))
    p = est.time_taps.shape[-1]
    return ChannelEstimate(freq, np.fft.ifft(freq, axis=-1)[..., :p], 'CE-Net')


def refine_symbols(frame: EqualizedFrame, model: MlpModel) -> EqualizedFrame:
    """SD-Net step on ZF-equalized symbols."""
    symbols = reshape_real_to_complex(forward(model, reshape_complex_to_real(frame.time_symbols)))
    return EqualizedFrame(symbols, 'SD-Net', frame.clipped_bins)


def build_ce_dataset(
    link: LinkModel, count: int, policy: SnrPolicy, seed: SeedLike, progress: bool = True
) -> Dataset:
    """
    CE-Net pairs: the reshaped LS estimate as input, the reshaped effective response gain * H as label.

    Args:
        link: calibrated link
        count: number of samples
        policy: per-sample SNR policy
        seed: seed of the whole dataset
        progress: show a progress bar

    Returns:
        dataset with ``count`` rows of width 2N.
    """
    rng = make_rng(seed)
    inputs, labels, snrs = [], [], []
    for _, size in _chunks(count, CHUNK_FRAMES, 'CE dataset', progress):
        snr = policy.sample(size, rng)
        batch = link.simulate(size, snr, rng)
        est = ls_estimate(batch.received, link.training, link.config)
        inputs.append(reshape_complex_to_real(est.freq_full))
        labels.append(reshape_complex_to_real(batch.effective_response))
        snrs.append(snr)
    return _assemble(inputs, labels, snrs, link, 'ce', policy, count)


def build_sd_dataset(
    link: LinkModel,
    ce_model: Optional[MlpModel],
    count: int,
    policy: SnrPolicy,
    seed: SeedLike,
    perfect_csi: bool = False,
    progress: bool = True,
) -> Dataset:
    """
    SD-Net pairs: ZF-equalized symbols with CE-Net-refined CSI as input, the modulated symbols as label.

    ``perfect_csi`` replaces the refined CSI with the true effective response, so no CE-Net is needed.
    """
    if ce_model is None and not perfect_csi:
        raise DependencyError('SD-Net data needs a trained CE-Net; run "train --net ce" first')
    rng = make_rng(seed)
    proj = link.projector
    inputs, labels, snrs = [], [], []
    for _, size in _chunks(count, CHUNK_FRAMES, 'SD dataset', progress):
        snr = policy.sample(size, rng)
        batch = link.simulate(size, snr, rng)
        if perfect_csi or ce_model is None:
            response = batch.effective_response
            est = ChannelEstimate(response, np.fft.ifft(response, axis=-1)[..., : link.config.p], 'perfect')
        else:
            est = refine_estimate(ls_estimate(batch.received, link.training, link.config), ce_model)
        equalized = zf_equalize(remove_training(batch.received, proj), est)
        inputs.append(reshape_complex_to_real(equalized.time_symbols))
        labels.append(reshape_complex_to_real(batch.symbols))
        snrs.append(snr)
    return _assemble(inputs, labels, snrs, link, 'sd', policy, count)


def _assemble(inputs, labels, snrs, link: LinkModel, kind: str, policy: SnrPolicy, count: int) -> Dataset:
    width = 2 * link.config.n
    meta = {
        'kind': kind,
        'snr_policy': policy.name,
        'target_evm': link.target_evm,
        'measured_evm': link.evm,
        'num_paths': link.num_paths,
    }
    if not inputs:
        return Dataset(np.empty((0, width)), np.empty((0, width)), np.empty(0), meta)
    dataset = Dataset(np.concatenate(inputs), np.concatenate(labels), np.concatenate(snrs), meta)
    logger.info('Built %s dataset: %d samples, width %d, SNR policy %s', kind, count, width, policy.name)
    return dataset


@dataclass
class TrainingResult:
    """``model`` is the snapshot with the lowest validation loss; ``final_model`` the last epoch's."""

    model: MlpModel
    final_model: MlpModel
    history: pd.DataFrame
    best_epoch: int
    best_loss: float
    stopped_early: bool = False


def evaluate(model: MlpModel, inputs: np.ndarray, labels: np.ndarray, alpha: float, rows: int = EVAL_ROWS) -> float:
    """Inference-mode loss over a whole set, scored ``rows`` at a time."""
    if len(inputs) == 0:
        raise DimensionError('Cannot score a network on an empty set')
    total = 0.0
    for start in range(0, len(inputs), rows):
        outputs = forward(model, inputs[start : start + rows])
        total += float(np.sum((outputs - labels[start : start + rows]) ** 2))
    return total / len(inputs) + alpha * regularization(model)


def train(
    model: MlpModel,
    dataset: Dataset,
    validation: Dataset,
    config: TrainingConfig,
    epochs: Optional[int] = None,
    seed: SeedLike = None,
    progress: bool = True,
) -> TrainingResult:
    """
    Mini-batch Adam over shuffled epochs, keeping the best validation snapshot.

    Epoch 0 scores the untrained network, which is a candidate snapshot too. ``train_loss`` is scored like
    ``val_loss`` (inference mode, end of epoch) on the first rows of the training set; ``batch_loss`` is the
    mean mini-batch loss seen during the epoch.

    Args:
        model: initialized network, trained in place
        dataset: training pairs
        validation: validation pairs, scored in inference mode
        config: optimizer, batch size, L2 coefficient, patience
        epochs: overrides ``config.epochs``
        seed: shuffling stream
        progress: show a progress bar over epochs

    Returns:
        best snapshot, last model and per-epoch losses.
    """
    width = model.architecture.layer_sizes[0]
    for name, data in (('training', dataset), ('validation', validation)):
        if data.width != width or data.labels.shape[1] != model.architecture.layer_sizes[-1]:
            raise DimensionError(
                f'The {name} set has width {data.width} -> {data.labels.shape[1]}, '
                f'the network {width} -> {model.architecture.layer_sizes[-1]}'
            )
    epochs = epochs or config.epochs
    rng = make_rng(seed)
    optimizer = AdamOptimizer.from_config(config)
    alpha = config.l2_coefficient
    fit_rows = min(len(dataset), len(validation))

    def score(epoch: int, batch_loss: float) -> Dict[str, float]:
        train_loss = evaluate(model, dataset.inputs[:fit_rows], dataset.labels[:fit_rows], alpha)
        val_loss = evaluate(model, validation.inputs, validation.labels, alpha)
        logger.info('Epoch %d: train loss %.6g, validation loss %.6g', epoch, train_loss, val_loss)
        return {'epoch': epoch, 'batch_loss': batch_loss, 'train_loss': train_loss, 'val_loss': val_loss}

    rows = [score(0, np.nan)]
    best, best_loss, best_epoch, stopped_early = model.copy(), rows[0]['val_loss'], 0, False
    for epoch in tqdm(range(1, epochs + 1), desc='Epochs', disable=not progress):
        order = rng.permutation(len(dataset))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch_losses.append(backward_and_step(model, dataset.inputs[idx], dataset.labels[idx], config, optimizer))
        rows.append(score(epoch, float(np.mean(batch_losses))))
        val_loss = rows[-1]['val_loss']
        if val_loss < best_loss:
            best, best_loss, best_epoch = model.copy(), val_loss, epoch
        elif config.patience is not None and epoch - best_epoch >= config.patience:
            logger.warning(
                'Validation loss has not improved for %d epochs, stopping at epoch %d', config.patience, epoch
            )
            stopped_early = True
            break
    if best_epoch == 0:
        logger.warning('No epoch improved on the untrained network; keeping the untrained snapshot')
    history = pd.DataFrame(rows, columns=['epoch', 'batch_loss', 'train_loss', 'val_loss'])
    return TrainingResult(best, model, history, best_epoch, best_loss, stopped_early)


def with_alpha(config: TrainingConfig, alpha: float) -> TrainingConfig:
    return replace(config, l2_coefficient=alpha)
