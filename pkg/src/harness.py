"""Experiment commands: dataset generation, training, online inference, BER sweeps and EVM calibration."""
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import beta
from tqdm import tqdm

from src.config import ExperimentConfig, SweepSettings, TrainingConfig, split_variants
from src.errors import ConfigError, DependencyError, DimensionError
from src.impairments import SalehHpa
from src.link import FrameBatch, LinkModel, build_link
from src.mlp import MlpArchitecture, MlpModel, checkpoint_digest, glorot_init, load_checkpoint, save_checkpoint
from src.receivers import (
    EqualizedFrame,
    count_errors,
    demap_qpsk,
    ls_estimate,
    mmse_equalize,
    mmse_estimate,
    remove_training,
    zf_equalize,
)
from src.refiner import (
    Dataset,
    SnrPolicy,
    build_ce_dataset,
    build_sd_dataset,
    refine_estimate,
    refine_symbols,
    train,
    with_alpha,
)
from src.utils import config_hash, file_digest, spawn_seeds, write_json, write_table

logger = logging.getLogger(__name__)

ESTIMATORS = ('LS_CE', 'MMSE_CE', 'CE_Net')
DETECTORS = ('ZF_SD', 'MMSE_SD', 'SD_Net')
ALL_VARIANTS = tuple(f'{e} + {d}' for e in ESTIMATORS for d in DETECTORS)
NETS = ('ce', 'sd')

LINK_STREAM, CE_STREAM, SD_STREAM, SWEEP_STREAM, INFER_STREAM = range(5)
NET_STREAMS = {'ce': CE_STREAM, 'sd': SD_STREAM}

SWEEP_COLUMNS = [
    'variant',
    'snr_db',
    'evm_pct',
    'measured_evm',
    'L',
    'trials',
    'bits',
    'bit_errors',
    'ber',
    'ci_low',
    'ci_high',
    'capped',
    'clipped_bins',
    'wall_time',
]


def stream(config: ExperimentConfig, *key: int) -> np.random.SeedSequence:
    """Named random stream derived from the experiment seed."""
    return np.random.SeedSequence([config.seed, *key])


def experiment_hash(config: ExperimentConfig, **extra: Any) -> str:
    """Provenance hash of the experiment; the output directory is not part of it."""
    payload = config.to_dict()
    payload.pop('out_dir')
    return config_hash({**payload, **extra})


def make_link(config: ExperimentConfig, target_evm: Optional[float], num_paths: int) -> LinkModel:
    """The link every command shares: same training sequence and reference ensemble for a given seed."""
    return build_link(
        config.frame,
        SalehHpa.from_settings(config.hpa),
        target_evm,
        num_paths,
        stream(config, LINK_STREAM),
        config.hpa.reference_frames,
    )


def architecture_for(net: str, config: ExperimentConfig) -> MlpArchitecture:
    if net == 'ce':
        return MlpArchitecture.ce_net(config.frame.n, config.ce_training.residual)
    if net == 'sd':
        return MlpArchitecture.sd_net(config.frame.n, config.sd_training.residual)
    raise ConfigError(f'Unknown network {net!r}, expected one of {NETS}')


def training_config_for(net: str, config: ExperimentConfig) -> TrainingConfig:
    return config.ce_training if net == 'ce' else config.sd_training


def checkpoint_path(config: ExperimentConfig, net: str, override: Optional[str] = None) -> Path:
    return Path(override) if override else Path(config.out_dir) / f'{net}_net.npz'


def dataset_paths(config: ExperimentConfig, net: str) -> Tuple[Path, Path]:
    out = Path(config.out_dir)
    return out / f'{net}_train.npz', out / f'{net}_validation.npz'


def require_checkpoint(config: ExperimentConfig, net: str, override: Optional[str] = None) -> MlpModel:
    """Load a trained network or fail with the command that produces it."""
    path = checkpoint_path(config, net, override)
    if not path.is_file():
        raise DependencyError(f'{net.upper()}-Net checkpoint {path} not found; run "train --net {net}" first')
    return load_checkpoint(path, expected_arch=architecture_for(net, config))


@dataclass(frozen=True, eq=False)
class NeuralModels:
    ce: Optional[MlpModel] = None
    sd: Optional[MlpModel] = None


def parse_variants(names: Sequence[str]) -> List[Tuple[str, str]]:
    pairs = split_variants(list(names))
    for estimator, detector in pairs:
        if estimator not in ESTIMATORS or detector not in DETECTORS:
            raise ConfigError(
                f'Unknown receiver variant "{estimator} + {detector}"; estimators are {ESTIMATORS}, '
                f'detectors are {DETECTORS}'
            )
    return pairs


def load_models(
    config: ExperimentConfig,
    variants: Sequence[Tuple[str, str]],
    ce_checkpoint: Optional[str] = None,
    sd_checkpoint: Optional[str] = None,
) -> NeuralModels:
    """Load only the networks the variants use, so classic-only runs need no checkpoint."""
    needs_ce = any(estimator == 'CE_Net' for estimator, _ in variants)
    needs_sd = any(detector == 'SD_Net' for _, detector in variants)
    return NeuralModels(
        ce=require_checkpoint(config, 'ce', ce_checkpoint) if needs_ce else None,
        sd=require_checkpoint(config, 'sd', sd_checkpoint) if needs_sd else None,
    )


def run_variant(
    batch: FrameBatch, link: LinkModel, estimator: str, detector: str, models: NeuralModels
) -> EqualizedFrame:
    """
    Equalized symbols of a batch for one estimator/detector pair.

    SD_Net always refines the ZF output computed with the chosen estimator's CSI.
    """
    config = link.config
    y = batch.received
    if estimator == 'LS_CE':
        est = ls_estimate(y, link.training, config)
    elif estimator == 'MMSE_CE':
        est = mmse_estimate(y, link.training, config, link.channel_statistics(), batch.noise_variance)
    elif estimator == 'CE_Net' and models.ce is not None:
        est = refine_estimate(ls_estimate(y, link.training, config), models.ce)
    else:
        raise DependencyError(f'Estimator {estimator} is unavailable')

    y_clean = remove_training(y, link.projector)
    if detector == 'ZF_SD':
        frame = zf_equalize(y_clean, est)
    elif detector == 'MMSE_SD':
        frame = mmse_equalize(y_clean, est, batch.noise_variance, config.symbol_energy)
    elif detector == 'SD_Net' and models.sd is not None:
        frame = refine_symbols(zf_equalize(y_clean, est), models.sd)
    else:
        raise DependencyError(f'Detector {detector} is unavailable')
    return frame


def cmd_generate(
    config: ExperimentConfig,
    net: str = 'ce',
    count: Optional[int] = None,
    train_snr: Optional[str] = None,
    ce_checkpoint: Optional[str] = None,
    perfect_csi: bool = False,
    progress: bool = True,
) -> Dict[str, Path]:
    """
    Generate the training and validation sets of one network and a JSON manifest.

    Args:
        config: experiment config
        net: 'ce' or 'sd'
        count: training rows (validation gets a third); defaults to the configured sizes
        train_snr: SNR policy text, overrides the configured policy
        ce_checkpoint: CE-Net checkpoint for SD data; defaults to the one in the output directory
        perfect_csi: build SD data with the true channel instead of CE-Net
        progress: show progress bars

    Returns:
        paths of the written files.
    """
    architecture_for(net, config)
    policy = SnrPolicy.parse(train_snr or config.dataset.snr_policy)
    if count is None:
        train_count, validation_count = config.dataset.train_samples, config.dataset.validation_samples
    else:
        train_count, validation_count = count, max(1, count // 3)
    ce_model = None
    if net == 'sd' and not perfect_csi:
        ce_model = require_checkpoint(config, 'ce', ce_checkpoint)

    link = make_link(config, config.hpa.target_evm, config.num_paths)
    provenance = experiment_hash(config, net=net, count=count, snr_policy=policy.name, perfect_csi=perfect_csi)
    key = NET_STREAMS[net]
    train_path, validation_path = dataset_paths(config, net)
    manifest: Dict[str, Any] = {
        'net': net,
        'config_hash': provenance,
        'seed': config.seed,
        'snr_policy': policy.name,
        'target_evm': link.target_evm,
        'measured_evm': link.evm,
        'input_scale': link.hpa.input_scale,
    }
    for part, rows, path in (('train', train_count, train_path), ('validation', validation_count, validation_path)):
        seed = stream(config, key, 0 if part == 'train' else 1)
        if net == 'ce':
            data = build_ce_dataset(link, rows, policy, seed, progress=progress)
        else:
            data = build_sd_dataset(link, ce_model, rows, policy, seed, perfect_csi=perfect_csi, progress=progress)
        data.meta['config_hash'] = provenance
        data.save(path)
        manifest[part] = {'path': str(path), 'rows': len(data), 'width': data.width, 'digest': data.digest()}
        logger.info('Wrote %d %s rows to %s', len(data), part, path)
    manifest_path = write_json(manifest, Path(config.out_dir) / f'manifest_{net}.json')
    return {'train': train_path, 'validation': validation_path, 'manifest': manifest_path}


def _load_datasets(config: ExperimentConfig, net: str) -> Tuple[Dataset, Dataset]:
    paths = dataset_paths(config, net)
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise DependencyError(f'Dataset files {missing} not found; run "generate --net {net}" first')
    return Dataset.load(paths[0]), Dataset.load(paths[1])


def cmd_train(
    config: ExperimentConfig,
    net: str = 'ce',
    alpha_grid: Optional[Sequence[float]] = None,
    epochs: Optional[int] = None,
    progress: bool = True,
) -> Dict[str, Any]:
    """
    Train one network from its generated datasets and keep the best-validation checkpoint.

    With ``alpha_grid`` one model per L2 coefficient is trained from the same initialization, and a summary
    of the converged losses is written next to the per-alpha loss curves.
    """
    arch = architecture_for(net, config)
    if net == 'sd' and not checkpoint_path(config, 'ce').is_file():
        raise DependencyError('SD-Net training needs the trained CE-Net; run "train --net ce" first')
    dataset, validation = _load_datasets(config, net)
    base = training_config_for(net, config)
    key = NET_STREAMS[net]
    out = Path(config.out_dir)

    def fit(training: TrainingConfig, suffix: str) -> Dict[str, Any]:
        model = glorot_init(arch, stream(config, key, 2))
        result = train(model, dataset, validation, training, epochs, stream(config, key, 3), progress)
        provenance = experiment_hash(config, net=net, alpha=training.l2_coefficient, epochs=epochs)
        result.model.config_hash = provenance
        ckpt = save_checkpoint(result.model, out / f'{net}_net{suffix}.npz', kind=net)
        history = result.history.assign(alpha=training.l2_coefficient, snr_policy=dataset.meta.get('snr_policy'))
        curve = write_table(history, out / f'{net}_loss{suffix}.csv', provenance)
        last = result.history.iloc[-1]
        return {
            'alpha': training.l2_coefficient,
            'checkpoint': str(ckpt),
            'loss_csv': str(curve),
            'digest': checkpoint_digest(result.model),
            'file_sha256': file_digest(ckpt),
            'best_epoch': result.best_epoch,
            'best_val_loss': result.best_loss,
            'final_train_loss': float(last['train_loss']),
            'final_val_loss': float(last['val_loss']),
            'stopped_early': result.stopped_early,
        }

    if not alpha_grid:
        report = fit(base, '')
        write_json(report, out / f'manifest_train_{net}.json')
        return report

    runs = [fit(with_alpha(base, alpha), f'_alpha{alpha:g}') for alpha in alpha_grid]
    summary = pd.DataFrame(runs)
    summary['train_val_gap'] = (summary['final_val_loss'] - summary['final_train_loss']).abs() / summary[
        ['final_val_loss', 'final_train_loss']
    ].max(axis=1)
    summary_path = write_table(summary, out / f'{net}_alpha_summary.csv', experiment_hash(config, alphas=alpha_grid))
    return {'runs': runs, 'summary': str(summary_path)}


class OnlineReceiver:
    """Online procedure: LS estimation, CE-Net, training removal with ZF, SD-Net, then hard decisions."""

    STAGES = ('ls_estimation', 'ce_net', 'zf_equalization', 'sd_net')

    def __init__(self, link: LinkModel, ce_model: MlpModel, sd_model: MlpModel):
        self.link = link
        self.ce_model = ce_model
        self.sd_model = sd_model

    def detect(self, y: np.ndarray) -> Tuple[np.ndarray, List[str]]:
        """Bits of one received frame and the stages it went through."""
        config = self.link.config
        y = np.asarray(y)
        if y.shape != (config.n,):
            raise DimensionError(f'Received frame must have shape ({config.n},), found {y.shape}')
        trace = []
        est = ls_estimate(y, self.link.training, config)
        trace.append('ls_estimation')
        est = refine_estimate(est, self.ce_model)
        trace.append('ce_net')
        frame = zf_equalize(remove_training(y, self.link.projector), est)
        trace.append('zf_equalization')
        frame = refine_symbols(frame, self.sd_model)
        trace.append('sd_net')
        return demap_qpsk(frame), trace


@dataclass(eq=False)
class InferenceReport:
    bits: np.ndarray
    latency_ms: np.ndarray
    trace: List[str]
    bit_errors: Optional[np.ndarray] = None

    @property
    def ber(self) -> Optional[float]:
        if self.bit_errors is None:
            return None
        return float(self.bit_errors.sum() / self.bits.size)


def cmd_infer(
    config: ExperimentConfig,
    frames: int = 200,
    snr_db: Optional[float] = None,
    source: Optional[str] = None,
    ce_checkpoint: Optional[str] = None,
    sd_checkpoint: Optional[str] = None,
    progress: bool = True,
) -> InferenceReport:
    """
    Run the online receiver frame by frame.

    Args:
        config: experiment config
        frames: number of simulated frames when no ``source`` is given
        snr_db: SNR of the simulated frames; defaults to the top of the sweep grid
        source: .npy file with received frames of shape (count, N)
        ce_checkpoint: CE-Net checkpoint path override
        sd_checkpoint: SD-Net checkpoint path override
        progress: show a progress bar

    Returns:
        detected bits, per-frame latency, and bit errors when the frames were simulated.
    """
    ce_model = require_checkpoint(config, 'ce', ce_checkpoint)
    sd_model = require_checkpoint(config, 'sd', sd_checkpoint)
    receiver = OnlineReceiver(make_link(config, config.hpa.target_evm, config.num_paths), ce_model, sd_model)
    n = config.frame.n
    truth = None
    if source is not None:
        received = np.load(source, allow_pickle=False)
        if received.ndim == 1:
            received = received[None, :]
        if received.ndim != 2 or received.shape[1] != n:
            raise DimensionError(f'Frames in {source} must have shape (count, {n}), found {received.shape}')
    else:
        snr = config.sweep.snr_grid[-1] if snr_db is None else snr_db
        batch = receiver.link.simulate(frames, snr, stream(config, INFER_STREAM))
        received, truth = batch.received, batch.bits

    bits, latency, trace = [], [], []
    for y in tqdm(received, desc='Frames', disable=not progress):
        start = time.perf_counter()
        detected, trace = receiver.detect(y)
        latency.append(1e3 * (time.perf_counter() - start))
        bits.append(detected)
    report = InferenceReport(np.asarray(bits), np.asarray(latency), trace)
    table = pd.DataFrame({'frame': np.arange(len(bits)), 'latency_ms': report.latency_ms})
    if truth is not None:
        report.bit_errors = np.count_nonzero(report.bits != truth, axis=1)
        table['bit_errors'] = report.bit_errors
        logger.info('Online receiver BER %.4g over %d frames', report.ber, len(bits))
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / 'infer_bits.npy', report.bits)
    write_table(table, out / 'infer_frames.csv', experiment_hash(config, frames=frames, snr_db=snr_db, source=source))
    logger.info('Stages: %s; median latency %.3f ms', ' -> '.join(trace), float(np.median(report.latency_ms)))
    return report


def clopper_pearson(errors: int, total: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Exact binomial interval for an error probability."""
    tail = (1 - confidence) / 2
    low = 0.0 if errors == 0 else float(beta.ppf(tail, errors, total - errors + 1))
    high = 1.0 if errors == total else float(beta.ppf(1 - tail, errors + 1, total - errors))
    return low, high


@dataclass(frozen=True, eq=False)
class SweepCell:
    link: LinkModel
    snr_db: float
    variants: Tuple[Tuple[str, str], ...]
    settings: SweepSettings
    models: NeuralModels
    seed: np.random.SeedSequence
    deterministic: bool = False


def run_cell(cell: SweepCell) -> List[Dict[str, Any]]:
    """
    Monte-Carlo BER of every variant at one (EVM, L, SNR) point on shared frames.

    Frames are drawn in batches until at least ``trials`` frames are done and every variant has at least
    ``min_errors`` bit errors, or ``max_trials`` frames are reached.
    """
    settings = cell.settings
    rng = np.random.default_rng(cell.seed)
    errors = {v: 0 for v in cell.variants}
    elapsed = {v: 0.0 for v in cell.variants}
    clipped = {v: 0 for v in cell.variants}
    frames = 0
    while frames < settings.trials or (
        min(errors.values()) < settings.min_errors and frames < settings.max_trials
    ):
        limit = settings.trials if frames < settings.trials else settings.max_trials
        size = min(settings.batch_frames, limit - frames)
        batch = cell.link.simulate(size, cell.snr_db, rng)
        for variant in cell.variants:
            start = time.perf_counter()
            frame = run_variant(batch, cell.link, variant[0], variant[1], cell.models)
            detected = demap_qpsk(frame)
            elapsed[variant] += time.perf_counter() - start
            errors[variant] += count_errors(detected, batch.bits)[0]
            clipped[variant] += int(np.sum(frame.clipped_bins))
        frames += size

    bits_per_frame = 2 * cell.link.config.n
    rows = []
    for variant in cell.variants:
        total = frames * bits_per_frame
        low, high = clopper_pearson(errors[variant], total)
        capped = errors[variant] < settings.min_errors
        if capped:
            logger.warning(
                '%s at %.1f dB stopped at the %d-frame cap with %d errors',
                ' + '.join(variant),
                cell.snr_db,
                frames,
                errors[variant],
            )
        if clipped[variant]:
            logger.warning(
                '%s at %.1f dB: ZF clipped %d near-zero channel bins over %d frames',
                ' + '.join(variant),
                cell.snr_db,
                clipped[variant],
                frames,
            )
        rows.append(
            {
                'variant': ' + '.join(variant),
                'snr_db': cell.snr_db,
                'evm_pct': cell.link.target_evm,
                'measured_evm': cell.link.evm,
                'L': cell.link.num_paths,
                'trials': frames,
                'bits': total,
                'bit_errors': errors[variant],
                'ber': errors[variant] / total,
                'ci_low': low,
                'ci_high': high,
                'capped': capped,
                'clipped_bins': clipped[variant],
                'wall_time': 0.0 if cell.deterministic else elapsed[variant],
            }
        )
    return rows


def cmd_sweep(
    config: ExperimentConfig,
    ce_checkpoint: Optional[str] = None,
    sd_checkpoint: Optional[str] = None,
    progress: bool = True,
) -> pd.DataFrame:
    """
    BER over the EVM x L x SNR grid for every configured receiver variant.

    The drive level is calibrated once per EVM value; all variants of a cell see the same frames. Writes the
    wide table, a long-format table for plotting and a manifest with the stopping rule.
    """
    settings = config.sweep
    variants = tuple(parse_variants(settings.variants))
    models = load_models(config, variants, ce_checkpoint, sd_checkpoint)

    cells = []
    for evm in settings.evm_grid:
        calibrated = make_link(config, evm, settings.paths_grid[0])
        for num_paths in settings.paths_grid:
            link = calibrated.with_num_paths(num_paths)
            cells.extend((link, snr) for snr in settings.snr_grid)
    seeds = spawn_seeds(stream(config, SWEEP_STREAM), len(cells))
    jobs = [
        SweepCell(link, float(snr), variants, settings, models, seed, config.deterministic)
        for (link, snr), seed in zip(cells, seeds)
    ]

    logger.info('Sweeping %d cells x %d variants with %d worker(s)', len(jobs), len(variants), settings.workers)
    if settings.workers > 1:
        with ProcessPoolExecutor(max_workers=settings.workers) as pool:
            results = list(tqdm(pool.map(run_cell, jobs), total=len(jobs), desc='Sweep', disable=not progress))
    else:
        results = [run_cell(job) for job in tqdm(jobs, desc='Sweep', disable=not progress)]

    table = pd.DataFrame([row for rows in results for row in rows], columns=SWEEP_COLUMNS)
    table = table.sort_values(['evm_pct', 'L', 'variant', 'snr_db'], kind='mergesort').reset_index(drop=True)
    provenance = experiment_hash(config)
    out = Path(config.out_dir)
    sweep_csv = write_table(table, out / 'sweep.csv', provenance)
    long = pd.melt(
        table,
        id_vars=['variant', 'snr_db', 'evm_pct', 'L'],
        value_vars=['ber', 'ci_low', 'ci_high'],
        var_name='metric',
        value_name='value',
    )
    write_table(long, out / 'sweep_long.csv', provenance)
    checkpoints = {
        net: {'path': str(path), 'sha256': file_digest(path)}
        for net, model, path in (
            ('ce', models.ce, checkpoint_path(config, 'ce', ce_checkpoint)),
            ('sd', models.sd, checkpoint_path(config, 'sd', sd_checkpoint)),
        )
        if model is not None
    }
    write_json(
        {
            'config_hash': provenance,
            'seed': config.seed,
            'trials': settings.trials,
            'min_errors': settings.min_errors,
            'max_trials': settings.max_trials,
            'capped_rows': int(table['capped'].sum()),
            'checkpoints': checkpoints,
            'sweep_sha256': file_digest(sweep_csv),
        },
        out / 'manifest_sweep.json',
    )
    return table


def cmd_calibrate_evm(config: ExperimentConfig) -> pd.DataFrame:
    """Drive level, measured EVM, distorted power and linear gain for every EVM target of the sweep grid."""
    rows = []
    for evm in config.sweep.evm_grid:
        link = make_link(config, evm, config.num_paths)
        rows.append(
            {
                'evm_target': evm,
                'input_scale': link.hpa.input_scale,
                'measured_evm': link.evm,
                'distorted_power': link.distorted_power,
                'gain_magnitude': abs(link.gain),
                'gain_phase': float(np.angle(link.gain)),
            }
        )
    table = pd.DataFrame(rows)
    write_table(table, Path(config.out_dir) / 'evm_calibration.csv', experiment_hash(config))
    return table
