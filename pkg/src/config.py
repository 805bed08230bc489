"""Experiment configuration: dataclass sections with defaults, TOML loading and CLI overrides."""
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from src.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

VARIANTS_CLASSIC = ('LS_CE + ZF_SD', 'MMSE_CE + MMSE_SD')
VARIANTS_DEFAULT = ('LS_CE + ZF_SD', 'MMSE_CE + MMSE_SD', 'CE_Net + SD_Net')


@dataclass(frozen=True)
class DdstConfig:
    """Frame dimensions, training shift and power split of one DDST frame."""

    n: int = 240
    p: int = 12
    t: int = 0
    data_power_fraction: float = 0.9
    training_power_fraction: float = 0.1
    total_power: float = 1.0
    modulation: str = 'QPSK'

    def __post_init__(self) -> None:
        if self.n <= 0 or self.p <= 0:
            raise ConfigError(f'Frame length and training period must be positive, found N={self.n}, P={self.p}')
        if (self.n // self.p) * self.p != self.n:
            raise ConfigError(f'N={self.n} is not a multiple of P={self.p}')
        if self.n // self.p < 2:
            raise ConfigError(f'Need at least two training periods per frame, found Q={self.n // self.p}')
        if not 0 < self.data_power_fraction < 1 or not 0 < self.training_power_fraction < 1:
            raise ConfigError('Power fractions must lie in (0, 1)')
        if abs(self.data_power_fraction + self.training_power_fraction - 1) > 1e-12:
            raise ConfigError(
                f'Power fractions must sum to 1, found {self.data_power_fraction} + {self.training_power_fraction}'
            )
        if self.modulation != 'QPSK':
            raise ConfigError(f'Only QPSK is supported, found {self.modulation!r}')

    @property
    def q(self) -> int:
        return self.n // self.p

    @property
    def training_power(self) -> float:
        return self.training_power_fraction * self.total_power

    @property
    def data_power(self) -> float:
        """Mean per-sample power of the projected data Θs."""
        return self.data_power_fraction * self.total_power

    @property
    def symbol_energy(self) -> float:
        """Energy per QPSK symbol before projection; Θ removes a 1/Q share of it."""
        return self.data_power * self.q / (self.q - 1)


@dataclass(frozen=True)
class HpaSettings:
    alpha_a: float = 1.96
    beta_a: float = 0.99
    alpha_phi: float = 2.53
    beta_phi: float = 2.82
    target_evm: Optional[float] = 55.0
    reference_frames: int = 1000


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.99
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 80
    l2_coefficient: float = 1e-5
    epochs: int = 10
    patience: Optional[int] = 3
    residual: bool = True  # the refiner adds its input to the network output

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.adam_epsilon <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError('Learning rate, epsilon, batch size and epochs must be positive')
        if not 0 < self.adam_beta1 < 1 or not 0 < self.adam_beta2 < 1:
            raise ConfigError('Adam betas must lie in (0, 1)')
        if self.l2_coefficient < 0:
            raise ConfigError('L2 coefficient must be non-negative')


@dataclass(frozen=True)
class DatasetSettings:
    train_samples: int = 60000
    validation_samples: int = 20000
    snr_policy: str = 'mixed'


@dataclass(frozen=True)
class SweepSettings:
    snr_grid: Tuple[float, ...] = tuple(float(s) for s in range(0, 31, 3))
    evm_grid: Tuple[float, ...] = (55.0,)
    paths_grid: Tuple[int, ...] = (12,)
    variants: Tuple[str, ...] = VARIANTS_DEFAULT
    trials: int = 100
    min_errors: int = 100
    max_trials: int = 2100
    batch_frames: int = 100
    workers: int = 1

    def __post_init__(self) -> None:
        if not self.snr_grid:
            raise ConfigError('SNR grid must not be empty')
        if self.trials < 1 or self.max_trials < self.trials:
            raise ConfigError(f'Need 1 <= trials <= max_trials, found {self.trials} and {self.max_trials}')
        if not self.variants:
            raise ConfigError('At least one receiver variant is required')


@dataclass(frozen=True)
class ExperimentConfig:
    frame: DdstConfig = field(default_factory=DdstConfig)
    hpa: HpaSettings = field(default_factory=HpaSettings)
    num_paths: int = 12
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    ce_training: TrainingConfig = field(default_factory=lambda: TrainingConfig(l2_coefficient=1e-5, epochs=10))
    sd_training: TrainingConfig = field(default_factory=lambda: TrainingConfig(l2_coefficient=1e-7, epochs=20))
    sweep: SweepSettings = field(default_factory=SweepSettings)
    seed: int = 2024
    deterministic: bool = False
    out_dir: str = 'outputs'

    def __post_init__(self) -> None:
        if not 1 <= self.num_paths <= self.frame.p:
            raise ConfigError(f'Number of paths L={self.num_paths} must lie in [1, P={self.frame.p}]')
        bad_paths = [L for L in self.sweep.paths_grid if not 1 <= L <= self.frame.p]
        if bad_paths:
            raise ConfigError(f'Sweep path counts {bad_paths} exceed the training period P={self.frame.p}')

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


SECTIONS = {
    'frame': DdstConfig,
    'hpa': HpaSettings,
    'dataset': DatasetSettings,
    'ce_training': TrainingConfig,
    'sd_training': TrainingConfig,
    'sweep': SweepSettings,
}
TOP_LEVEL = ('seed', 'deterministic', 'out_dir')


def _build_section(cls: Any, base: Any, values: Dict[str, Any], name: str) -> Any:
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f'Unknown keys in [{name}]: {sorted(unknown)}')
    coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return replace(base, **coerced)
    except TypeError as e:
        raise ConfigError(f'Invalid [{name}] section: {e}') from e


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Build an experiment config from a nested dict (the parsed TOML document).

    Args:
        data: mapping with optional sections frame, hpa, channel, dataset, ce_training, sd_training, sweep

    Returns:
        validated config.
    """
    config = ExperimentConfig()
    updates: Dict[str, Any] = {}
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f'[{key}] must be a table')
            updates[key] = _build_section(SECTIONS[key], getattr(config, key), value, key)
        elif key == 'channel':
            unknown = set(value) - {'num_paths'}
            if unknown:
                raise ConfigError(f'Unknown keys in [channel]: {sorted(unknown)}')
            if 'num_paths' in value:
                updates['num_paths'] = int(value['num_paths'])
        elif key in TOP_LEVEL:
            updates[key] = value
        else:
            raise ConfigError(f'Unknown config section or key {key!r}')
    return replace(config, **updates)


def load_config(path: Optional[str]) -> ExperimentConfig:
    """Read a TOML config file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    file = Path(path)
    if not file.is_file():
        raise ConfigError(f'Config file {path} does not exist')
    try:
        with open(file, 'rb') as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f'Cannot parse {path}: {e}') from e
    logger.info('Loaded config from %s', path)
    return config_from_dict(data)


def parse_float_list(text: str) -> Tuple[float, ...]:
    """Parse '0,3,6' or a range '0:30:3' (inclusive stop) into floats."""
    text = text.strip()
    try:
        if ':' not in text:
            return tuple(float(part) for part in text.split(',') if part.strip())
        start, stop, step = (float(part) for part in text.split(':'))
    except ValueError as e:
        raise ConfigError(f'Cannot parse numeric list {text!r}') from e
    if step == 0 or (stop - start) * step < 0:
        raise ConfigError(f'Range {text!r} never reaches its stop value')
    count = int(round((stop - start) / step)) + 1
    return tuple(start + i * step for i in range(count))


def apply_overrides(config: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """
    Apply CLI overrides on top of a loaded config. ``None`` values are ignored.

    Args:
        config: base config
        overrides: keys seed, deterministic, out_dir, trials, variants, snr_grid, evm, paths, workers

    Returns:
        updated config.
    """
    top: Dict[str, Any] = {}
    sweep: Dict[str, Any] = {}
    for key in TOP_LEVEL:
        if overrides.get(key) is not None:
            top[key] = overrides[key]
    if overrides.get('trials') is not None:
        trials = int(overrides['trials'])
        sweep['trials'] = trials
        sweep['max_trials'] = max(trials, config.sweep.max_trials)
    if overrides.get('variants'):
        sweep['variants'] = tuple(v.strip() for v in overrides['variants'].split(',') if v.strip())
    if overrides.get('snr_grid'):
        sweep['snr_grid'] = parse_float_list(overrides['snr_grid'])
    if overrides.get('evm'):
        sweep['evm_grid'] = parse_float_list(overrides['evm'])
        if len(sweep['evm_grid']) == 1:
            top['hpa'] = replace(config.hpa, target_evm=sweep['evm_grid'][0])
    if overrides.get('paths'):
        sweep['paths_grid'] = tuple(int(v) for v in parse_float_list(overrides['paths']))
        if len(sweep['paths_grid']) == 1:
            top['num_paths'] = sweep['paths_grid'][0]
    if overrides.get('workers') is not None:
        sweep['workers'] = int(overrides['workers'])
    if sweep:
        top['sweep'] = replace(config.sweep, **sweep)
    return replace(config, **top) if top else config


def split_variants(names: List[str]) -> List[Tuple[str, str]]:
    """Split 'LS_CE + ZF_SD' style names into (estimator, detector) pairs."""
    pairs = []
    for name in names:
        parts = [part.strip() for part in name.split('+')]
        if len(parts) != 2:
            raise ConfigError(f'Receiver variant {name!r} must look like "<estimator> + <detector>"')
        pairs.append((parts[0], parts[1]))
    return pairs
