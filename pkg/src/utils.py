import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

SeedLike = Union[None, int, np.random.SeedSequence, np.random.Generator]


def setup_logging(level: str = 'INFO') -> None:
    """Configure the root logger once for the command-line entry point."""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )


def make_rng(seed: SeedLike) -> np.random.Generator:
    """Turn a seed, a seed sequence or an existing generator into a generator (generators pass through)."""
    return np.random.default_rng(seed)


def spawn_seeds(seed: Union[int, np.random.SeedSequence], count: int) -> List[np.random.SeedSequence]:
    """
    Independent child streams, one per work item.

    Args:
        seed: root seed
        count: number of children

    Returns:
        list of seed sequences; child ``i`` depends only on ``seed`` and ``i``.
    """
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return root.spawn(count)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    return value


def config_hash(payload: Dict[str, Any]) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON form of ``payload``."""
    text = json.dumps(_jsonable(payload), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]


def file_digest(path: Union[str, Path]) -> str:
    """SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def write_table(df: pd.DataFrame, path: Union[str, Path], provenance: Optional[str] = None) -> Path:
    """
    Write a results table as UTF-8 CSV with a fixed header.

    Args:
        df: table to write
        path: destination file
        provenance: config hash stored in a ``config_hash`` column

    Returns:
        the written path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if provenance is not None:
        df = df.assign(config_hash=provenance)
    df.to_csv(path, index=False, encoding='utf-8')
    return path


def write_json(payload: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), sort_keys=True, indent=2), encoding='utf-8')
    return path
