import json
import logging
from unittest.mock import patch

import numpy as np
import pandas as pd

from src.utils import config_hash, file_digest, make_rng, setup_logging, spawn_seeds, write_json, write_table


def test_make_rng_passes_generators_through():
    """Test that an existing generator is reused and integer seeds are reproducible."""
    rng = np.random.default_rng(0)
    assert make_rng(rng) is rng
    assert make_rng(5).random() == make_rng(5).random()
    assert make_rng(np.random.SeedSequence(5)).random() == make_rng(5).random()


def test_spawn_seeds_independent_and_stable():
    """Test that child streams depend only on the root seed and their index."""
    first = [np.random.default_rng(s).random() for s in spawn_seeds(3, 4)]
    second = [np.random.default_rng(s).random() for s in spawn_seeds(3, 4)]
    assert first == second
    assert len(set(first)) == 4
    longer = [np.random.default_rng(s).random() for s in spawn_seeds(3, 6)]
    assert longer[:4] == first


def test_config_hash():
    """Test that the hash ignores key order and reacts to values, including numpy scalars and infinities."""
    assert config_hash({'a': 1, 'b': [1.0, 2.0]}) == config_hash({'b': (1.0, 2.0), 'a': 1})
    assert config_hash({'a': np.float64(0.5)}) == config_hash({'a': 0.5})
    assert config_hash({'a': 1}) != config_hash({'a': 2})
    assert len(config_hash({'snr': float('inf')})) == 16


def test_write_table_adds_provenance(tmp_path):
    """Test the CSV header and the config hash column."""
    df = pd.DataFrame({'snr_db': [0.0, 3.0], 'ber': [0.1, 0.01]})
    path = write_table(df, tmp_path / 'results' / 'table.csv', 'abc')
    written = pd.read_csv(path)
    assert list(written.columns) == ['snr_db', 'ber', 'config_hash']
    assert set(written['config_hash']) == {'abc'}
    assert 'config_hash' not in df.columns
    plain = pd.read_csv(write_table(df, tmp_path / 'plain.csv'))
    assert list(plain.columns) == ['snr_db', 'ber']


def test_write_json_and_file_digest(tmp_path):
    """Test sorted JSON output and that equal files have equal digests."""
    first = write_json({'b': np.int64(2), 'a': [np.float32(0.5)]}, tmp_path / 'a.json')
    second = write_json({'a': [0.5], 'b': 2}, tmp_path / 'b.json')
    assert json.loads(first.read_text()) == {'a': [0.5], 'b': 2}
    assert file_digest(first) == file_digest(second)
    assert file_digest(first) != file_digest(write_json({'a': 1}, tmp_path / 'c.json'))


@patch('src.utils.logging.basicConfig')
def test_setup_logging_levels(mock_basic_config):
    """Test that the level name is resolved and unknown names fall back to INFO."""
    setup_logging('debug')
    assert mock_basic_config.call_args.kwargs['level'] == logging.DEBUG
    setup_logging('chatty')
    assert mock_basic_config.call_args.kwargs['level'] == logging.INFO
