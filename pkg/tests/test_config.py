import os

import numpy as np
import pytest
import tomlkit

from fewpoint.config import read_configuration
from fewpoint.dataset import DatasetConfig
from fewpoint.decoder import DecoderConfig
from fewpoint.encoder import EncoderConfig
from fewpoint.gan import GanConfig
from fewpoint.network import CompletionNetwork
from fewpoint.trainer import TrainConfig

SHIPPED_SETTINGS = os.path.join(os.path.dirname(__file__), '..', 'settings.toml')


def write_settings(path, **values) -> str:
    path.write_text(tomlkit.dumps(values), encoding='utf-8')
    return str(path)


def test_shipped_settings_build_every_component():
    config = read_configuration(SHIPPED_SETTINGS)
    assert config.threads == 1
    assert list(config.input_sizes) == [128, 16]
    train_config = TrainConfig.from_settings(config)
    assert train_config.variant.name == 'full'
    assert train_config.epochs_for(2) == 50
    dataset = DatasetConfig.from_settings(config)
    assert (dataset.out_dir, dataset.gt_points, dataset.partial_points) == ('data', 512, 128)
    assert EncoderConfig.from_settings(config).pooled_levels == [0, 1, 2]
    assert DecoderConfig.from_settings(config).detail_n == 1024
    assert GanConfig.from_settings(config).token_dim(128) == 16
    network = CompletionNetwork.from_settings(config, train_config.variant, train_config.seed)
    assert all(p.dtype == np.float32 for p in network.parameters())


def test_environment_overrides_the_file(tmp_path, monkeypatch):
    monkeypatch.setenv('FEWPOINT_THREADS', '3')
    config = read_configuration(write_settings(tmp_path / 'settings.toml', threads=1, seed=5))
    assert config.threads == 3
    assert config.seed == 5


def test_threads_must_be_positive(tmp_path):
    with pytest.raises(SystemExit) as e:
        read_configuration(write_settings(tmp_path / 'settings.toml', threads=0))
    assert e.value.code == 1


def test_required_parameters(tmp_path, capsys):
    with pytest.raises(SystemExit):
        read_configuration(write_settings(tmp_path / 'settings.toml', threads=1), ['data_dir'])
    assert 'Configuration error' in capsys.readouterr().err


def test_stage_epochs_override(tmp_path):
    config = read_configuration(write_settings(tmp_path / 'settings.toml', epochs=4, epochs_stage2=9))
    train_config = TrainConfig.from_settings(config)
    assert [train_config.epochs_for(stage) for stage in (1, 2, 3)] == [4, 9, 4]
