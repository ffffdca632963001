"""Global pytest configuration.

Ensures that the project root (where *models.py*, *storage.py*, etc. live)
exists on ``sys.path`` so that absolute imports inside tests work
regardless of the directory pytest started collection from, and provides
small network/run configurations shared by the test modules.
"""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

# Path of this file's parent directory (project root)
PROJECT_ROOT = Path(__file__).resolve().parent

# Insert project root at the beginning of sys.path if not already present.
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

import config as config_module  # noqa: E402
from config import EnvConfig, NetConfig, RunConfig  # noqa: E402


def tiny_net_config(**overrides) -> NetConfig:
    values = dict(n_exits=3, blocks_per_exit=1, d_model=8, ffn_mult=2, lstm_layers=1, lstm_hidden=8, mlp_hidden=8)
    values.update(overrides)
    return NetConfig(**values)


@pytest.fixture
def net_config() -> NetConfig:
    """A three-exit network small enough for finite differences."""
    return tiny_net_config()


@pytest.fixture
def env_config() -> EnvConfig:
    return EnvConfig()


@pytest.fixture
def run_config(tmp_path) -> RunConfig:
    """Run configuration with a tiny network and a short training schedule."""
    cfg = RunConfig(seed=3, data_dir=str(tmp_path))
    cfg.net = tiny_net_config()
    cfg.train.window = 4
    cfg.train.batch_size = 2
    cfg.train.steps_per_epoch = 2
    cfg.train.epochs_joint = 1
    cfg.train.epochs_posttrain = 1
    cfg.train.val_windows = 4
    cfg.train.lr_backbone = 1e-3
    cfg.train.lr_head = 1e-3
    return cfg


@pytest.fixture(autouse=True)
def isolated_config(monkeypatch, tmp_path):
    """Keep the process-wide config and DEER_* variables out of tests."""
    monkeypatch.delenv("DEER_SEED", raising=False)
    monkeypatch.delenv("DEER_CONFIG", raising=False)
    monkeypatch.setattr(config_module, "config", RunConfig(data_dir=str(tmp_path)))
    yield
