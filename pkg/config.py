"""
Configuration management for the DeeR toolkit.
Handles the flat KEY=value run configuration, flag overrides and the
DEER_SEED environment variable.
"""

import difflib
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional

from dotenv import dotenv_values, load_dotenv

from utils.validation import ValidationError, coerce_value

logger = logging.getLogger(__name__)

# Load environment variables
load_dotenv()

# Observation/instruction layout of the tabletop simulator; shared by the
# encoder and the environment.
MAX_OBJECTS = 4
N_ZONES = 4
N_COLORS = 6
L_OBS = MAX_OBJECTS + 1 + N_ZONES
D_RAW = 4 + 4 + N_COLORS + 1 + N_ZONES
L_INST = 6


@dataclass
class EnvConfig:
    """Simulator constants."""
    delta_max: float = 0.08
    grasp_radius: float = 0.05
    fine_radius: float = 0.15
    push_distance: float = 0.2
    contact_radius: float = 0.03
    t_max: int = 64
    min_objects: int = 2
    max_objects: int = MAX_OBJECTS


@dataclass
class NetConfig:
    """Multi-exit backbone and action head sizes."""
    n_exits: int = 4
    blocks_per_exit: int = 2
    d_model: int = 64
    ffn_mult: int = 2
    lstm_layers: int = 2
    lstm_hidden: int = 128
    mlp_hidden: int = 128
    aux_heads: bool = True
    freeze_encoder: bool = False
    lstm_dropout: float = 0.3
    mlp_dropout: float = 0.4
    vocab_size: int = 32
    l_inst: int = L_INST
    l_obs: int = L_OBS
    d_raw: int = D_RAW

    @property
    def n_tokens(self) -> int:
        return self.l_inst + self.l_obs

    @property
    def n_blocks(self) -> int:
        return self.n_exits * self.blocks_per_exit

    def validate(self) -> None:
        if self.n_exits < 1:
            raise ValidationError("n_exits must be >= 1")
        if self.blocks_per_exit < 1:
            raise ValidationError("blocks_per_exit must be >= 1")
        if self.lstm_layers < 1:
            raise ValidationError("lstm_layers must be >= 1")


@dataclass
class TrainConfig:
    """Imitation-learning schedule."""
    window: int = 12
    lam: float = 0.01
    batch_size: int = 16
    lr_backbone: float = 1e-4
    lr_head: float = 2.5e-5
    weight_decay: float = 0.0
    epochs_joint: int = 10
    epochs_posttrain: int = 2
    steps_per_epoch: int = 100
    warmup_steps: int = 0
    grad_clip: float = 1.0
    aux_enabled: bool = True
    val_fraction: float = 0.1
    val_windows: int = 64
    train_splits: str = "ABCD"
    posttrain_lstm_dropout: Optional[float] = None
    posttrain_mlp_dropout: Optional[float] = None

    def validate(self) -> None:
        if self.window < 1:
            raise ValidationError("window (H) must be >= 1")
        if self.lam < 0:
            raise ValidationError("lam must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


@dataclass
class BudgetConfig:
    """Cost model source and budget constraints."""
    cost_mode: str = "analytic"
    table_preset: str = "3b"
    table_layers: int = 24
    layers_per_exit: int = 2
    avg_gflops: Optional[float] = None
    avg_fraction: Optional[float] = None
    peak_gflops: float = math.inf
    mem_gb: float = math.inf
    n_tasks: int = 0


@dataclass
class SearchConfig:
    """Online threshold search."""
    bo_evals: int = 50
    bo_init: int = 10
    bo_chains: int = 100
    penalty: float = 10.0
    upper_percentile: float = 99.0
    acq_candidates: int = 2000
    acq_restarts: int = 5
    xi: float = 0.01


@dataclass
class EvalConfig:
    """Chain evaluation and calibration inputs."""
    n_chains: int = 100
    eval_workers: int = 1
    criterion: str = "action"
    static_exit: int = 0
    eval_split: str = "D"
    calib_split: str = "val"
    calib_fraction: Optional[float] = None
    calib_samples: int = 1000
    inference_dtype: str = "float32"


SECTIONS = {
    "env": EnvConfig,
    "net": NetConfig,
    "train": TrainConfig,
    "budget": BudgetConfig,
    "search": SearchConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    """Resolved configuration for one command invocation."""
    seed: int = 0
    data_dir: str = "data"
    env: EnvConfig = field(default_factory=EnvConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def _locate(self, key: str):
        if key in ("seed", "data_dir"):
            return self, next(f for f in fields(self) if f.name == key)
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                if f.name == key:
                    return obj, f
        hint = difflib.get_close_matches(key, flat_keys(), n=1)
        suffix = f"; did you mean '{hint[0]}'?" if hint else ""
        raise ValidationError(f"Unknown configuration key '{key}'{suffix}")

    def set(self, key: str, raw: Any) -> None:
        """Set one flat key; strings are coerced to the field's type."""
        key = key.strip().lower()
        target, f = self._locate(key)
        value = raw
        if isinstance(raw, str) or raw is None:
            result = coerce_value(key, raw, f.type)
            if not result:
                raise ValidationError(result.error_message)
            value = result.cleaned_value
        setattr(target, key, value)

    def update(self, values: Dict[str, Any]) -> "RunConfig":
        """Apply overrides, skipping None values (flags left unset)."""
        for key, value in values.items():
            if value is not None:
                self.set(key, value)
        return self

    def apply_env_seed(self) -> "RunConfig":
        raw = os.getenv("DEER_SEED")
        if raw:
            self.set("seed", raw)
            logger.info(f"Master seed overridden by DEER_SEED={self.seed}")
        return self

    def validate(self) -> "RunConfig":
        """Check sections; disabling the auxiliary loss also drops the auxiliary heads."""
        self.net.validate()
        self.train.validate()
        if not self.train.aux_enabled:
            self.net.aux_heads = False
        return self

    def to_dict(self) -> Dict:
        data = asdict(self)
        return _json_safe(data)

    @classmethod
    def from_file(cls, path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> "RunConfig":
        """Defaults, then the KEY=value file, then ``overrides``."""
        config = cls()
        if path:
            if not os.path.exists(path):
                raise ValidationError(f"Config file not found: {path}")
            for key, raw in dotenv_values(path).items():
                config.set(key, raw)
            logger.info(f"Loaded configuration from {path}")
        config.update(overrides or {})
        return config

    @classmethod
    def from_env(cls) -> "RunConfig":
        """Create config from DEER_CONFIG (optional file) and DEER_DATA_DIR."""
        config = cls.from_file(os.getenv("DEER_CONFIG") or None)
        if os.getenv("DEER_DATA_DIR"):
            config.data_dir = os.getenv("DEER_DATA_DIR")
        return config.apply_env_seed()


def _json_safe(value):
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, float) and math.isinf(value):
        return None
    return value


def flat_keys() -> Dict[str, str]:
    """All accepted configuration keys mapped to their section."""
    keys = {"seed": "run", "data_dir": "run"}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            keys[f.name] = section
    return keys


# Global config instance
config: Optional[RunConfig] = None


def get_config() -> RunConfig:
    """Get the global configuration instance."""
    global config
    if config is None:
        config = RunConfig.from_env()
    return config


def set_config(new_config: RunConfig) -> None:
    """Install the resolved configuration of the running command."""
    global config
    config = new_config
