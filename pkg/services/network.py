"""
Multi-exit backbone with a recurrent action head.

Tokens (instruction embeddings + projected observation tokens) run through
``n_exits`` groups of ``blocks_per_exit`` pre-norm transformer blocks. After
each group the token matrix is max-pooled over the token axis; the pooled
vector feeds an LSTM action head with separate pose and gripper MLPs.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from config import NetConfig
from utils import tensor as T
from utils.tensor import Parameters, Tensor

logger = logging.getLogger(__name__)

HEAD = "head"
POSE_OUT = 6


# ---------------------------------------------------------------------------
# Shapes and analytic costs
# ---------------------------------------------------------------------------

def head_shapes(config: NetConfig, prefix: str) -> Dict[str, Tuple[int, ...]]:
    d, h, m = config.d_model, config.lstm_hidden, config.mlp_hidden
    shapes: Dict[str, Tuple[int, ...]] = {}
    for layer in range(config.lstm_layers):
        d_in = d if layer == 0 else h
        shapes[f"{prefix}/lstm{layer}/w_x"] = (d_in, 4 * h)
        shapes[f"{prefix}/lstm{layer}/w_h"] = (h, 4 * h)
        shapes[f"{prefix}/lstm{layer}/b"] = (4 * h,)
    for name, out in (("pose", POSE_OUT), ("grip", 1)):
        shapes[f"{prefix}/{name}/w1"] = (h, m)
        shapes[f"{prefix}/{name}/b1"] = (m,)
        shapes[f"{prefix}/{name}/ln_g"] = (m,)
        shapes[f"{prefix}/{name}/ln_b"] = (m,)
        shapes[f"{prefix}/{name}/w2"] = (m, out)
        shapes[f"{prefix}/{name}/b2"] = (out,)
    return shapes


def param_shapes(config: NetConfig) -> Dict[str, Tuple[int, ...]]:
    d = config.d_model
    f = config.ffn_mult * d
    shapes: Dict[str, Tuple[int, ...]] = {
        "enc/embed": (config.vocab_size, d),
        "enc/obs": (config.d_raw, d),
    }
    for b in range(config.n_blocks):
        p = f"blk{b}"
        shapes.update({
            f"{p}/ln1_g": (d,), f"{p}/ln1_b": (d,),
            f"{p}/wq": (d, d), f"{p}/wk": (d, d), f"{p}/wv": (d, d), f"{p}/wo": (d, d),
            f"{p}/ln2_g": (d,), f"{p}/ln2_b": (d,),
            f"{p}/w1": (d, f), f"{p}/b1": (f,), f"{p}/w2": (f, d), f"{p}/b2": (d,),
        })
    shapes.update(head_shapes(config, HEAD))
    if config.aux_heads:
        for j in range(1, config.n_exits + 1):
            shapes.update(head_shapes(config, f"aux{j}"))
    return shapes


def group_of(name: str, config: NetConfig) -> str:
    """Partition label: encoder, group<i>, head or aux<j>."""
    prefix = name.split("/", 1)[0]
    if prefix == "enc":
        return "encoder"
    if prefix.startswith("blk"):
        return f"group{int(prefix[3:]) // config.blocks_per_exit + 1}"
    return prefix


def block_flops(config: NetConfig) -> int:
    """Matmul FLOPs of one block for one frame: a d_in x d_out map over T tokens costs 2*T*d_in*d_out."""
    t, d = config.n_tokens, config.d_model
    f = config.ffn_mult * d
    projections = 4 * 2 * t * d * d
    attention = 2 * (2 * t * t * d)
    mlp = 2 * (2 * t * d * f)
    return projections + attention + mlp


def group_flops(config: NetConfig) -> int:
    return config.blocks_per_exit * block_flops(config)


def head_flops(config: NetConfig) -> int:
    """Matmul FLOPs of one action-head evaluation for one frame."""
    d, h, m = config.d_model, config.lstm_hidden, config.mlp_hidden
    total = 0
    for layer in range(config.lstm_layers):
        d_in = d if layer == 0 else h
        total += 2 * d_in * 4 * h + 2 * h * 4 * h
    total += 2 * h * m + 2 * m * POSE_OUT
    total += 2 * h * m + 2 * m * 1
    return total


def param_counts(config: NetConfig) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for name, shape in param_shapes(config).items():
        key = group_of(name, config)
        counts[key] = counts.get(key, 0) + int(np.prod(shape))
    return counts


# ---------------------------------------------------------------------------
# Runtime records
# ---------------------------------------------------------------------------

@dataclass
class ActionPrediction:
    pose: Tensor  # (B, 6)
    gripper_logit: Tensor  # (B, 1)

    @property
    def gripper_prob(self) -> np.ndarray:
        return expit(self.gripper_logit.data)

    @property
    def consistency_vector(self) -> np.ndarray:
        """(pose, gripper probability) per batch row, shape (B, 7)."""
        return np.concatenate([self.pose.data, self.gripper_prob], axis=-1)


@dataclass
class HeadState:
    layers: List[Tuple[Tensor, Tensor]]

    def arrays(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [(h.data, c.data) for h, c in self.layers]


@dataclass
class ExitCache:
    """Token states and pooled features for the exits computed so far (index 0 = encoder output)."""
    token_states: List[Tensor] = field(default_factory=list)
    pooled: List[Tensor] = field(default_factory=list)
    flops: int = 0

    @property
    def computed_up_to(self) -> int:
        return len(self.token_states) - 1

    @property
    def pooled_input(self) -> Tensor:
        return self.pooled[0]


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class MultiExitNet:
    """Parameters plus the forward functions of the multi-exit model."""

    def __init__(self, config: NetConfig, params: Parameters, dtype=np.float64):
        config.validate()
        self.config = config
        self.params = params
        self.dtype = np.dtype(dtype)
        self.aux_calls = 0
        self._scale = 1.0 / math.sqrt(config.d_model)

    @classmethod
    def init(cls, config: NetConfig, seed: int) -> "MultiExitNet":
        """Fan-in scaled normal weights, unit layer-norm gains, LSTM forget bias 1."""
        rng = np.random.default_rng(seed)
        params = Parameters()
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit("/", 1)[1]
            if leaf in ("ln1_g", "ln2_g", "ln_g"):
                arr = np.ones(shape)
            elif len(shape) == 1:
                arr = np.zeros(shape)
                if "/lstm" in name and leaf == "b":
                    h = shape[0] // 4
                    arr[h:2 * h] = 1.0
            else:
                arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
            params.add(name, arr)
        logger.debug(f"Initialized network with {sum(param_counts(config).values())} parameters")
        return cls(config, params)

    @classmethod
    def from_arrays(cls, config: NetConfig, arrays: Dict[str, np.ndarray], dtype=np.float64) -> "MultiExitNet":
        expected = param_shapes(config)
        missing = set(expected) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        params = Parameters({name: np.asarray(arrays[name], dtype=dtype) for name in expected})
        return cls(config, params, dtype)

    def inference_copy(self, dtype=np.float32) -> "MultiExitNet":
        return MultiExitNet(self.config, self.params.astype(dtype), dtype)

    def names(self, group: str) -> List[str]:
        return [n for n in self.params if group_of(n, self.config) == group]

    def backbone_names(self) -> List[str]:
        return [n for n in self.params if group_of(n, self.config) == "encoder" or n.startswith("blk")]

    def head_names(self) -> List[str]:
        return self.names(HEAD)

    def aux_names(self) -> List[str]:
        return [n for n in self.params if n.startswith("aux")]

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # -- encoder and backbone -------------------------------------------

    def encode(self, inst_ids, obs) -> Tensor:
        """(B, L_inst) token ids and (B, L_obs, d_raw) observations -> (B, n_tokens, d_model)."""
        inst_ids = np.asarray(inst_ids, dtype=np.int64)
        obs = np.asarray(obs, dtype=self.dtype)
        if inst_ids.ndim == 1:
            inst_ids = inst_ids[None]
        if obs.ndim == 2:
            obs = obs[None]
        if inst_ids.shape[-1] != self.config.l_inst or obs.shape[-2:] != (self.config.l_obs, self.config.d_raw):
            raise T.ShapeError("encode", inst_ids.shape, obs.shape)
        words = T.embedding(self._p("enc/embed"), inst_ids)
        tokens = T.matmul(T.Tensor(obs), self._p("enc/obs"))
        return T.concat([words, tokens], axis=-2)

    def _norm(self, x: Tensor, gain: str, bias: str) -> Tensor:
        return T.add(T.mul(T.layer_norm(x), self._p(gain)), self._p(bias))

    def block(self, x: Tensor, index: int) -> Tensor:
        p = f"blk{index}"
        h = self._norm(x, f"{p}/ln1_g", f"{p}/ln1_b")
        q = T.matmul(h, self._p(f"{p}/wq"))
        k = T.matmul(h, self._p(f"{p}/wk"))
        v = T.matmul(h, self._p(f"{p}/wv"))
        attn = T.softmax(T.scale(T.matmul(q, T.transpose(k)), self._scale))
        x = T.add(x, T.matmul(T.matmul(attn, v), self._p(f"{p}/wo")))
        h = self._norm(x, f"{p}/ln2_g", f"{p}/ln2_b")
        hidden = T.relu(T.add(T.matmul(h, self._p(f"{p}/w1")), self._p(f"{p}/b1")))
        return T.add(x, T.add(T.matmul(hidden, self._p(f"{p}/w2")), self._p(f"{p}/b2")))

    def new_cache(self, inst_ids, obs) -> ExitCache:
        x0 = self.encode(inst_ids, obs)
        return ExitCache(token_states=[x0], pooled=[T.max_pool(x0, axis=-2)])

    def forward_to_exit(self, cache: ExitCache, target_exit: int) -> ExitCache:
        """Run only the groups (computed_up_to, target_exit]; lower targets are a no-op."""
        if not (1 <= target_exit <= self.config.n_exits):
            raise ValueError(f"target exit {target_exit} outside [1, {self.config.n_exits}]")
        if not cache.token_states:
            raise ValueError("cache holds no encoder output")
        batch = cache.token_states[0].shape[0]
        cost = group_flops(self.config) * batch
        for i in range(cache.computed_up_to + 1, target_exit + 1):
            x = cache.token_states[i - 1]
            for b in range((i - 1) * self.config.blocks_per_exit, i * self.config.blocks_per_exit):
                x = self.block(x, b)
            cache.token_states.append(x)
            cache.pooled.append(T.max_pool(x, axis=-2))
            cache.flops += cost
        return cache

    # -- heads -------------------------------------------------------------

    def zero_state(self, batch: int = 1) -> HeadState:
        h = self.config.lstm_hidden
        zeros = np.zeros((batch, h), dtype=self.dtype)
        return HeadState(layers=[(Tensor(zeros), Tensor(zeros)) for _ in range(self.config.lstm_layers)])

    def _dropout(self, x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
        if rng is None or rate <= 0.0:
            return x
        keep = (rng.random(x.shape) >= rate).astype(self.dtype) / (1.0 - rate)
        return T.mul(x, keep)

    def _mlp(self, x: Tensor, prefix: str, rate: float, rng) -> Tensor:
        h = T.add(T.matmul(x, self._p(f"{prefix}/w1")), self._p(f"{prefix}/b1"))
        h = T.relu(self._norm(h, f"{prefix}/ln_g", f"{prefix}/ln_b"))
        h = self._dropout(h, rate, rng)
        return T.add(T.matmul(h, self._p(f"{prefix}/w2")), self._p(f"{prefix}/b2"))

    def _recurrent_head(self, prefix: str, pooled: Tensor, state: HeadState, rng=None,
                        lstm_dropout: Optional[float] = None, mlp_dropout: Optional[float] = None) -> Tuple[ActionPrediction, HeadState]:
        if len(state.layers) != self.config.lstm_layers:
            raise T.ShapeError("head_forward", (len(state.layers),), (self.config.lstm_layers,))
        lstm_rate = self.config.lstm_dropout if lstm_dropout is None else lstm_dropout
        mlp_rate = self.config.mlp_dropout if mlp_dropout is None else mlp_dropout
        x = pooled
        layers = []
        for layer, (h_prev, c_prev) in enumerate(state.layers):
            weights = {k: self._p(f"{prefix}/lstm{layer}/{k}") for k in ("w_x", "w_h", "b")}
            h, c = T.lstm_cell(x, h_prev, c_prev, weights)
            layers.append((h, c))
            x = h
            if layer < len(state.layers) - 1:
                x = self._dropout(x, lstm_rate, rng)
        pose = self._mlp(x, f"{prefix}/pose", mlp_rate, rng)
        logit = self._mlp(x, f"{prefix}/grip", mlp_rate, rng)
        return ActionPrediction(pose=pose, gripper_logit=logit), HeadState(layers=layers)

    def head_forward(self, pooled: Tensor, state: HeadState, rng=None, **dropout) -> Tuple[ActionPrediction, HeadState]:
        """Prediction and candidate next state; ``state`` itself is never modified."""
        return self._recurrent_head(HEAD, pooled, state, rng, **dropout)

    def aux_head_forward(self, exit_index: int, pooled: Tensor, state: HeadState, rng=None) -> Tuple[ActionPrediction, HeadState]:
        if not self.config.aux_heads:
            raise ValueError("auxiliary heads are disabled for this network")
        if not (1 <= exit_index <= self.config.n_exits):
            raise ValueError(f"exit {exit_index} outside [1, {self.config.n_exits}]")
        self.aux_calls += 1
        return self._recurrent_head(f"aux{exit_index}", pooled, state, rng)


def net_config_from_dict(data: Dict) -> NetConfig:
    return NetConfig(**data)
