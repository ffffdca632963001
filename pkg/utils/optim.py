"""
AdamW optimizer and gradient clipping for ``Parameters`` registries.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from utils.tensor import Parameters, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moments per parameter plus the shared step counter."""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, step: int, arrays: Dict[str, np.ndarray]) -> "AdamState":
        state = cls(step=step)
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            getattr(state, kind)[name] = np.asarray(arr, dtype=np.float64)
        return state


def adam_step(
    params: Parameters,
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    names: Optional[Iterable[str]] = None,
) -> Parameters:
    """
    One bias-corrected AdamW update, in place on ``params``.

    ``lr`` is either a float or a mapping name -> learning rate. Only
    ``names`` (default: every name present in ``grads``) are touched.
    """
    beta1, beta2 = betas
    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t

    for name in (names if names is not None else grads.keys()):
        tensor = params[name]
        g = grads[name]
        if g.shape != tensor.shape:
            raise ShapeError("adam_step", tensor.shape, g.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v

        rate = lr[name] if isinstance(lr, dict) else lr
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        data = tensor.data
        if weight_decay:
            data = data - rate * weight_decay * data
        tensor.data = data - rate * update
    return params


def global_norm(grads: Dict[str, np.ndarray], names: Optional[Iterable[str]] = None) -> float:
    keys = names if names is not None else grads.keys()
    return float(np.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in keys)))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float, names: Optional[Iterable[str]] = None) -> float:
    """Rescale ``grads`` in place to global norm ``max_norm``; returns the pre-clip norm."""
    keys = list(names) if names is not None else list(grads.keys())
    norm = global_norm(grads, keys)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for k in keys:
            grads[k] = grads[k] * factor
    return norm


def warmup_factor(step: int, warmup_steps: int) -> float:
    """Linear warmup multiplier for the 1-based optimizer ``step``."""
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, step / float(warmup_steps))
