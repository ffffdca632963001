"""
Adaptive inference: per-step exit decisions, the early-exit policy and
calibration-delta collection.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from models import Action7, CostModel, CriterionKind, Episode, Instruction, StepTrace, ThresholdVector, WorldState
from services.env.chains import run_episode  # noqa: F401  (re-exported for callers of this module)
from services.network import ActionPrediction, ExitCache, HeadState, MultiExitNet, head_flops
from utils import tensor as T
from utils.validation import require, validate_schedule

logger = logging.getLogger(__name__)


@dataclass
class Decision:
    exit: int
    prediction: ActionPrediction
    state: HeadState
    deltas: List[float] = field(default_factory=list)
    flops_backbone: int = 0
    head_evals: int = 0


def _check(cache: ExitCache, n_cap: int, net: MultiExitNet) -> None:
    if not cache.token_states:
        raise ValueError("exit decision needs a cache holding the encoder output")
    if not (1 <= n_cap <= net.config.n_exits):
        raise ValueError(f"n_cap {n_cap} outside [1, {net.config.n_exits}]")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0 when either vector is zero."""
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def decide_exit_action_consistency(net: MultiExitNet, cache: ExitCache, state: HeadState,
                                   eta: Sequence[float], n_cap: int) -> Decision:
    """
    Try exits in order and stop at the first i with
    ||v(i) - v(i-1)|| < eta_i, v(0) coming from the pooled encoder output.
    The threshold at the cap is +inf. The committed state is the candidate
    from the winning exit; ``state`` is never modified.
    """
    _check(cache, n_cap, net)
    if n_cap == 1:
        net.forward_to_exit(cache, 1)
        pred, candidate = net.head_forward(cache.pooled[1], state)
        return Decision(1, pred, candidate, [], cache.flops, 1)

    first, _ = net.head_forward(cache.pooled_input, state)
    previous = first.consistency_vector
    evals = 1
    deltas: List[float] = []
    for i in range(1, n_cap + 1):
        net.forward_to_exit(cache, i)
        pred, candidate = net.head_forward(cache.pooled[i], state)
        evals += 1
        vector = pred.consistency_vector
        delta = float(np.linalg.norm(vector - previous))
        deltas.append(delta)
        threshold = math.inf if i >= n_cap else eta[i - 1]
        if delta < threshold or i == n_cap:
            return Decision(i, pred, candidate, deltas, cache.flops, evals)
        previous = vector
    raise AssertionError("unreachable")


def decide_exit_feature_similarity(net: MultiExitNet, cache: ExitCache, state: HeadState,
                                   sim_thresholds: Sequence[float], n_cap: int) -> Decision:
    """Stop at the first i with cos(x~i, x~(i-1)) > s_i; the head runs once at the chosen exit."""
    _check(cache, n_cap, net)
    deltas: List[float] = []
    chosen = n_cap
    for i in range(1, n_cap + 1):
        net.forward_to_exit(cache, i)
        if i == n_cap:
            break
        similarity = cosine(cache.pooled[i].data, cache.pooled[i - 1].data)
        deltas.append(1.0 - similarity)
        if similarity > sim_thresholds[i - 1]:
            chosen = i
            break
    pred, candidate = net.head_forward(cache.pooled[chosen], state)
    return Decision(chosen, pred, candidate, deltas, cache.flops, 1)


def decide_exit_time_progressive(t: int, schedule: Sequence[int], n_cap: int) -> int:
    """min(schedule(t), n_cap); the last schedule entry holds for later steps."""
    if not schedule:
        raise ValueError("empty time schedule")
    return min(int(schedule[min(t, len(schedule) - 1)]), n_cap)


def decide_static(net: MultiExitNet, cache: ExitCache, state: HeadState, exit_index: int) -> Decision:
    _check(cache, exit_index, net)
    net.forward_to_exit(cache, exit_index)
    pred, candidate = net.head_forward(cache.pooled[exit_index], state)
    return Decision(exit_index, pred, candidate, [], cache.flops, 1)


class EarlyExitPolicy:
    """
    Network policy with one of the exit criteria.

    The network is shared read-only between spawned copies; each copy owns
    its head state. Only the chosen exit's head state is committed.
    With a cost model, step traces record its C_i for the exit taken and
    its head cost per head evaluation; without one, the network's own counters.
    """

    def __init__(self, net: MultiExitNet, criterion: CriterionKind, n_cap: int,
                 eta: Optional[Sequence[float]] = None, schedule: Optional[Sequence[int]] = None,
                 static_exit: Optional[int] = None, cost_model: Optional[CostModel] = None):
        self.net = net
        self.criterion = CriterionKind(criterion)
        self.n_cap = n_cap
        self.eta = list(eta) if eta is not None else [math.inf] * net.config.n_exits
        self.schedule = list(schedule) if schedule is not None else None
        self.static_exit = static_exit
        self.cost_model = cost_model
        if cost_model is not None and cost_model.n_exits < n_cap:
            raise ValueError(f"cost model covers {cost_model.n_exits} exits, cap is {n_cap}")
        self.mem_bytes = cost_model.m(n_cap) if cost_model is not None else 0
        self.head_cost = cost_model.head_flops if cost_model is not None else head_flops(net.config)
        self.state: Optional[HeadState] = None
        if self.criterion == CriterionKind.TIME:
            require(validate_schedule(self.schedule or [], net.config.n_exits))
        if self.criterion == CriterionKind.STATIC and not static_exit:
            raise ValueError("static criterion needs an exit index")

    @classmethod
    def from_thresholds(cls, net: MultiExitNet, thresholds: ThresholdVector,
                        cost_model: Optional[CostModel] = None) -> "EarlyExitPolicy":
        return cls(net, thresholds.criterion, thresholds.n_cap, eta=thresholds.eta,
                   schedule=thresholds.schedule, cost_model=cost_model)

    @classmethod
    def static(cls, net: MultiExitNet, exit_index: int, cost_model: Optional[CostModel] = None) -> "EarlyExitPolicy":
        return cls(net, CriterionKind.STATIC, exit_index, static_exit=exit_index, cost_model=cost_model)

    def spawn(self, index: int) -> "EarlyExitPolicy":
        return EarlyExitPolicy(self.net, self.criterion, self.n_cap, self.eta, self.schedule, self.static_exit, self.cost_model)

    def reset(self) -> None:
        self.state = self.net.zero_state(1)

    def decide(self, cache: ExitCache, t: int) -> Decision:
        if self.criterion == CriterionKind.ACTION:
            return decide_exit_action_consistency(self.net, cache, self.state, self.eta, self.n_cap)
        if self.criterion == CriterionKind.FEATURE:
            similarity = [1.0 - e for e in self.eta]
            return decide_exit_feature_similarity(self.net, cache, self.state, similarity, self.n_cap)
        if self.criterion == CriterionKind.TIME:
            return decide_static(self.net, cache, self.state, decide_exit_time_progressive(t, self.schedule, self.n_cap))
        return decide_static(self.net, cache, self.state, self.static_exit)

    def act(self, world: WorldState, obs: np.ndarray, instruction: Instruction, t: int) -> Tuple[Action7, StepTrace]:
        if self.state is None:
            self.reset()
        start = time.perf_counter_ns()
        cache = self.net.new_cache(instruction.tokens, obs)
        decision = self.decide(cache, t)
        self.state = decision.state
        prob = float(decision.prediction.gripper_prob[0, 0])
        action = Action7(pose=decision.prediction.pose.data[0].astype(np.float64), gripper=int(prob > 0.5))
        elapsed = time.perf_counter_ns() - start
        backbone = self.cost_model.c(decision.exit) if self.cost_model is not None else decision.flops_backbone
        trace = StepTrace(
            t=t,
            exit=decision.exit,
            flops_backbone=backbone,
            flops_head=decision.head_evals * self.head_cost,
            deltas=decision.deltas,
            action=action,
            gripper_prob=prob,
            ns=elapsed,
        )
        return action, trace


def collect_deltas(net: MultiExitNet, episodes: List[Episode], n_cap: int,
                   criterion: CriterionKind = CriterionKind.ACTION, max_samples: Optional[int] = None) -> np.ndarray:
    """
    Per-timestep deltas at exits 1..n_cap over demonstration episodes.

    Every exit is evaluated (no early exit) and the head state advances with the
    full-depth prediction. Action criterion: L2 distance of consistency
    vectors between adjacent exits; feature criterion: 1 - cosine of pooled
    features. Returns an (S, n_cap) array.
    """
    criterion = CriterionKind(criterion)
    rows: List[List[float]] = []
    with T.no_grad():
        for episode in episodes:
            state = net.zero_state(1)
            for step in episode.steps:
                cache = net.new_cache(episode.instruction.tokens, step.obs)
                net.forward_to_exit(cache, n_cap)
                row = []
                if criterion == CriterionKind.FEATURE:
                    for i in range(1, n_cap + 1):
                        row.append(1.0 - cosine(cache.pooled[i].data, cache.pooled[i - 1].data))
                    _, state = net.head_forward(cache.pooled[n_cap], state)
                else:
                    first, _ = net.head_forward(cache.pooled[0], state)
                    previous = first.consistency_vector
                    for i in range(1, n_cap + 1):
                        pred, candidate = net.head_forward(cache.pooled[i], state)
                        row.append(float(np.linalg.norm(pred.consistency_vector - previous)))
                        previous = pred.consistency_vector
                    state = candidate
                rows.append(row)
            if max_samples is not None and len(rows) >= max_samples:
                break
    deltas = np.array(rows, dtype=np.float64).reshape(len(rows), n_cap)
    logger.info(f"Collected {deltas.shape[0]} calibration samples over {n_cap} exits ({criterion.value})")
    return deltas
