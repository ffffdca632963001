"""
Offline threshold calibration.

The per-step budget is spread over exits with geometric proportions
q_i = z * q^i (i <= n, zero beyond the cap). q is solved so the expected
per-step cost meets the budget, then thresholds are fitted on calibration
deltas so that roughly q_i of the timesteps leave at exit i.
"""

import logging
import math
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import bisect

from models import BudgetSpec, CostModel, CriterionKind, ExitAllocation, ThresholdVector

logger = logging.getLogger(__name__)

Q_MIN = 1e-12


class InfeasibleBudgetError(Exception):
    """Raised when no exit satisfies the peak/memory caps or the average budget is below C_1."""
    pass


def cap_exit(cost_model: CostModel, peak_flops: float, mem_bytes: float) -> int:
    """Largest exit i with C_i <= G and mem_i <= M."""
    if peak_flops <= 0 or mem_bytes <= 0:
        raise InfeasibleBudgetError("Peak FLOPs and memory caps must be positive")
    if cost_model.c(1) > peak_flops:
        raise InfeasibleBudgetError(
            f"Peak budget {peak_flops / 1e9:.4g} GFLOPs is below C_1 = {cost_model.c(1) / 1e9:.4g} GFLOPs"
        )
    if cost_model.m(1) > mem_bytes:
        raise InfeasibleBudgetError(
            f"Memory cap {mem_bytes / 1e9:.4g} GB is below mem_1 = {cost_model.m(1) / 1e9:.4g} GB"
        )
    n = 1
    for i in range(2, cost_model.n_exits + 1):
        if cost_model.c(i) <= peak_flops and cost_model.m(i) <= mem_bytes:
            n = i
        else:
            break
    return n


def geometric_proportions(q: float, n: int, n_exits: int) -> List[float]:
    """Normalized q^(i-1) for i <= n, zeros after."""
    weights = np.array([q ** (i - 1) for i in range(1, n + 1)], dtype=np.float64)
    weights /= weights.sum()
    return weights.tolist() + [0.0] * (n_exits - n)


def expected_cost(q: float, costs: Sequence[float], n: int) -> float:
    proportions = geometric_proportions(q, n, n)
    return float(np.dot(proportions, np.asarray(costs[:n], dtype=np.float64)))


def _allocation(q: float, cost_model: CostModel, n: int) -> ExitAllocation:
    proportions = geometric_proportions(q, n, cost_model.n_exits)
    return ExitAllocation(
        q=q,
        proportions=proportions,
        z=proportions[0] / q,
        n_cap=n,
        expected_cost=expected_cost(q, cost_model.flops, n),
    )


def solve_allocation(cost_model: CostModel, budget: BudgetSpec, n: int) -> ExitAllocation:
    """
    Solve q in (0, 1] with expected per-step cost equal to min(b, g(1)).

    Raises:
        InfeasibleBudgetError: per-step budget below C_1
    """
    if not (1 <= n <= cost_model.n_exits):
        raise ValueError(f"cap {n} outside [1, {cost_model.n_exits}]")
    b = budget.per_step
    c1 = cost_model.c(1)
    if b < c1:
        raise InfeasibleBudgetError(f"Per-step budget {b / 1e9:.4g} GFLOPs is below C_1 = {c1 / 1e9:.4g} GFLOPs")
    costs = [float(c) for c in cost_model.flops]

    if n == 1:
        return _allocation(1.0, cost_model, 1)
    if b >= expected_cost(1.0, costs, n):
        logger.info(f"Budget {b:.4g} FLOPs/step covers the uniform allocation; using q = 1")
        return _allocation(1.0, cost_model, n)
    if b <= expected_cost(Q_MIN, costs, n):
        return _allocation(Q_MIN, cost_model, n)

    q = bisect(lambda x: expected_cost(x, costs, n) - b, Q_MIN, 1.0, xtol=1e-15, maxiter=500)
    allocation = _allocation(float(q), cost_model, n)
    logger.info(f"Solved q = {q:.6g} for {b:.4g} FLOPs/step over {n} exits (proportions {np.round(allocation.proportions, 4).tolist()})")
    return allocation


def fit_thresholds(allocation: ExitAllocation, deltas: np.ndarray,
                   criterion: CriterionKind = CriterionKind.ACTION, cost_model_hash: str = "") -> ThresholdVector:
    """
    Fit eta sequentially: at exit i take k_i = round(q_i * S) of the still
    active samples with the smallest deltas; eta_i is the midpoint of the
    k_i-th and (k_i+1)-th smallest. k_i = 0 gives 0, k_i at or above the
    active count gives +inf. The cap and later exits get +inf.

    Args:
        deltas: (S, m) array with m >= n_cap - 1, column i-1 holding exit i
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    n_cap = allocation.n_cap
    n_exits = len(allocation.proportions)
    if deltas.ndim != 2 or deltas.shape[1] < n_cap - 1:
        raise ValueError(f"calibration deltas of shape {deltas.shape} do not cover exits below the cap {n_cap}")
    total = deltas.shape[0]
    active = np.ones(total, dtype=bool)
    eta: List[float] = []
    for i in range(1, n_cap):
        column = deltas[:, i - 1]
        k = int(math.floor(allocation.proportions[i - 1] * total + 0.5))
        values = np.sort(column[active])
        if k <= 0:
            threshold = 0.0
        elif k >= len(values):
            threshold = math.inf
        else:
            threshold = float((values[k - 1] + values[k]) / 2.0)
        eta.append(threshold)
        active &= ~(column < threshold)
    eta.extend([math.inf] * (n_exits - len(eta)))
    logger.info(f"Fitted thresholds {[round(e, 6) for e in eta[:n_cap - 1]]} on {total} calibration samples")
    return ThresholdVector(criterion=criterion, eta=eta, n_cap=n_cap, cost_model_hash=cost_model_hash)


def replay_exits(thresholds: ThresholdVector, deltas: np.ndarray) -> np.ndarray:
    """Exit index per calibration sample under the strict-< rule."""
    deltas = np.asarray(deltas, dtype=np.float64)
    exits = np.full(deltas.shape[0], thresholds.n_cap, dtype=np.int64)
    undecided = np.ones(deltas.shape[0], dtype=bool)
    for i in range(1, thresholds.n_cap):
        fire = undecided & (deltas[:, i - 1] < thresholds.effective(i))
        exits[fire] = i
        undecided &= ~fire
    return exits


def schedule_from_allocation(allocation: ExitAllocation, mean_len: float) -> List[int]:
    """Time-progressive schedule: round(q_i * L) steps at exit i, in exit order."""
    schedule: List[int] = []
    for i, share in enumerate(allocation.proportions[:allocation.n_cap], start=1):
        schedule.extend([i] * int(round(share * mean_len)))
    return schedule or [allocation.n_cap]


def budget_spec(cost_model: CostModel, n_cap: int, avg_gflops: Optional[float], avg_fraction: Optional[float],
                peak_gflops: float, mem_gb: float, n_tasks: int, mean_len: float) -> BudgetSpec:
    """Budget from command-line figures; ``avg_fraction`` is relative to C_n."""
    if avg_gflops is not None:
        per_step = avg_gflops * 1e9
    elif avg_fraction is not None:
        per_step = avg_fraction * cost_model.c(n_cap)
    else:
        per_step = float(cost_model.c(n_cap))
    tasks = max(1, n_tasks)
    return BudgetSpec.from_per_step(per_step, peak_gflops * 1e9, mem_gb * 1e9, tasks, max(mean_len, 1.0))
