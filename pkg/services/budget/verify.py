"""Measured budget compliance of evaluation runs."""

import logging
from typing import Iterable, List

from models import BudgetSpec, ConstraintReport, CostModel, EpisodeLog

logger = logging.getLogger(__name__)


def verify_constraints(logs: Iterable[EpisodeLog], budget: BudgetSpec, cost_model: CostModel, n_cap: int) -> ConstraintReport:
    """
    Check the average, peak and memory constraints on measured traces.

    Average and peak use backbone FLOPs; head FLOPs are totalled
    separately. Memory is mem_{n_cap}, the weights resident for the cap,
    whichever exits were taken.
    """
    per_step: List[int] = []
    head_total = 0
    for log in logs:
        for step in log.steps:
            per_step.append(step.flops_backbone)
            head_total += step.flops_head
    total = int(sum(per_step))
    peak = int(max(per_step)) if per_step else 0
    avg = total / len(per_step) if per_step else 0.0
    mem = cost_model.m(n_cap)
    report = ConstraintReport(
        total_flops=total,
        peak_flops=peak,
        mem=mem,
        avg_flops=avg,
        avg_ok=avg <= budget.per_step,
        peak_ok=peak <= budget.peak_flops,
        mem_ok=mem <= budget.mem_bytes,
        head_flops=head_total,
    )
    if not report.passed:
        logger.debug(f"Constraint check failed: {report.to_dict()}")
    return report
