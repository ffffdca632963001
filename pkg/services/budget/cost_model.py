"""
Per-exit compute and memory costs.

Analytic mode counts the matmul FLOPs of the backbone groups from the network
dimensions; table mode builds the costs from per-layer figures of a large
published model, with an exit every ``layers_per_exit`` layers.
"""

import logging
from typing import Dict, List, Sequence, Tuple

from config import BudgetConfig, NetConfig
from models import CostModel
from services.network import group_flops, head_flops, param_counts
from utils.validation import ValidationError

logger = logging.getLogger(__name__)

BYTES_PER_PARAM = 4

# per-layer (GFLOPs, GB)
PRESETS: Dict[str, Tuple[float, float]] = {
    "3b": (1.3, 0.5),
    "9b": (2.85, 1.0),
}


def check_monotone(flops: Sequence[int], mem: Sequence[int]) -> None:
    if not flops or len(flops) != len(mem):
        raise ValidationError(f"Cost table needs matching non-empty FLOPs and memory columns (got {len(flops)} and {len(mem)})")
    if flops[0] <= 0 or any(b <= a for a, b in zip(flops, flops[1:])):
        raise ValidationError(f"Cumulative FLOPs must be positive and strictly increasing: {list(flops)}")
    if mem[0] < 0 or any(b < a for a, b in zip(mem, mem[1:])):
        raise ValidationError(f"Cumulative memory must be non-negative and non-decreasing: {list(mem)}")


def build_cost_model(config: NetConfig) -> CostModel:
    """
    Analytic costs of a network configuration.

    C_i is the matmul FLOPs of groups 1..i for one frame (the encoder
    projection is shared by every exit and left out). mem_i counts the
    parameters resident when exits beyond i are never loaded: encoder,
    groups 1..i and the action head, at 4 bytes each.
    """
    per_group = group_flops(config)
    counts = param_counts(config)
    flops, mem = [], []
    resident = counts.get("encoder", 0) + counts.get("head", 0)
    for i in range(1, config.n_exits + 1):
        resident += counts.get(f"group{i}", 0)
        flops.append(i * per_group)
        mem.append(resident * BYTES_PER_PARAM)
    check_monotone(flops, mem)
    return CostModel(flops=flops, mem=mem, head_flops=head_flops(config), source="analytic")


def from_layer_table(gflops: Sequence[float], mem_gb: Sequence[float], layers_per_exit: int,
                     head_cost: int = 0, source: str = "table") -> CostModel:
    """Cumulative costs from per-layer GFLOPs and GB; trailing layers past the last exit are dropped."""
    if layers_per_exit < 1:
        raise ValidationError("layers_per_exit must be at least 1")
    if len(gflops) != len(mem_gb):
        raise ValidationError(f"Per-layer table has {len(gflops)} FLOPs rows but {len(mem_gb)} memory rows")
    layer_flops = [int(round(g * 1e9)) for g in gflops]
    layer_mem = [int(round(m * 1e9)) for m in mem_gb]
    if any(f <= 0 for f in layer_flops) or any(m < 0 for m in layer_mem):
        raise ValidationError("Per-layer FLOPs must be positive and memory non-negative")
    n_exits = len(layer_flops) // layers_per_exit
    flops = [sum(layer_flops[:i * layers_per_exit]) for i in range(1, n_exits + 1)]
    mem = [sum(layer_mem[:i * layers_per_exit]) for i in range(1, n_exits + 1)]
    check_monotone(flops, mem)
    return CostModel(flops=flops, mem=mem, head_flops=head_cost, source=source)


def from_table(rows: List[Dict]) -> CostModel:
    """Cumulative table rows ``{"gflops": .., "mem_gb": ..}``, one per exit."""
    try:
        flops = [int(round(float(r["gflops"]) * 1e9)) for r in rows]
        mem = [int(round(float(r["mem_gb"]) * 1e9)) for r in rows]
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"Malformed cost table: {e}") from e
    check_monotone(flops, mem)
    return CostModel(flops=flops, mem=mem, source="table")


def build_table_cost_model(preset: str, n_layers: int, layers_per_exit: int = 2, head_cost: int = 0) -> CostModel:
    if preset not in PRESETS:
        raise ValidationError(f"Unknown cost preset '{preset}' (choose from {', '.join(PRESETS)})")
    gflops, mem_gb = PRESETS[preset]
    return from_layer_table([gflops] * n_layers, [mem_gb] * n_layers, layers_per_exit, head_cost, source=f"table:{preset}")


def cost_model_for(budget: BudgetConfig, net: NetConfig) -> CostModel:
    """Cost model for a run, truncated to the exits the network actually has."""
    if budget.cost_mode == "analytic":
        return build_cost_model(net)
    if budget.cost_mode != "table":
        raise ValidationError(f"Unknown cost_mode '{budget.cost_mode}' (analytic or table)")
    model = build_table_cost_model(budget.table_preset, budget.table_layers, budget.layers_per_exit, head_flops(net))
    if model.n_exits < net.n_exits:
        raise ValidationError(f"Cost table covers {model.n_exits} exits but the network has {net.n_exits}")
    if model.n_exits > net.n_exits:
        logger.info(f"Truncating {model.source} cost table from {model.n_exits} to {net.n_exits} exits")
        model = CostModel(model.flops[:net.n_exits], model.mem[:net.n_exits], model.head_flops, model.source)
    return model
