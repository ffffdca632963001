"""
Tests for cost models, exit caps, geometric allocation, threshold fitting and
constraint verification.
"""

import math

import numpy as np
import pytest

from conftest import tiny_net_config
from config import BudgetConfig
from models import BudgetSpec, CostModel, CriterionKind, EpisodeLog, ExitAllocation, StepTrace
from services.budget.allocation import (
    InfeasibleBudgetError,
    budget_spec,
    cap_exit,
    expected_cost,
    fit_thresholds,
    geometric_proportions,
    replay_exits,
    schedule_from_allocation,
    solve_allocation,
)
from services.budget.cost_model import (
    build_cost_model,
    build_table_cost_model,
    cost_model_for,
    from_layer_table,
    from_table,
)
from services.budget.verify import verify_constraints
from services.network import group_flops
from utils.validation import ValidationError

GB = 1e9


@pytest.fixture
def table_3b():
    return build_table_cost_model("3b", 12, 2)


def _budget(per_step, peak=math.inf, mem=math.inf):
    return BudgetSpec.from_per_step(per_step, peak, mem, 1, 1.0)


def _allocation(proportions):
    return ExitAllocation(q=1.0, proportions=list(proportions), z=proportions[0], n_cap=len(proportions))


class TestCostModel:
    """Analytic and table cost models."""

    def test_table_exits_every_two_layers(self, table_3b):
        assert table_3b.gflops() == pytest.approx([2.6, 5.2, 7.8, 10.4, 13.0, 15.6])
        assert table_3b.mem_gb() == pytest.approx([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])

    def test_full_24_layer_model(self):
        model = build_table_cost_model("3b", 24, 2)
        assert model.n_exits == 12
        assert model.gflops()[-1] == pytest.approx(31.2)

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValidationError):
            build_table_cost_model("70b", 24)

    def test_non_monotone_table_rejected(self):
        with pytest.raises(ValidationError):
            from_table([{"gflops": 2.0, "mem_gb": 1.0}, {"gflops": 1.0, "mem_gb": 2.0}])
        with pytest.raises(ValidationError):
            from_table([{"gflops": 1.0, "mem_gb": 2.0}, {"gflops": 2.0, "mem_gb": 1.0}])

    def test_malformed_table_rejected(self):
        with pytest.raises(ValidationError):
            from_table([{"gflops": 1.0}])

    def test_layer_table_drops_trailing_layers(self):
        model = from_layer_table([1.0] * 5, [0.5] * 5, 2)
        assert model.n_exits == 2

    def test_analytic_costs_are_linear_in_depth(self, net_config):
        model = build_cost_model(net_config)
        per_group = group_flops(net_config)
        assert model.flops == [per_group, 2 * per_group, 3 * per_group]
        assert all(b > a for a, b in zip(model.mem, model.mem[1:]))
        assert model.head_flops > 0

    def test_doubling_width_roughly_quadruples_block_cost(self):
        small = group_flops(tiny_net_config(d_model=16))
        large = group_flops(tiny_net_config(d_model=32))
        assert 3.0 < large / small <= 4.0

    def test_table_mode_truncated_to_network(self, net_config):
        model = cost_model_for(BudgetConfig(cost_mode="table"), net_config)
        assert model.n_exits == net_config.n_exits
        assert model.gflops() == pytest.approx([2.6, 5.2, 7.8])

    def test_short_table_rejected(self):
        budget = BudgetConfig(cost_mode="table", table_layers=2)
        with pytest.raises(ValidationError):
            cost_model_for(budget, tiny_net_config())

    def test_hash_tracks_costs(self, table_3b):
        same = build_table_cost_model("3b", 12, 2)
        other = build_table_cost_model("9b", 12, 2)
        assert table_3b.hash() == same.hash()
        assert table_3b.hash() != other.hash()


class TestCapExit:
    """Peak-FLOPs and memory caps."""

    def test_peak_cap(self, table_3b):
        assert cap_exit(table_3b, 7.8 * GB, math.inf) == 3

    def test_memory_cap_loads_first_four_layers(self):
        model = build_table_cost_model("3b", 24, 2)
        assert cap_exit(model, math.inf, 2.0 * GB) == 2

    def test_unconstrained_uses_every_exit(self, table_3b):
        assert cap_exit(table_3b, math.inf, math.inf) == 6

    def test_peak_below_first_exit_is_infeasible(self, table_3b):
        with pytest.raises(InfeasibleBudgetError):
            cap_exit(table_3b, 1.0 * GB, math.inf)

    def test_memory_below_first_exit_is_infeasible(self, table_3b):
        with pytest.raises(InfeasibleBudgetError):
            cap_exit(table_3b, math.inf, 0.5 * GB)


class TestAllocation:
    """Geometric proportions and the budget solve."""

    def test_uniform_mean(self):
        assert geometric_proportions(1.0, 3, 3) == pytest.approx([1 / 3] * 3)
        assert expected_cost(1.0, [1, 2, 3], 3) == pytest.approx(2.0)

    def test_proportions_zero_beyond_cap(self):
        proportions = geometric_proportions(0.5, 2, 4)
        assert proportions == pytest.approx([2 / 3, 1 / 3, 0.0, 0.0])

    def test_single_exit(self, table_3b):
        allocation = solve_allocation(table_3b, _budget(4.0 * GB), 1)
        assert allocation.proportions[0] == 1.0
        assert allocation.expected_cost == table_3b.c(1)

    def test_generous_budget_gives_uniform(self, table_3b):
        allocation = solve_allocation(table_3b, _budget(100 * GB), 6)
        assert allocation.q == 1.0
        assert allocation.proportions == pytest.approx([1 / 6] * 6)

    def test_budget_below_first_exit_raises(self, table_3b):
        with pytest.raises(InfeasibleBudgetError):
            solve_allocation(table_3b, _budget(2.0 * GB), 6)

    def test_operating_point(self, table_3b):
        allocation = solve_allocation(table_3b, _budget(8.6 * GB), 6)
        assert 0 < allocation.q < 1
        assert sum(allocation.proportions) == pytest.approx(1.0)
        assert allocation.expected_cost == pytest.approx(8.6 * GB, abs=1e-9 * table_3b.c(6))
        assert allocation.z * allocation.q == pytest.approx(allocation.proportions[0])
        assert all(b < a for a, b in zip(allocation.proportions, allocation.proportions[1:]))

    def test_expected_cost_monotone_in_q(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            costs = np.cumsum(rng.uniform(0.1, 2.0, size=5))
            values = [expected_cost(q, costs, 5) for q in np.linspace(0.01, 1.0, 50)]
            assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))

    def test_bisection_matches_grid(self):
        rng = np.random.default_rng(42)
        grid = np.arange(1, 10001) * 1e-4
        for _ in range(100):
            n = int(rng.integers(2, 7))
            flops = np.cumsum(rng.integers(1, 20, size=n)) * 10 ** 8
            model = CostModel(flops=[int(f) for f in flops], mem=[0] * n)
            costs = [float(f) for f in flops]
            low, high = expected_cost(1e-4, costs, n), expected_cost(1.0, costs, n)
            b = float(rng.uniform(low, high))
            allocation = solve_allocation(model, _budget(b), n)
            weights = grid[:, None] ** np.arange(n)
            grid_costs = (weights / weights.sum(axis=1, keepdims=True)) @ flops
            best = grid[int(np.argmin(np.abs(grid_costs - b)))]
            assert abs(allocation.q - best) <= 1.0001e-4
            assert abs(allocation.expected_cost - b) <= 1e-9 * flops[-1]


class TestFitThresholds:
    """Quantile threshold fitting and replay."""

    def test_midpoint_example(self):
        deltas = (np.arange(1, 11) / 10.0).reshape(-1, 1)
        thresholds = fit_thresholds(_allocation([0.3, 0.7]), deltas)
        assert thresholds.eta[0] == pytest.approx(0.35)
        assert math.isinf(thresholds.eta[1])
        exits = replay_exits(thresholds, deltas)
        assert exits.tolist() == [1, 1, 1] + [2] * 7

    def test_zero_share_means_no_early_exit(self):
        deltas = (np.arange(1, 11) / 10.0).reshape(-1, 1)
        thresholds = fit_thresholds(_allocation([0.0, 1.0]), deltas)
        assert thresholds.eta[0] == 0.0
        assert (replay_exits(thresholds, deltas) == 2).all()

    def test_share_covering_everything_gives_infinity(self):
        deltas = (np.arange(1, 11) / 10.0).reshape(-1, 1)
        allocation = ExitAllocation(q=1.0, proportions=[1.0, 0.0], z=1.0, n_cap=2)
        thresholds = fit_thresholds(allocation, deltas)
        assert math.isinf(thresholds.eta[0])
        assert (replay_exits(thresholds, deltas) == 1).all()

    def test_replay_within_one_sample(self):
        rng = np.random.default_rng(1)
        deltas = rng.uniform(0.0, 1.0, size=(500, 3))
        allocation = _allocation([0.4, 0.3, 0.2, 0.1])
        thresholds = fit_thresholds(allocation, deltas, CriterionKind.ACTION, "abc")
        assert thresholds.cost_model_hash == "abc"
        assert len(thresholds.eta) == 4 and math.isinf(thresholds.eta[3])
        counts = np.bincount(replay_exits(thresholds, deltas), minlength=5)
        for i, share in enumerate(allocation.proportions[:3], start=1):
            assert abs(counts[i] - round(share * 500)) <= 1

    def test_too_few_columns_rejected(self):
        with pytest.raises(ValueError):
            fit_thresholds(_allocation([0.4, 0.3, 0.3]), np.zeros((10, 1)))


class TestSchedule:
    """Time-progressive schedules from allocations."""

    def test_steps_per_exit(self):
        allocation = ExitAllocation(q=0.6, proportions=[0.5, 0.3, 0.2], z=0.8, n_cap=3)
        assert schedule_from_allocation(allocation, 10) == [1] * 5 + [2] * 3 + [3] * 2

    def test_empty_schedule_falls_back_to_cap(self):
        allocation = ExitAllocation(q=1.0, proportions=[0.5, 0.5], z=0.5, n_cap=2)
        assert schedule_from_allocation(allocation, 0.4) == [2]


class TestBudgetSpec:
    """Command-line budget figures."""

    def test_fraction_of_cap_cost(self, table_3b):
        budget = budget_spec(table_3b, 3, None, 0.5, math.inf, math.inf, 10, 20.0)
        assert budget.per_step == pytest.approx(3.9 * GB)
        assert budget.total_flops == pytest.approx(3.9 * GB * 200)

    def test_explicit_gflops_win(self, table_3b):
        budget = budget_spec(table_3b, 3, 5.0, 0.5, 8.0, 4.0, 1, 1.0)
        assert budget.per_step == pytest.approx(5.0 * GB)
        assert budget.peak_flops == pytest.approx(8.0 * GB)
        assert budget.mem_bytes == pytest.approx(4.0 * GB)

    def test_default_is_cap_cost(self, table_3b):
        budget = budget_spec(table_3b, 2, None, None, math.inf, math.inf, 0, 0.0)
        assert budget.per_step == pytest.approx(5.2 * GB)


class TestVerify:
    """Measured constraint checks."""

    @staticmethod
    def _log(exits, model, head=0):
        return EpisodeLog(steps=[StepTrace(t=t, exit=e, flops_backbone=model.c(e), flops_head=head)
                                 for t, e in enumerate(exits)])

    def test_all_first_exit(self, table_3b):
        logs = [self._log([1, 1, 1, 1], table_3b, head=7)]
        report = verify_constraints(logs, _budget(3.0 * GB, 3.0 * GB, 10 * GB), table_3b, 4)
        assert report.total_flops == 4 * table_3b.c(1)
        assert report.peak_flops == table_3b.c(1)
        assert report.head_flops == 28
        assert report.mem == table_3b.m(4)
        assert report.passed

    def test_single_deep_step_sets_peak(self, table_3b):
        logs = [self._log([1, 1], table_3b), self._log([1, 6], table_3b)]
        report = verify_constraints(logs, _budget(10 * GB, 10 * GB, 10 * GB), table_3b, 6)
        assert report.peak_flops == table_3b.c(6)
        assert not report.peak_ok
        assert report.avg_ok

    def test_memory_is_cap_weights(self, table_3b):
        logs = [self._log([1], table_3b)]
        report = verify_constraints(logs, _budget(10 * GB, 10 * GB, 2.5 * GB), table_3b, 3)
        assert report.mem == table_3b.m(3)
        assert not report.mem_ok
        assert report.to_dict()["passed"] is False
