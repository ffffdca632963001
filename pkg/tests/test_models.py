"""
Tests for the serializable records in models.
"""

import math

import numpy as np
import pytest

from models import (
    Action7,
    BudgetSpec,
    CostModel,
    CriterionKind,
    Episode,
    EvalMetrics,
    Instruction,
    Step,
    TaskChain,
    TaskTemplate,
    ThresholdVector,
)


class TestThresholdVector:
    """Thresholds with +inf stored as null."""

    def test_infinity_round_trips_as_null(self):
        vector = ThresholdVector(CriterionKind.ACTION, [0.2, math.inf, math.inf], 2, "abc")
        data = vector.to_dict()
        assert data["eta"] == [0.2, None, None]
        assert "schedule" not in data
        back = ThresholdVector.from_dict(data)
        assert back.eta[0] == 0.2 and math.isinf(back.eta[1])
        assert back.criterion is CriterionKind.ACTION
        assert back.cost_model_hash == "abc"

    def test_effective_threshold_at_cap(self):
        vector = ThresholdVector("action", [0.1, 0.2, 0.3], 2)
        assert vector.effective(1) == 0.1
        assert math.isinf(vector.effective(2))
        assert math.isinf(vector.effective(3))

    def test_schedule_kept(self):
        vector = ThresholdVector(CriterionKind.TIME, [math.inf], 3, schedule=[1, 2, 3])
        assert ThresholdVector.from_dict(vector.to_dict()).schedule == [1, 2, 3]

    def test_criterion_flags(self):
        assert CriterionKind.ACTION.uses_thresholds
        assert not CriterionKind.TIME.uses_thresholds


class TestCostModel:
    """Cumulative cost vectors."""

    def test_accessors_are_one_based(self):
        model = CostModel([10, 20, 30], [1, 2, 3])
        assert model.c(1) == 10 and model.m(3) == 3
        assert model.n_exits == 3

    def test_hash_ignores_source_and_head(self):
        a = CostModel([10, 20], [1, 2], head_flops=5, source="analytic")
        b = CostModel([10, 20], [1, 2], head_flops=7, source="table")
        c = CostModel([10, 21], [1, 2])
        assert a.hash() == b.hash()
        assert a.hash() != c.hash()

    def test_dict_round_trip(self):
        model = CostModel([10, 20], [1, 2], head_flops=3, source="table")
        assert CostModel.from_dict(model.to_dict()) == model


def test_budget_per_step():
    budget = BudgetSpec.from_per_step(2.0, math.inf, math.inf, 4, 5.0)
    assert budget.total_flops == pytest.approx(40.0)
    assert budget.per_step == pytest.approx(2.0)
    assert budget.to_dict()["peak_flops"] is None


def test_action_clip_moves_only_planar_dims():
    action = Action7(pose=np.array([0.5, -0.5, 0.7, 0.0, 0.0, 0.0]), gripper=3).clipped(0.08)
    assert action.pose.tolist()[:3] == [0.08, -0.08, 0.7]
    assert action.gripper == 1


def test_episode_serialization_rounds():
    instruction = Instruction(TaskTemplate.REACH, [2], [1, 2, 0, 0, 0, 0])
    step = Step(obs=np.full((2, 3), 0.1234567891), action=Action7(np.full(6, 0.5), 0))
    episode = Episode(instruction, [step], split="B")
    back = Episode.from_dict(episode.to_dict())
    assert back.split == "B"
    assert back.steps[0].obs[0, 0] == pytest.approx(0.123457)
    assert back.instruction.template is TaskTemplate.REACH


def test_chain_needs_five_instructions():
    instruction = Instruction(TaskTemplate.REACH, [0], [0] * 6)
    with pytest.raises(ValueError):
        TaskChain(world=None, instructions=[instruction] * 4, split="A")


def test_eval_metrics_round_trip():
    metrics = EvalMetrics(
        n_chains=2, avg_len=1.5, succ=[1.0, 0.5, 0.0, 0.0, 0.0], exit_histogram={1: 4, 3: 2},
        mean_flops=12.5, mean_head_flops=1.0, peak_flops=30, total_flops=75, mem=100,
        n_steps=6, ns_per_action=2.0, label="static-1",
    )
    data = metrics.to_dict()
    assert data["exit_histogram"] == {"1": 4, "3": 2}
    assert data["succ_2"] == 0.5
    assert EvalMetrics.from_dict(data) == metrics
