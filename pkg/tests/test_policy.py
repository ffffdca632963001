"""
Tests for per-step exit decisions and the early-exit policy.
"""

import math

import numpy as np
import pytest

from config import BudgetConfig, EnvConfig
from models import CriterionKind, TaskTemplate, ThresholdVector
from services.budget.allocation import budget_spec
from services.budget.cost_model import cost_model_for
from services.budget.verify import verify_constraints
from services.env.dataset import generate_dataset
from services.env.tasks import make_instruction, sample_instruction, sample_world
from services.env.world import TabletopEnv, observe
from services.network import ExitCache, MultiExitNet, group_flops, head_flops
from services.policy import (
    EarlyExitPolicy,
    collect_deltas,
    cosine,
    decide_exit_action_consistency,
    decide_exit_feature_similarity,
    decide_exit_time_progressive,
    decide_static,
    run_episode,
)
from utils.rng import stream
from utils.validation import ValidationError


@pytest.fixture
def net(net_config):
    return MultiExitNet.init(net_config, seed=5)


@pytest.fixture
def scene():
    world = sample_world("A", stream(1, "scene"), EnvConfig())
    instruction = make_instruction(TaskTemplate.GRASP, [world.objects[0].color_id])
    return world, instruction


@pytest.fixture
def cache_factory(net, scene):
    world, instruction = scene
    obs = observe(world)
    return lambda: net.new_cache(instruction.tokens, obs)


def _state_arrays(state):
    return [(h.copy(), c.copy()) for h, c in state.arrays()]


class TestActionConsistency:
    """Threshold rule over adjacent-exit action deltas."""

    def test_infinite_threshold_exits_first(self, net, cache_factory):
        decision = decide_exit_action_consistency(net, cache_factory(), net.zero_state(), [math.inf] * 3, 3)
        assert decision.exit == 1
        assert decision.flops_backbone == group_flops(net.config)
        assert decision.head_evals == 2
        assert len(decision.deltas) == 1

    def test_zero_thresholds_reach_cap(self, net, cache_factory):
        decision = decide_exit_action_consistency(net, cache_factory(), net.zero_state(), [0.0, 0.0, math.inf], 3)
        assert decision.exit == 3
        assert decision.flops_backbone == 3 * group_flops(net.config)
        assert decision.head_evals == 4
        assert all(d >= 0 for d in decision.deltas)

    def test_cap_of_one_ignores_thresholds(self, net, cache_factory):
        decision = decide_exit_action_consistency(net, cache_factory(), net.zero_state(), [0.0, 0.0, 0.0], 1)
        assert decision.exit == 1
        assert decision.head_evals == 1

    def test_cap_limits_depth(self, net, cache_factory):
        decision = decide_exit_action_consistency(net, cache_factory(), net.zero_state(), [0.0, 0.0, 0.0], 2)
        assert decision.exit == 2
        assert decision.flops_backbone == 2 * group_flops(net.config)

    def test_trying_exits_leaves_input_state_untouched(self, net, cache_factory):
        state = net.zero_state()
        _, state = net.head_forward(cache_factory().pooled_input, state)
        before = _state_arrays(state)
        decide_exit_action_consistency(net, cache_factory(), state, [0.0, 0.0, math.inf], 3)
        for (h0, c0), (h1, c1) in zip(before, state.arrays()):
            assert np.array_equal(h0, h1) and np.array_equal(c0, c1)

    def test_committed_state_matches_chosen_exit_replay(self, net, cache_factory):
        state = net.zero_state()
        decision = decide_exit_action_consistency(net, cache_factory(), state, [0.0, math.inf, math.inf], 3)
        assert decision.exit == 2
        replay = net.forward_to_exit(cache_factory(), 2)
        _, expected = net.head_forward(replay.pooled[2], state)
        for (h0, c0), (h1, c1) in zip(decision.state.arrays(), expected.arrays()):
            assert np.array_equal(h0, h1) and np.array_equal(c0, c1)

    def test_lower_thresholds_never_exit_earlier(self, net, cache_factory):
        rng = np.random.default_rng(0)
        for _ in range(10):
            high = rng.uniform(0.0, 2.0, size=2)
            low = high * rng.uniform(0.0, 1.0, size=2)
            exit_high = decide_exit_action_consistency(net, cache_factory(), net.zero_state(), [*high, math.inf], 3).exit
            exit_low = decide_exit_action_consistency(net, cache_factory(), net.zero_state(), [*low, math.inf], 3).exit
            assert exit_low >= exit_high

    def test_empty_cache_rejected(self, net):
        with pytest.raises(ValueError):
            decide_exit_action_consistency(net, ExitCache(), net.zero_state(), [0.0] * 3, 3)

    def test_cap_outside_network_rejected(self, net, cache_factory):
        with pytest.raises(ValueError):
            decide_exit_action_consistency(net, cache_factory(), net.zero_state(), [0.0] * 3, 4)


class TestFeatureSimilarity:
    """Cosine rule over adjacent pooled features."""

    def test_cosine_edge_cases(self):
        assert cosine(np.zeros(3), np.ones(3)) == 0.0
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 0.0
        assert cosine(np.array([1.0, 2.0]), np.array([2.0, 4.0])) == pytest.approx(1.0)

    def test_unit_thresholds_reach_cap(self, net, cache_factory):
        decision = decide_exit_feature_similarity(net, cache_factory(), net.zero_state(), [1.0, 1.0, 1.0], 3)
        assert decision.exit == 3
        assert decision.head_evals == 1
        assert len(decision.deltas) == 2

    def test_permissive_threshold_exits_first(self, net, cache_factory):
        decision = decide_exit_feature_similarity(net, cache_factory(), net.zero_state(), [-1.5, -1.5, -1.5], 3)
        assert decision.exit == 1
        assert decision.flops_backbone == group_flops(net.config)


class TestTimeProgressive:
    """Step schedules."""

    def test_schedule_lookup(self):
        schedule = [1, 1, 2, 2, 3]
        assert decide_exit_time_progressive(0, schedule, 3) == 1
        assert decide_exit_time_progressive(2, schedule, 3) == 2
        assert decide_exit_time_progressive(40, schedule, 3) == 3

    def test_cap_applies(self):
        assert decide_exit_time_progressive(4, [1, 2, 3], 2) == 2

    def test_monotone_over_time(self):
        schedule = [1, 1, 2, 3, 3]
        exits = [decide_exit_time_progressive(t, schedule, 3) for t in range(12)]
        assert all(b >= a for a, b in zip(exits, exits[1:]))

    def test_empty_schedule_rejected(self):
        with pytest.raises(ValueError):
            decide_exit_time_progressive(0, [], 3)

    def test_policy_validates_schedule(self, net):
        with pytest.raises(ValidationError):
            EarlyExitPolicy(net, CriterionKind.TIME, 3, schedule=[2, 1])


class TestEarlyExitPolicy:
    """Full rollouts with the early-exit policy."""

    @staticmethod
    def _rollout(policy, scene, t_max=6):
        world, instruction = scene
        env = TabletopEnv(EnvConfig(t_max=t_max))
        return run_episode(policy, env, world, instruction)

    def test_infinite_thresholds_equal_static_first_exit(self, net, scene):
        thresholds = ThresholdVector(CriterionKind.ACTION, [math.inf] * 3, 3)
        adaptive = self._rollout(EarlyExitPolicy.from_thresholds(net, thresholds), scene)
        static = self._rollout(EarlyExitPolicy.static(net, 1), scene)
        assert adaptive.exits == [1] * len(adaptive)
        for a, b in zip(adaptive.steps, static.steps):
            assert np.array_equal(a.action.pose, b.action.pose)
            assert a.action.gripper == b.action.gripper

    def test_zero_thresholds_equal_static_cap(self, net, scene):
        thresholds = ThresholdVector(CriterionKind.ACTION, [0.0, 0.0, math.inf], 3)
        adaptive = self._rollout(EarlyExitPolicy.from_thresholds(net, thresholds), scene)
        static = self._rollout(EarlyExitPolicy.static(net, 3), scene)
        assert adaptive.exits == [3] * len(adaptive)
        for a, b in zip(adaptive.steps, static.steps):
            assert np.array_equal(a.action.pose, b.action.pose)

    def test_trace_flops_itemized(self, net, scene):
        thresholds = ThresholdVector(CriterionKind.ACTION, [0.0, 0.0, math.inf], 3)
        log = self._rollout(EarlyExitPolicy.from_thresholds(net, thresholds), scene, t_max=2)
        for trace in log.steps:
            assert trace.flops_backbone == 3 * group_flops(net.config)
            assert trace.flops_head == 4 * head_flops(net.config)
            assert trace.ns > 0

    def test_table_costs_recorded_for_exit_taken(self, net, scene):
        costs = cost_model_for(BudgetConfig(cost_mode="table"), net.config)
        policy = EarlyExitPolicy.static(net, 3, cost_model=costs)
        log = self._rollout(policy, scene, t_max=2)
        assert policy.mem_bytes == costs.m(3)
        for trace in log.steps:
            assert trace.flops_backbone == costs.c(3)
            assert trace.flops_head == costs.head_flops

        budget = budget_spec(costs, 3, None, 0.1, math.inf, math.inf, 1, 1.0)
        report = verify_constraints([log], budget, costs, 3)
        assert not report.avg_ok
        assert report.avg_flops == costs.c(3)

    @pytest.mark.slow
    def test_bracketing_thresholds_match_static_over_many_episodes(self, net):
        env = EnvConfig()
        first = ThresholdVector(CriterionKind.ACTION, [math.inf] * 3, 3)
        full = ThresholdVector(CriterionKind.ACTION, [0.0, 0.0, math.inf], 3)
        pairs = (
            (EarlyExitPolicy.from_thresholds(net, first), EarlyExitPolicy.static(net, 1)),
            (EarlyExitPolicy.from_thresholds(net, full), EarlyExitPolicy.static(net, 3)),
        )
        for k in range(50):
            rng = stream(30, "degenerate", k)
            world = sample_world("ABCD"[k % 4], rng, env)
            scene = (world, sample_instruction(world, rng, env))
            for adaptive, static in pairs:
                a = self._rollout(adaptive, scene, t_max=env.t_max)
                b = self._rollout(static, scene, t_max=env.t_max)
                assert a.exits == b.exits
                assert a.success == b.success
                for x, y in zip(a.steps, b.steps):
                    assert np.array_equal(x.action.pose, y.action.pose)
                    assert x.action.gripper == y.action.gripper

    def test_auxiliary_heads_unused_at_inference(self, net, scene):
        thresholds = ThresholdVector(CriterionKind.ACTION, [0.1, 0.1, math.inf], 3)
        self._rollout(EarlyExitPolicy.from_thresholds(net, thresholds), scene)
        assert net.aux_calls == 0

    def test_feature_policy_with_infinite_thresholds_exits_first(self, net, scene):
        thresholds = ThresholdVector(CriterionKind.FEATURE, [math.inf] * 3, 3)
        log = self._rollout(EarlyExitPolicy.from_thresholds(net, thresholds), scene, t_max=3)
        assert log.exits == [1] * len(log)

    def test_time_policy_follows_schedule(self, net, scene):
        thresholds = ThresholdVector(CriterionKind.TIME, [math.inf] * 3, 2, schedule=[1, 2, 3])
        log = self._rollout(EarlyExitPolicy.from_thresholds(net, thresholds), scene, t_max=4)
        assert log.exits[:4] == [1, 2, 2, 2][:len(log)]

    def test_static_needs_exit(self, net):
        with pytest.raises(ValueError):
            EarlyExitPolicy(net, CriterionKind.STATIC, 2)

    def test_spawn_has_own_state(self, net, scene):
        policy = EarlyExitPolicy.static(net, 2)
        self._rollout(policy, scene, t_max=2)
        child = policy.spawn(1)
        assert child.state is None
        assert child.net is policy.net

    def test_static_decision_depth(self, net, cache_factory):
        decision = decide_static(net, cache_factory(), net.zero_state(), 2)
        assert decision.exit == 2
        assert decision.flops_backbone == 2 * group_flops(net.config)


class TestCollectDeltas:
    """Calibration deltas over demonstrations."""

    def test_shape_and_sign(self, net):
        episodes, _ = generate_dataset(2, ["A"], 0, EnvConfig())
        deltas = collect_deltas(net, episodes, 3)
        assert deltas.shape == (sum(len(e) for e in episodes), 3)
        assert (deltas >= 0).all()

    def test_feature_deltas_bounded(self, net):
        episodes, _ = generate_dataset(1, ["B"], 0, EnvConfig())
        deltas = collect_deltas(net, episodes, 2, CriterionKind.FEATURE)
        assert deltas.shape[1] == 2
        assert (deltas >= -1e-12).all() and (deltas <= 2.0 + 1e-12).all()

    def test_max_samples_stops_after_episode(self, net):
        episodes, _ = generate_dataset(3, ["A"], 0, EnvConfig())
        deltas = collect_deltas(net, episodes, 2, max_samples=1)
        assert deltas.shape[0] == len(episodes[0])
        assert net.aux_calls == 0
