"""
Tests for the tabletop simulator, scripted expert, task chains and dataset.
"""

import numpy as np
import pytest

import storage
from config import EnvConfig, L_INST
from models import CHAIN_LENGTH, Action7, Episode, ObjectState, TaskTemplate, WorldState
from services.env import dataset
from services.env.chains import (
    ExpertPolicy, RandomPolicy, evaluate_chains, expert_rollout, generate_chain, make_chains, run_episode,
)
from services.env.expert import expert_action, move_toward
from services.env.tasks import VOCAB, describe, make_instruction, make_zones, sample_world
from services.env.world import KIND_PAD, N_TOKENS, TOKEN_DIM, TabletopEnv, apply_action, observe
from utils.rng import stream


def _world(objects, gripper=(0.5, 0.5), closed=False, split="A"):
    return WorldState(
        gripper_pos=np.array(gripper, dtype=float),
        gripper_closed=closed,
        objects=[ObjectState(pos=np.array(p, dtype=float), color_id=c) for p, c in objects],
        zones=make_zones(split),
    )


def _move(dx, dy, grip):
    pose = np.zeros(6)
    pose[:2] = [dx, dy]
    return Action7(pose=pose, gripper=grip)


class TestMechanics:
    """World transitions."""

    def test_grasp_snaps_block_to_gripper(self):
        world = _world([((0.52, 0.5), 0)])
        nxt = apply_action(world, _move(0.0, 0.0, 1), EnvConfig())
        assert nxt.objects[0].held
        assert np.allclose(nxt.objects[0].pos, nxt.gripper_pos)
        assert not world.objects[0].held

    def test_grasp_needs_open_to_closed_transition(self):
        world = _world([((0.52, 0.5), 0)], closed=True)
        nxt = apply_action(world, _move(0.0, 0.0, 1), EnvConfig())
        assert not nxt.objects[0].held

    def test_grasp_out_of_radius_misses(self):
        world = _world([((0.6, 0.5), 0)])
        nxt = apply_action(world, _move(0.0, 0.0, 1), EnvConfig())
        assert nxt.held_index is None
        assert nxt.gripper_closed

    def test_held_block_moves_and_release_drops(self):
        world = _world([((0.5, 0.5), 0)])
        env = EnvConfig()
        world = apply_action(world, _move(0.0, 0.0, 1), env)
        world = apply_action(world, _move(0.05, 0.0, 1), env)
        assert np.allclose(world.objects[0].pos, [0.55, 0.5])
        world = apply_action(world, _move(0.0, 0.0, 0), env)
        assert world.held_index is None
        assert not world.gripper_closed

    def test_displacement_clipped_to_delta_max(self):
        world = _world([((0.1, 0.1), 0)])
        nxt = apply_action(world, _move(0.5, 0.0, 0), EnvConfig())
        assert nxt.gripper_pos[0] == pytest.approx(0.18)

    def test_closed_empty_gripper_pushes_block(self):
        env = EnvConfig()
        world = _world([((0.55, 0.5), 0)], gripper=(0.5, 0.5), closed=True)
        nxt = apply_action(world, _move(0.04, 0.0, 1), env)
        assert nxt.objects[0].pos[0] == pytest.approx(0.54 + env.contact_radius)
        assert nxt.objects[0].pos[1] == pytest.approx(0.5)

    def test_open_gripper_does_not_push(self):
        world = _world([((0.55, 0.5), 0)])
        nxt = apply_action(world, _move(0.04, 0.0, 0), EnvConfig())
        assert np.allclose(nxt.objects[0].pos, [0.55, 0.5])


class TestObservation:
    """Token matrix layout."""

    def test_shape_and_padding(self):
        world = _world([((0.3, 0.3), 0), ((0.7, 0.7), 1)])
        obs = observe(world)
        assert obs.shape == (N_TOKENS, TOKEN_DIM)
        assert obs[2, KIND_PAD] == 1.0
        assert obs[3, KIND_PAD] == 1.0

    def test_empty_object_slots_identical(self):
        world = _world([((0.3, 0.3), 0)])
        obs = observe(world)
        assert np.array_equal(obs[1], obs[2])


class TestInstructions:
    """Vocabulary and templates."""

    def test_tokens_padded_to_fixed_length(self):
        inst = make_instruction(TaskTemplate.RELEASE, [])
        assert len(inst.tokens) == L_INST
        assert describe(inst) == "release the gripper"

    def test_push_instruction_words(self):
        inst = make_instruction(TaskTemplate.PUSH, [2, 1])
        assert describe(inst) == "push the blue block right"
        assert all(0 <= t < len(VOCAB) for t in inst.tokens)


class TestExpert:
    """Scripted expert behaviour."""

    def test_move_toward_slows_near_target(self):
        env = EnvConfig()
        far = move_toward(np.zeros(2), np.array([0.5, 0.0]), env)
        near = move_toward(np.zeros(2), np.array([0.1, 0.0]), env)
        assert np.linalg.norm(far) == pytest.approx(env.delta_max)
        assert np.linalg.norm(near) == pytest.approx(env.delta_max / 4)

    @pytest.mark.parametrize("template,args", [
        (TaskTemplate.REACH, [0]),
        (TaskTemplate.GRASP, [0]),
        (TaskTemplate.PUSH, [0, 0]),
    ])
    def test_expert_solves_single_tasks(self, template, args):
        env = EnvConfig()
        world = _world([((0.6, 0.5), 0), ((0.3, 0.8), 1)], gripper=(0.2, 0.2))
        episode, _, success = expert_rollout(world, make_instruction(template, args), env)
        assert success
        assert 0 < len(episode) <= env.t_max

    def test_expert_grasp_then_place(self):
        env = EnvConfig()
        world = _world([((0.5, 0.5), 0)], gripper=(0.4, 0.4))
        _, world, ok = expert_rollout(world, make_instruction(TaskTemplate.GRASP, [0]), env)
        assert ok
        _, world, ok = expert_rollout(world, make_instruction(TaskTemplate.PLACE, [3]), env)
        assert ok
        assert world.zone_by_id(3).contains(world.objects[0].pos)

    def test_expert_action_opens_closed_empty_gripper(self):
        world = _world([((0.6, 0.5), 0)], closed=True)
        action = expert_action(world, make_instruction(TaskTemplate.REACH, [0]))
        assert action.gripper == 0


class TestChains:
    """Task chains and evaluation."""

    def test_generated_chain_is_solvable(self):
        env = EnvConfig()
        chain, episodes, _ = generate_chain("B", stream(5, "chain"), env)
        assert len(chain.instructions) == CHAIN_LENGTH
        assert all(e.success for e in episodes)

    def test_make_chains_deterministic(self):
        env = EnvConfig()
        a = make_chains(3, ["A", "D"], 11, env)
        b = make_chains(3, ["A", "D"], 11, env)
        assert [c.split for c in a] == ["A", "D", "A"]
        for x, y in zip(a, b):
            assert np.array_equal(x.world.gripper_pos, y.world.gripper_pos)
            assert [i.tokens for i in x.instructions] == [i.tokens for i in y.instructions]

    @pytest.mark.asyncio
    async def test_expert_policy_completes_chains(self):
        env = EnvConfig()
        chains = make_chains(3, ["A"], 2, env)
        metrics, results = await evaluate_chains(ExpertPolicy(env), chains, env, workers=2)
        assert metrics.avg_len == pytest.approx(5.0)
        assert [r.chain_index for r in results] == [0, 1, 2]
        assert metrics.succ == [1.0] * CHAIN_LENGTH

    @pytest.mark.asyncio
    async def test_worker_count_does_not_change_results(self):
        env = EnvConfig()
        chains = make_chains(4, ["C"], 9, env)
        one, _ = await evaluate_chains(RandomPolicy(1, env), chains, env, workers=1)
        many, _ = await evaluate_chains(RandomPolicy(1, env), chains, env, workers=3)
        assert one.avg_len == many.avg_len
        assert one.n_steps == many.n_steps

    @pytest.mark.slow
    @pytest.mark.asyncio
    async def test_expert_solves_a_thousand_episodes(self):
        env = EnvConfig()
        chains = make_chains(200, ["A", "B", "C", "D"], 21, env)
        metrics, results = await evaluate_chains(ExpertPolicy(env), chains, env, workers=4)
        logs = [log for r in results for log in r.logs]
        assert len(logs) == 1000
        assert all(log.success and len(log) <= env.t_max for log in logs)
        assert metrics.succ[-1] == 1.0

    @pytest.mark.slow
    @pytest.mark.asyncio
    async def test_random_policy_rarely_succeeds(self):
        env = EnvConfig()
        chains = make_chains(100, ["A", "B", "C", "D"], 22, env)
        metrics, _ = await evaluate_chains(RandomPolicy(3, env), chains, env, workers=4)
        assert metrics.n_chains == 100
        assert metrics.avg_len < 0.2

    def test_episode_stops_at_t_max(self):
        env = EnvConfig(t_max=1)
        chain, _, _ = generate_chain("A", stream(0, "chain"), EnvConfig())
        sim = TabletopEnv(env)
        log = run_episode(RandomPolicy(0, env), sim, chain.world, chain.instructions[0])
        assert len(log) == 1


class TestDataset:
    """Demonstration generation and persistence."""

    def test_generation_is_deterministic(self):
        env = EnvConfig()
        a, manifest = dataset.generate_dataset(12, ["A", "B"], 7, env)
        b, _ = dataset.generate_dataset(12, ["A", "B"], 7, env)
        assert len(a) == 12
        assert manifest.n_episodes == 12
        assert [e.to_dict() for e in a] == [e.to_dict() for e in b]

    def test_every_episode_succeeds_within_t_max(self):
        env = EnvConfig()
        episodes, manifest = dataset.generate_dataset(10, ["D"], 1, env)
        assert all(e.success and len(e) <= env.t_max for e in episodes)
        assert manifest.mean_len == pytest.approx(np.mean([len(e) for e in episodes]))

    @pytest.mark.asyncio
    async def test_write_and_load_round_trip(self, tmp_path):
        episodes, manifest = dataset.generate_dataset(6, ["A", "C"], 3, EnvConfig())
        assert await dataset.write_dataset(tmp_path, episodes, manifest)
        loaded, loaded_manifest = await dataset.load_dataset(tmp_path, ["C"])
        assert loaded_manifest.n_episodes == 6
        assert all(e.split == "C" for e in loaded)
        assert len(loaded) == sum(e.split == "C" for e in episodes)

    @pytest.mark.asyncio
    async def test_same_flags_same_file_hash(self, tmp_path):
        for name in ("one", "two"):
            episodes, manifest = dataset.generate_dataset(5, ["A"], 4, EnvConfig())
            await dataset.write_dataset(tmp_path / name, episodes, manifest)
        assert storage.file_sha256(tmp_path / "one" / dataset.EPISODES_FILE) == \
            storage.file_sha256(tmp_path / "two" / dataset.EPISODES_FILE)

    def test_subsample_and_holdout(self):
        episodes, _ = dataset.generate_dataset(20, ["A"], 2, EnvConfig())
        picked = dataset.subsample(episodes, 0.1, 0)
        assert len(picked) == 2
        assert [id(e) for e in picked] == [id(e) for e in dataset.subsample(episodes, 0.1, 0)]
        train, val = dataset.split_holdout(episodes, 0.25, 0)
        assert len(val) == 5 and len(train) == 15

    def test_episode_dict_schema(self):
        episodes, _ = dataset.generate_dataset(1, ["A"], 0, EnvConfig())
        data = episodes[0].to_dict()
        assert set(data) >= {"instr", "steps", "split"}
        assert Episode.from_dict(data).split == "A"

    def test_sample_world_respects_split_colors(self):
        world = sample_world("D", stream(0, "w"), EnvConfig())
        assert {o.color_id for o in world.objects} <= {0, 2, 4, 5}
