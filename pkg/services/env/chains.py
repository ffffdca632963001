"""
Five-subtask task chains: generation by expert rollout and policy evaluation.
"""

import asyncio
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import EnvConfig
from models import (
    CHAIN_LENGTH,
    Action7,
    ChainResult,
    Episode,
    EpisodeLog,
    EvalMetrics,
    Instruction,
    Step,
    StepTrace,
    TaskChain,
    WorldState,
)
from services.env.expert import ExpertError, expert_action
from services.env.tasks import sample_instruction, sample_world
from services.env.world import TabletopEnv, observe
from utils.rng import stream

logger = logging.getLogger(__name__)

MAX_CHAIN_ATTEMPTS = 50


def expert_rollout(world: WorldState, instruction: Instruction, env: EnvConfig, split: str = "A",
                   position: int = 0) -> Tuple[Episode, WorldState, bool]:
    """Roll the expert until success or T_max; returns the recorded episode."""
    sim = TabletopEnv(env)
    obs = sim.reset(world, instruction)
    steps: List[Step] = []
    try:
        for _ in range(env.t_max):
            action = expert_action(sim.world, instruction, env)
            steps.append(Step(obs=obs, action=action))
            _, done, _ = sim.step(action)
            if done:
                break
            obs = sim.observe()
    except ExpertError as e:
        logger.debug(f"Expert gave up on '{instruction.template.name}': {e}")
    episode = Episode(instruction=instruction, steps=steps, split=split, success=sim.succeeded, chain_position=position)
    return episode, sim.world, sim.succeeded


def generate_chain(split: str, rng: np.random.Generator, env: EnvConfig) -> Tuple[TaskChain, List[Episode], int]:
    """
    Sample a scene and five instructions the expert solves back to back.

    Returns:
        The chain, its five demonstration episodes and the number of rejected
        scenarios before an accepted one.
    """
    rejected = 0
    for _ in range(MAX_CHAIN_ATTEMPTS):
        initial = sample_world(split, rng, env)
        current = initial
        instructions: List[Instruction] = []
        episodes: List[Episode] = []
        for position in range(CHAIN_LENGTH):
            instruction = sample_instruction(current, rng, env)
            if instruction is None:
                break
            episode, current, success = expert_rollout(current, instruction, env, split, position)
            if not success or not episode.steps:
                break
            instructions.append(instruction)
            episodes.append(episode)
        if len(instructions) == CHAIN_LENGTH:
            return TaskChain(world=initial, instructions=instructions, split=split), episodes, rejected
        rejected += 1
    raise ExpertError(f"no solvable chain for split {split} after {MAX_CHAIN_ATTEMPTS} scenarios")


def make_chains(n_chains: int, splits: Sequence[str], seed: int, env: EnvConfig, purpose: str = "eval") -> List[TaskChain]:
    chains = []
    for k in range(n_chains):
        split = splits[k % len(splits)]
        chain, _, _ = generate_chain(split, stream(seed, purpose, "chain", k), env)
        chains.append(chain)
    return chains


class ExpertPolicy:
    """Oracle policy: acts with the scripted expert on the true state."""

    mem_bytes = 0

    def __init__(self, env: Optional[EnvConfig] = None):
        self.env = env or EnvConfig()

    def spawn(self, index: int) -> "ExpertPolicy":
        return ExpertPolicy(self.env)

    def reset(self) -> None:
        pass

    def act(self, world: WorldState, obs: np.ndarray, instruction: Instruction, t: int) -> Tuple[Action7, StepTrace]:
        try:
            action = expert_action(world, instruction, self.env)
        except ExpertError:
            action = Action7.zero(gripper=int(world.gripper_closed))
        return action, StepTrace(t=t, exit=0, flops_backbone=0, flops_head=0, action=action)


class RandomPolicy:
    """Uniform random pose displacement and gripper flag."""

    mem_bytes = 0

    def __init__(self, seed: int, env: Optional[EnvConfig] = None, index: int = 0):
        self.seed = seed
        self.env = env or EnvConfig()
        self.rng = stream(seed, "random-policy", index)

    def spawn(self, index: int) -> "RandomPolicy":
        return RandomPolicy(self.seed, self.env, index)

    def reset(self) -> None:
        pass

    def act(self, world: WorldState, obs: np.ndarray, instruction: Instruction, t: int) -> Tuple[Action7, StepTrace]:
        pose = self.rng.uniform(-self.env.delta_max, self.env.delta_max, size=6)
        action = Action7(pose=pose, gripper=int(self.rng.integers(0, 2)))
        return action, StepTrace(t=t, exit=0, flops_backbone=0, flops_head=0, action=action)


def run_episode(policy, env: TabletopEnv, world: WorldState, instruction: Instruction) -> EpisodeLog:
    """Observe, act and step until success or T_max; the head state is reset first."""
    obs = env.reset(world, instruction)
    policy.reset()
    log = EpisodeLog()
    for t in range(env.env.t_max):
        action, trace = policy.act(env.world, obs, instruction, t)
        _, done, _ = env.step(action)
        log.steps.append(trace)
        if done:
            break
        obs = env.observe()
    log.success = env.succeeded
    return log


def run_chain(policy, chain: TaskChain, index: int, env: EnvConfig) -> ChainResult:
    """Execute subtasks in one persistent world; stop at the first failure."""
    sim = TabletopEnv(env)
    world = chain.world.copy()
    result = ChainResult(chain_index=index, score=0)
    for subtask, instruction in enumerate(chain.instructions):
        log = run_episode(policy, sim, world, instruction)
        log.chain_index = index
        log.subtask = subtask
        result.logs.append(log)
        world = sim.world
        if not log.success:
            break
        result.score += 1
    return result


def summarize(results: List[ChainResult], mem: int = 0, label: str = "") -> EvalMetrics:
    n = len(results)
    scores = np.array([r.score for r in results], dtype=np.float64)
    succ = [float(np.mean(scores >= k)) if n else 0.0 for k in range(1, CHAIN_LENGTH + 1)]
    histogram = {}
    flops, head, ns = [], [], []
    for result in results:
        for log in result.logs:
            for trace in log.steps:
                histogram[trace.exit] = histogram.get(trace.exit, 0) + 1
                flops.append(trace.flops_backbone)
                head.append(trace.flops_head)
                ns.append(trace.ns)
    return EvalMetrics(
        n_chains=n,
        avg_len=float(scores.mean()) if n else 0.0,
        succ=succ,
        exit_histogram=histogram,
        mean_flops=float(np.mean(flops)) if flops else 0.0,
        mean_head_flops=float(np.mean(head)) if head else 0.0,
        peak_flops=int(max(flops)) if flops else 0,
        total_flops=int(sum(flops)),
        mem=int(mem),
        n_steps=len(flops),
        ns_per_action=float(np.mean(ns)) if ns else 0.0,
        label=label,
    )


async def evaluate_chains(policy, chains: List[TaskChain], env: EnvConfig, workers: int = 1,
                          label: str = "") -> Tuple[EvalMetrics, List[ChainResult]]:
    """
    Evaluate ``policy`` on every chain.

    Chains run in worker threads bounded by ``workers``; each chain gets its
    own policy instance from ``policy.spawn(index)`` and results are
    aggregated in chain-index order.
    """
    semaphore = asyncio.Semaphore(max(1, workers))

    async def run_one(index: int, chain: TaskChain) -> ChainResult:
        async with semaphore:
            return await asyncio.to_thread(run_chain, policy.spawn(index), chain, index, env)

    results = await asyncio.gather(*(run_one(i, c) for i, c in enumerate(chains)))
    results = sorted(results, key=lambda r: r.chain_index)
    metrics = summarize(results, mem=getattr(policy, "mem_bytes", 0), label=label)
    logger.info(f"Evaluated {len(chains)} chains{f' ({label})' if label else ''}: avg len {metrics.avg_len:.3f}")
    return metrics, results
