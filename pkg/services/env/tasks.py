"""
Instruction vocabulary, split layouts, scenario sampling and success predicates.
"""

import logging
from typing import Dict, List, Optional

import numpy as np

from config import EnvConfig, L_INST, N_COLORS, N_ZONES
from models import Direction, Instruction, ObjectState, TaskTemplate, WorldState, Zone

logger = logging.getLogger(__name__)

COLOR_NAMES = ["red", "green", "blue", "yellow", "purple", "orange"]
ZONE_NAMES = ["a", "b", "c", "d"]
DIRECTION_NAMES = ["left", "right", "up", "down"]
VERBS = ["reach", "grasp", "place", "release", "push"]

VOCAB: List[str] = (
    ["<pad>"]
    + VERBS
    + ["the", "block", "in", "zone", "gripper"]
    + COLOR_NAMES
    + [f"zone_{z}" for z in ZONE_NAMES]
    + DIRECTION_NAMES
)
WORD_ID: Dict[str, int] = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = WORD_ID["<pad>"]

# Each split owns a zone layout (x0, y0, x1, y1 per zone) and a color subset.
SPLIT_LAYOUTS: Dict[str, List[tuple]] = {
    "A": [(0.02, 0.02, 0.24, 0.24), (0.76, 0.02, 0.98, 0.24), (0.02, 0.76, 0.24, 0.98), (0.76, 0.76, 0.98, 0.98)],
    "B": [(0.10, 0.78, 0.32, 0.98), (0.68, 0.78, 0.90, 0.98), (0.10, 0.02, 0.32, 0.22), (0.68, 0.02, 0.90, 0.22)],
    "C": [(0.02, 0.10, 0.22, 0.32), (0.02, 0.68, 0.22, 0.90), (0.78, 0.10, 0.98, 0.32), (0.78, 0.68, 0.98, 0.90)],
    "D": [(0.39, 0.02, 0.61, 0.22), (0.39, 0.78, 0.61, 0.98), (0.02, 0.39, 0.22, 0.61), (0.78, 0.39, 0.98, 0.61)],
}
SPLIT_COLORS: Dict[str, List[int]] = {
    "A": [0, 1, 2, 3],
    "B": [1, 2, 3, 4],
    "C": [2, 3, 4, 5],
    "D": [0, 2, 4, 5],
}

MIN_SEPARATION = 0.12
PUSH_STAGING = 0.1
MIN_REACH_DISTANCE = 0.35

assert len(ZONE_NAMES) == N_ZONES and len(COLOR_NAMES) == N_COLORS


def tokenize(words: List[str]) -> List[int]:
    """Map words to ids and pad to the fixed instruction length."""
    ids = [WORD_ID[w] for w in words]
    if len(ids) > L_INST:
        raise ValueError(f"instruction '{' '.join(words)}' longer than {L_INST} tokens")
    return ids + [PAD_ID] * (L_INST - len(ids))


def make_instruction(template: TaskTemplate, args: List[int]) -> Instruction:
    template = TaskTemplate(template)
    if template == TaskTemplate.REACH:
        words = ["reach", "the", COLOR_NAMES[args[0]], "block"]
    elif template == TaskTemplate.GRASP:
        words = ["grasp", "the", COLOR_NAMES[args[0]], "block"]
    elif template == TaskTemplate.PLACE:
        words = ["place", "the", "block", "in", "zone", f"zone_{ZONE_NAMES[args[0]]}"]
    elif template == TaskTemplate.RELEASE:
        words = ["release", "the", "gripper"]
    else:
        words = ["push", "the", COLOR_NAMES[args[0]], "block", DIRECTION_NAMES[args[1]]]
    return Instruction(template=template, args=list(args), tokens=tokenize(words))


def describe(instruction: Instruction) -> str:
    return " ".join(VOCAB[i] for i in instruction.tokens if i != PAD_ID)


def make_zones(split: str) -> List[Zone]:
    return [Zone(zone_id=i, x0=r[0], y0=r[1], x1=r[2], y1=r[3]) for i, r in enumerate(SPLIT_LAYOUTS[split])]


def sample_world(split: str, rng: np.random.Generator, env: EnvConfig) -> WorldState:
    """Random initial scene: K blocks of distinct split colors, open gripper."""
    k = int(rng.integers(env.min_objects, env.max_objects + 1))
    colors = rng.choice(SPLIT_COLORS[split], size=k, replace=False)
    positions: List[np.ndarray] = []
    while len(positions) < k:
        candidate = rng.uniform(0.15, 0.85, size=2)
        if all(np.linalg.norm(candidate - p) >= MIN_SEPARATION for p in positions):
            positions.append(candidate)
    objects = [ObjectState(pos=p, color_id=int(c)) for p, c in zip(positions, colors)]
    gripper = rng.uniform(0.1, 0.9, size=2)
    return WorldState(gripper_pos=gripper, gripper_closed=False, objects=objects, zones=make_zones(split))


def push_directions(world: WorldState, obj_index: int, env: EnvConfig) -> List[Direction]:
    """Directions in which the block can be staged and pushed without leaving the table."""
    pos = world.objects[obj_index].pos
    valid = []
    for direction in Direction:
        vec = direction.vector
        end = pos + vec * (env.push_distance + 0.05)
        stage = pos - vec * PUSH_STAGING
        if np.all(end >= 0.03) and np.all(end <= 0.97) and np.all(stage >= 0.0) and np.all(stage <= 1.0):
            valid.append(direction)
    return valid


def sample_instruction(world: WorldState, rng: np.random.Generator, env: EnvConfig) -> Optional[Instruction]:
    """Pick an instruction that is sensible in ``world``; None if none is."""
    held = world.held_index
    if held is not None:
        if rng.random() < 0.75:
            return make_instruction(TaskTemplate.PLACE, [int(rng.integers(len(world.zones)))])
        return make_instruction(TaskTemplate.RELEASE, [])

    options = []
    for i, obj in enumerate(world.objects):
        if np.linalg.norm(obj.pos - world.gripper_pos) >= MIN_REACH_DISTANCE:
            options.append((TaskTemplate.REACH, [obj.color_id]))
        options.append((TaskTemplate.GRASP, [obj.color_id]))
        for direction in push_directions(world, i, env):
            options.append((TaskTemplate.PUSH, [obj.color_id, int(direction)]))
    if not options:
        return None
    weights = np.array([{TaskTemplate.REACH: 1.0, TaskTemplate.GRASP: 2.0, TaskTemplate.PUSH: 0.5}[t] for t, _ in options])
    choice = int(rng.choice(len(options), p=weights / weights.sum()))
    template, args = options[choice]
    return make_instruction(template, args)


class TaskTracker:
    """Evaluates the success predicate of one instruction over an episode."""

    def __init__(self, instruction: Instruction, world: WorldState, env: EnvConfig):
        self.instruction = instruction
        self.env = env
        self.target = None
        self.start_pos = None
        if instruction.template in (TaskTemplate.REACH, TaskTemplate.GRASP, TaskTemplate.PUSH):
            self.target = world.object_by_color(instruction.args[0])
            if self.target is not None:
                self.start_pos = world.objects[self.target].pos.copy()
        self.carried = world.held_index

    def update(self, world: WorldState) -> None:
        if self.carried is None:
            self.carried = world.held_index

    def success(self, world: WorldState) -> bool:
        template = self.instruction.template
        if template == TaskTemplate.RELEASE:
            return not world.gripper_closed and world.held_index is None
        if template == TaskTemplate.PLACE:
            if self.carried is None:
                return False
            obj = world.objects[self.carried]
            zone = world.zone_by_id(self.instruction.args[0])
            return (not obj.held) and zone is not None and zone.contains(obj.pos)
        if self.target is None:
            return False
        obj = world.objects[self.target]
        if template == TaskTemplate.REACH:
            return float(np.linalg.norm(world.gripper_pos - obj.pos)) <= self.env.grasp_radius
        if template == TaskTemplate.GRASP:
            return obj.held
        direction = Direction(self.instruction.args[1])
        return float(np.dot(obj.pos - self.start_pos, direction.vector)) >= self.env.push_distance - 1e-9
