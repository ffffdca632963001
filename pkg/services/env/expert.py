"""
Scripted expert: a proportional controller with a coarse/fine speed profile.

Far from its sub-goal the expert moves at the full step size; within the fine
radius it slows to at most a quarter step. This makes most steps of a
demonstration "easy" approach motion and a few of them precise docking.
"""

import logging
from typing import Optional

import numpy as np

from config import EnvConfig
from models import Action7, Direction, Instruction, TaskTemplate, WorldState
from services.env.tasks import PUSH_STAGING

logger = logging.getLogger(__name__)

ARRIVE_TOL = 1e-3
ALIGN_TOL = 0.01


class ExpertError(Exception):
    """The instruction cannot be solved from the given state."""
    pass


def move_toward(position: np.ndarray, target: np.ndarray, env: EnvConfig) -> np.ndarray:
    delta = target - position
    dist = float(np.linalg.norm(delta))
    if dist == 0.0:
        return np.zeros(2)
    if dist > env.fine_radius:
        step = env.delta_max
    else:
        step = min(dist, env.delta_max / 4.0)
    return delta / dist * min(step, dist)


def _action(move: np.ndarray, closed: bool) -> Action7:
    pose = np.zeros(6)
    pose[:2] = move
    return Action7(pose=pose, gripper=1 if closed else 0)


def place_target(world: WorldState, zone_id: int, margin: float = 0.03) -> np.ndarray:
    """Free spot inside the zone: the grid point farthest from other blocks."""
    zone = world.zone_by_id(zone_id)
    xs = np.linspace(zone.x0 + margin, zone.x1 - margin, 5)
    ys = np.linspace(zone.y0 + margin, zone.y1 - margin, 5)
    others = [o.pos for o in world.objects if not o.held]
    best, best_score = None, -1.0
    for y in ys:
        for x in xs:
            point = np.array([x, y])
            score = min((float(np.linalg.norm(point - p)) for p in others), default=1.0)
            if score > best_score + 1e-12:
                best, best_score = point, score
    return best


def _target_index(world: WorldState, instruction: Instruction) -> int:
    index = world.object_by_color(instruction.args[0])
    if index is None:
        raise ExpertError(f"no block of color {instruction.args[0]} in the scene")
    return index


def expert_action(world: WorldState, instruction: Instruction, env: Optional[EnvConfig] = None) -> Action7:
    """Next demonstration action for ``instruction`` in ``world``."""
    env = env or EnvConfig()
    template = instruction.template
    grip = world.gripper_pos
    held = world.held_index

    if template == TaskTemplate.RELEASE:
        if held is None and not world.gripper_closed:
            raise ExpertError("release requested but the gripper is already open and empty")
        return _action(np.zeros(2), closed=False)

    if template == TaskTemplate.PLACE:
        if held is None:
            raise ExpertError("place requested but nothing is held")
        if world.zone_by_id(instruction.args[0]) is None:
            raise ExpertError(f"unknown zone {instruction.args[0]}")
        target = place_target(world, instruction.args[0])
        if float(np.linalg.norm(target - grip)) <= ARRIVE_TOL:
            return _action(np.zeros(2), closed=False)
        return _action(move_toward(grip, target, env), closed=True)

    index = _target_index(world, instruction)
    obj = world.objects[index]

    if template == TaskTemplate.REACH:
        if held is not None:
            raise ExpertError("reach requested while holding a block")
        if world.gripper_closed:
            return _action(np.zeros(2), closed=False)
        return _action(move_toward(grip, obj.pos, env), closed=False)

    if template == TaskTemplate.GRASP:
        if held is not None:
            raise ExpertError("grasp requested while holding a block")
        if world.gripper_closed:
            return _action(np.zeros(2), closed=False)
        if float(np.linalg.norm(obj.pos - grip)) <= ARRIVE_TOL:
            return _action(np.zeros(2), closed=True)
        return _action(move_toward(grip, obj.pos, env), closed=False)

    if template == TaskTemplate.PUSH:
        if held is not None:
            raise ExpertError("push requested while holding a block")
        direction = Direction(instruction.args[1]).vector
        offset = obj.pos - grip
        along = float(np.dot(offset, direction))
        across = float(np.linalg.norm(offset - along * direction))
        aligned = across <= ALIGN_TOL and 0.0 < along <= PUSH_STAGING + ARRIVE_TOL
        if world.gripper_closed:
            if aligned:
                return _action(direction * (env.delta_max / 2.0), closed=True)
            return _action(np.zeros(2), closed=False)
        stage = obj.pos - direction * PUSH_STAGING
        if np.any(stage < 0.0) or np.any(stage > 1.0):
            raise ExpertError("push staging point lies off the table")
        if float(np.linalg.norm(stage - grip)) <= ARRIVE_TOL:
            return _action(np.zeros(2), closed=True)
        return _action(move_toward(grip, stage, env), closed=False)

    raise ExpertError(f"unsupported template {template}")
