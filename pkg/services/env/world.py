"""
Tabletop mechanics and observation tokens.

Gripper flag 1 means closed. Closing (open -> closed) grasps the nearest block
within the grasp radius; opening releases it. A held block tracks the gripper
exactly. A closed, empty gripper pushes blocks that its motion segment sweeps
within the contact radius.
"""

import logging
from typing import Optional, Tuple

import numpy as np

from config import EnvConfig, MAX_OBJECTS, N_COLORS, N_ZONES
from models import Action7, Instruction, WorldState
from services.env.tasks import TaskTracker

logger = logging.getLogger(__name__)

# token layout: kind one-hot (object, gripper, zone, pad) | geometry (4) | color one-hot | flag | zone one-hot
KIND_OBJECT, KIND_GRIPPER, KIND_ZONE, KIND_PAD = range(4)
GEOM = slice(4, 8)
COLOR = slice(8, 8 + N_COLORS)
FLAG = 8 + N_COLORS
ZONE_ONEHOT = slice(FLAG + 1, FLAG + 1 + N_ZONES)
TOKEN_DIM = FLAG + 1 + N_ZONES
N_TOKENS = MAX_OBJECTS + 1 + N_ZONES


def pad_token() -> np.ndarray:
    token = np.zeros(TOKEN_DIM)
    token[KIND_PAD] = 1.0
    return token


def observe(world: WorldState) -> np.ndarray:
    """Token matrix: object slots (padded), gripper, zone slots (padded)."""
    tokens = np.tile(pad_token(), (N_TOKENS, 1))
    for i, obj in enumerate(world.objects[:MAX_OBJECTS]):
        row = np.zeros(TOKEN_DIM)
        row[KIND_OBJECT] = 1.0
        row[GEOM] = [obj.pos[0], obj.pos[1], 0.0, 0.0]
        row[COLOR][obj.color_id] = 1.0
        row[FLAG] = 1.0 if obj.held else 0.0
        tokens[i] = row

    grip = np.zeros(TOKEN_DIM)
    grip[KIND_GRIPPER] = 1.0
    grip[GEOM] = [world.gripper_pos[0], world.gripper_pos[1], 0.0, 0.0]
    grip[FLAG] = 1.0 if world.gripper_closed else 0.0
    tokens[MAX_OBJECTS] = grip

    for j, zone in enumerate(world.zones[:N_ZONES]):
        row = np.zeros(TOKEN_DIM)
        row[KIND_ZONE] = 1.0
        row[GEOM] = [zone.x0, zone.y0, zone.x1, zone.y1]
        row[ZONE_ONEHOT][zone.zone_id] = 1.0
        tokens[MAX_OBJECTS + 1 + j] = row
    return tokens


def _segment_distance(point: np.ndarray, start: np.ndarray, end: np.ndarray) -> float:
    seg = end - start
    denom = float(np.dot(seg, seg))
    if denom == 0.0:
        return float(np.linalg.norm(point - start))
    s = np.clip(np.dot(point - start, seg) / denom, 0.0, 1.0)
    return float(np.linalg.norm(point - (start + s * seg)))


def apply_action(world: WorldState, action: Action7, env: EnvConfig) -> WorldState:
    """Deterministic successor state; the input state is not modified."""
    action = action.clipped(env.delta_max)
    nxt = world.copy()
    close = bool(action.gripper)

    if close and not world.gripper_closed:
        best, best_dist = None, env.grasp_radius
        for i, obj in enumerate(nxt.objects):
            dist = float(np.linalg.norm(obj.pos - nxt.gripper_pos))
            if dist <= best_dist and (best is None or dist < best_dist):
                best, best_dist = i, dist
        if best is not None:
            nxt.objects[best].held = True
            nxt.objects[best].pos = nxt.gripper_pos.copy()
    elif not close and world.gripper_closed:
        for obj in nxt.objects:
            obj.held = False
    nxt.gripper_closed = close

    start = nxt.gripper_pos.copy()
    end = np.clip(start + action.pose[:2], 0.0, 1.0)
    nxt.gripper_pos = end
    move = end - start
    moved = float(np.linalg.norm(move))

    held = nxt.held_index
    if held is not None:
        nxt.objects[held].pos = end.copy()
    elif close and moved > 0.0:
        unit = move / moved
        for obj in nxt.objects:
            ahead = float(np.dot(obj.pos - start, unit)) > 0.0
            if ahead and _segment_distance(obj.pos, start, end) <= env.contact_radius:
                obj.pos = np.clip(end + unit * env.contact_radius, 0.0, 1.0)
    return nxt


class TabletopEnv:
    """One episode of one instruction in a world."""

    def __init__(self, env: Optional[EnvConfig] = None):
        self.env = env or EnvConfig()
        self.world: Optional[WorldState] = None
        self.instruction: Optional[Instruction] = None
        self.tracker: Optional[TaskTracker] = None
        self.t = 0
        self.succeeded = False

    def reset(self, world: WorldState, instruction: Instruction) -> np.ndarray:
        self.world = world.copy()
        self.instruction = instruction
        self.tracker = TaskTracker(instruction, self.world, self.env)
        self.t = 0
        self.succeeded = False
        return observe(self.world)

    def observe(self) -> np.ndarray:
        return observe(self.world)

    def step(self, action: Action7) -> Tuple[WorldState, bool, bool]:
        """Apply ``action``; returns (next state, done, success)."""
        self.world = apply_action(self.world, action, self.env)
        self.tracker.update(self.world)
        self.t += 1
        self.succeeded = self.tracker.success(self.world)
        done = self.succeeded or self.t >= self.env.t_max
        return self.world, done, self.succeeded
