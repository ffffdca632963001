"""
Data models for the DeeR desk-scale toolkit.
Defines the core entities shared across services: world state, instructions,
actions, episodes, thresholds, cost models and evaluation records.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, List, Optional

import numpy as np

POSE_DIMS = 6
MOVE_DIMS = 2  # pose dims 0-1 move the gripper; 2-5 are reserved
CHAIN_LENGTH = 5


class TaskTemplate(IntEnum):
    """Instruction templates understood by the simulator."""
    REACH = 0
    GRASP = 1
    PLACE = 2
    RELEASE = 3
    PUSH = 4


class Direction(IntEnum):
    LEFT = 0
    RIGHT = 1
    UP = 2
    DOWN = 3

    @property
    def vector(self) -> np.ndarray:
        return {
            Direction.LEFT: np.array([-1.0, 0.0]),
            Direction.RIGHT: np.array([1.0, 0.0]),
            Direction.UP: np.array([0.0, 1.0]),
            Direction.DOWN: np.array([0.0, -1.0]),
        }[self]


class CriterionKind(Enum):
    """Exit criteria available at inference time."""
    ACTION = "action"  # action consistency
    FEATURE = "feature"  # cosine similarity of pooled features
    TIME = "time"  # time-progressive schedule
    STATIC = "static"  # fixed exit

    @property
    def uses_thresholds(self) -> bool:
        return self in (CriterionKind.ACTION, CriterionKind.FEATURE)


@dataclass
class Zone:
    """Axis-aligned target rectangle on the table."""
    zone_id: int
    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, pos) -> bool:
        return self.x0 <= pos[0] <= self.x1 and self.y0 <= pos[1] <= self.y1

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0])

    def to_dict(self) -> Dict:
        return {"zone_id": self.zone_id, "rect": [self.x0, self.y0, self.x1, self.y1]}

    @classmethod
    def from_dict(cls, data: Dict) -> "Zone":
        x0, y0, x1, y1 = data["rect"]
        return cls(zone_id=data["zone_id"], x0=x0, y0=y0, x1=x1, y1=y1)


@dataclass
class ObjectState:
    """A colored block on the table."""
    pos: np.ndarray
    color_id: int
    held: bool = False

    def copy(self) -> "ObjectState":
        return ObjectState(pos=self.pos.copy(), color_id=self.color_id, held=self.held)

    def to_dict(self) -> Dict:
        return {"pos": [float(v) for v in self.pos], "color_id": self.color_id, "held": self.held}

    @classmethod
    def from_dict(cls, data: Dict) -> "ObjectState":
        return cls(pos=np.array(data["pos"], dtype=np.float64), color_id=data["color_id"], held=data.get("held", False))


@dataclass
class WorldState:
    """Full simulator state; positions live in the unit square."""
    gripper_pos: np.ndarray
    gripper_closed: bool
    objects: List[ObjectState]
    zones: List[Zone]

    def copy(self) -> "WorldState":
        return WorldState(
            gripper_pos=self.gripper_pos.copy(),
            gripper_closed=self.gripper_closed,
            objects=[o.copy() for o in self.objects],
            zones=list(self.zones),
        )

    @property
    def held_index(self) -> Optional[int]:
        for i, obj in enumerate(self.objects):
            if obj.held:
                return i
        return None

    def object_by_color(self, color_id: int) -> Optional[int]:
        for i, obj in enumerate(self.objects):
            if obj.color_id == color_id:
                return i
        return None

    def zone_by_id(self, zone_id: int) -> Optional[Zone]:
        for zone in self.zones:
            if zone.zone_id == zone_id:
                return zone
        return None

    def to_dict(self) -> Dict:
        return {
            "gripper_pos": [float(v) for v in self.gripper_pos],
            "gripper_closed": self.gripper_closed,
            "objects": [o.to_dict() for o in self.objects],
            "zones": [z.to_dict() for z in self.zones],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "WorldState":
        return cls(
            gripper_pos=np.array(data["gripper_pos"], dtype=np.float64),
            gripper_closed=data["gripper_closed"],
            objects=[ObjectState.from_dict(o) for o in data["objects"]],
            zones=[Zone.from_dict(z) for z in data["zones"]],
        )


@dataclass
class Instruction:
    """Language instruction: template, argument ids and padded token ids."""
    template: TaskTemplate
    args: List[int]
    tokens: List[int]

    def __post_init__(self):
        if isinstance(self.template, int) and not isinstance(self.template, TaskTemplate):
            self.template = TaskTemplate(self.template)

    def to_dict(self) -> Dict:
        return {"template": int(self.template), "args": list(self.args), "tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, data: Dict) -> "Instruction":
        return cls(template=TaskTemplate(data["template"]), args=list(data["args"]), tokens=list(data["tokens"]))


@dataclass
class Action7:
    """Six pose values plus a binary gripper flag (1 = close)."""
    pose: np.ndarray
    gripper: int

    @classmethod
    def zero(cls, gripper: int = 0) -> "Action7":
        return cls(pose=np.zeros(POSE_DIMS), gripper=gripper)

    def clipped(self, delta_max: float) -> "Action7":
        pose = np.array(self.pose, dtype=np.float64, copy=True)
        pose[:MOVE_DIMS] = np.clip(pose[:MOVE_DIMS], -delta_max, delta_max)
        return Action7(pose=pose, gripper=int(bool(self.gripper)))

    def to_dict(self) -> Dict:
        return {"pose": [float(v) for v in self.pose], "grip": int(self.gripper)}

    @classmethod
    def from_dict(cls, data: Dict) -> "Action7":
        return cls(pose=np.array(data["pose"], dtype=np.float64), gripper=int(data["grip"]))


@dataclass
class Step:
    obs: np.ndarray  # L_obs x d_raw
    action: Action7


@dataclass
class Episode:
    """One demonstrated subtask."""
    instruction: Instruction
    steps: List[Step]
    split: str
    success: bool = True
    chain_position: int = 0

    def __len__(self) -> int:
        return len(self.steps)

    def to_dict(self, decimals: int = 6) -> Dict:
        return {
            "instr": self.instruction.to_dict(),
            "steps": [
                {
                    "obs": np.round(s.obs, decimals).tolist(),
                    "pose": [round(float(v), decimals) for v in s.action.pose],
                    "grip": int(s.action.gripper),
                }
                for s in self.steps
            ],
            "split": self.split,
            "success": self.success,
            "chain_position": self.chain_position,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Episode":
        steps = [
            Step(
                obs=np.array(s["obs"], dtype=np.float64),
                action=Action7(pose=np.array(s["pose"], dtype=np.float64), gripper=int(s["grip"])),
            )
            for s in data["steps"]
        ]
        return cls(
            instruction=Instruction.from_dict(data["instr"]),
            steps=steps,
            split=data["split"],
            success=data.get("success", True),
            chain_position=data.get("chain_position", 0),
        )


@dataclass
class TaskChain:
    """Five instructions executed back to back in one persistent world."""
    world: WorldState
    instructions: List[Instruction]
    split: str

    def __post_init__(self):
        if len(self.instructions) != CHAIN_LENGTH:
            raise ValueError(f"a task chain needs exactly {CHAIN_LENGTH} instructions, got {len(self.instructions)}")


@dataclass
class DatasetManifest:
    n_episodes: int
    mean_len: float
    seed: int
    splits: List[str]
    rejected: int = 0
    config: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "n_episodes": self.n_episodes,
            "mean_len": self.mean_len,
            "seed": self.seed,
            "splits": self.splits,
            "rejected": self.rejected,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "DatasetManifest":
        return cls(
            n_episodes=data["n_episodes"],
            mean_len=data["mean_len"],
            seed=data["seed"],
            splits=list(data["splits"]),
            rejected=data.get("rejected", 0),
            config=data.get("config", {}),
        )


def _encode_eta(value: float) -> Optional[float]:
    return None if math.isinf(value) else float(value)


def _decode_eta(value: Optional[float]) -> float:
    return math.inf if value is None else float(value)


@dataclass
class ThresholdVector:
    """Calibrated exit policy. The threshold at the cap and beyond is +inf."""
    criterion: CriterionKind
    eta: List[float]
    n_cap: int
    cost_model_hash: str = ""
    schedule: Optional[List[int]] = None

    def __post_init__(self):
        if isinstance(self.criterion, str):
            self.criterion = CriterionKind(self.criterion)

    def effective(self, i: int) -> float:
        """Threshold for 1-based exit ``i`` with the cap treated as +inf."""
        if i >= self.n_cap or i > len(self.eta):
            return math.inf
        return self.eta[i - 1]

    def to_dict(self) -> Dict:
        data = {
            "criterion": self.criterion.value,
            "eta": [_encode_eta(v) for v in self.eta],
            "n_cap": self.n_cap,
            "cost_model_hash": self.cost_model_hash,
        }
        if self.schedule is not None:
            data["schedule"] = list(self.schedule)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ThresholdVector":
        return cls(
            criterion=CriterionKind(data["criterion"]),
            eta=[_decode_eta(v) for v in data["eta"]],
            n_cap=data["n_cap"],
            cost_model_hash=data.get("cost_model_hash", ""),
            schedule=data.get("schedule"),
        )


@dataclass
class CostModel:
    """
    Cumulative per-exit backbone FLOPs and resident memory (bytes).

    ``head_flops`` is the cost of one action-head evaluation, reported
    separately from backbone FLOPs.
    """
    flops: List[int]
    mem: List[int]
    head_flops: int = 0
    source: str = "analytic"

    @property
    def n_exits(self) -> int:
        return len(self.flops)

    def c(self, i: int) -> int:
        return self.flops[i - 1]

    def m(self, i: int) -> int:
        return self.mem[i - 1]

    def gflops(self) -> List[float]:
        return [f / 1e9 for f in self.flops]

    def mem_gb(self) -> List[float]:
        return [m / 1e9 for m in self.mem]

    def hash(self) -> str:
        canonical = json.dumps({"flops": list(self.flops), "mem": list(self.mem)}, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_dict(self) -> Dict:
        return {"flops": list(self.flops), "mem": list(self.mem), "head_flops": self.head_flops, "source": self.source}

    @classmethod
    def from_dict(cls, data: Dict) -> "CostModel":
        return cls(flops=list(data["flops"]), mem=list(data["mem"]), head_flops=data.get("head_flops", 0), source=data.get("source", "analytic"))


@dataclass
class BudgetSpec:
    """Average (total), peak per-step and memory constraints for a task suite."""
    total_flops: float
    peak_flops: float
    mem_bytes: float
    n_tasks: int
    mean_len: float

    @property
    def per_step(self) -> float:
        return self.total_flops / (self.n_tasks * self.mean_len)

    @classmethod
    def from_per_step(cls, per_step: float, peak_flops: float, mem_bytes: float, n_tasks: int, mean_len: float) -> "BudgetSpec":
        return cls(per_step * n_tasks * mean_len, peak_flops, mem_bytes, n_tasks, mean_len)

    def to_dict(self) -> Dict:
        return {
            "total_flops": self.total_flops,
            "peak_flops": None if math.isinf(self.peak_flops) else self.peak_flops,
            "mem_bytes": None if math.isinf(self.mem_bytes) else self.mem_bytes,
            "n_tasks": self.n_tasks,
            "mean_len": self.mean_len,
            "per_step": self.per_step,
        }


@dataclass
class ExitAllocation:
    """Geometric exit proportions q_i = z * q^(i-1) over exits 1..n."""
    q: float
    proportions: List[float]
    z: float
    n_cap: int
    expected_cost: float = 0.0

    def to_dict(self) -> Dict:
        return {
            "q": self.q,
            "proportions": list(self.proportions),
            "z": self.z,
            "n_cap": self.n_cap,
            "expected_cost": self.expected_cost,
        }


@dataclass
class StepTrace:
    """What one inference step spent and decided."""
    t: int
    exit: int
    flops_backbone: int
    flops_head: int
    deltas: List[float] = field(default_factory=list)
    action: Optional[Action7] = None
    gripper_prob: float = 0.5
    ns: int = 0

    def to_dict(self) -> Dict:
        return {
            "t": self.t,
            "exit": self.exit,
            "flops_backbone": self.flops_backbone,
            "flops_head": self.flops_head,
            "delta": [float(d) for d in self.deltas],
            "action": {**self.action.to_dict(), "grip_prob": float(self.gripper_prob)} if self.action else {},
            "ns": self.ns,
        }


@dataclass
class EpisodeLog:
    """Per-step traces of one evaluated subtask."""
    steps: List[StepTrace] = field(default_factory=list)
    success: bool = False
    chain_index: int = -1
    subtask: int = 0

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def exits(self) -> List[int]:
        return [s.exit for s in self.steps]


@dataclass
class ChainResult:
    chain_index: int
    score: int
    logs: List[EpisodeLog] = field(default_factory=list)


@dataclass
class EvalMetrics:
    """Aggregate chain-evaluation results."""
    n_chains: int
    avg_len: float
    succ: List[float]
    exit_histogram: Dict[int, int]
    mean_flops: float
    mean_head_flops: float
    peak_flops: int
    total_flops: int
    mem: int
    n_steps: int
    ns_per_action: float
    label: str = ""

    def to_dict(self) -> Dict:
        return {
            "label": self.label,
            "n_chains": self.n_chains,
            "avg_successful_len": self.avg_len,
            **{f"succ_{i + 1}": v for i, v in enumerate(self.succ)},
            "exit_histogram": {str(k): v for k, v in sorted(self.exit_histogram.items())},
            "avg_flops": self.mean_flops,
            "avg_head_flops": self.mean_head_flops,
            "peak_flops": self.peak_flops,
            "total_flops": self.total_flops,
            "mem": self.mem,
            "n_steps": self.n_steps,
            "ns_per_action": self.ns_per_action,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalMetrics":
        return cls(
            n_chains=data["n_chains"],
            avg_len=data["avg_successful_len"],
            succ=[data[f"succ_{i + 1}"] for i in range(CHAIN_LENGTH)],
            exit_histogram={int(k): v for k, v in data["exit_histogram"].items()},
            mean_flops=data["avg_flops"],
            mean_head_flops=data.get("avg_head_flops", 0.0),
            peak_flops=data["peak_flops"],
            total_flops=data["total_flops"],
            mem=data["mem"],
            n_steps=data["n_steps"],
            ns_per_action=data.get("ns_per_action", 0.0),
            label=data.get("label", ""),
        )


@dataclass
class ConstraintReport:
    total_flops: int
    peak_flops: int
    mem: int
    avg_flops: float
    avg_ok: bool
    peak_ok: bool
    mem_ok: bool
    head_flops: int = 0

    @property
    def passed(self) -> bool:
        return self.avg_ok and self.peak_ok and self.mem_ok

    def to_dict(self) -> Dict:
        return {
            "total_flops": self.total_flops,
            "peak_flops": self.peak_flops,
            "mem": self.mem,
            "avg_flops": self.avg_flops,
            "avg_ok": self.avg_ok,
            "peak_ok": self.peak_ok,
            "mem_ok": self.mem_ok,
            "head_flops": self.head_flops,
            "passed": self.passed,
        }
