"""
Exit-sampling imitation learning.

Each training window of H frames is scored twice: once with a per-step
uniform exit sequence (s1) and once with a two-segment piecewise-constant
sequence (s2), each strategy running its own head state stream. Optional
auxiliary heads add one loss term per exit and timestep. Phase "joint"
trains everything; phase "posttrain" fine-tunes the main head only.
"""

import asyncio
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import storage
from config import RunConfig, TrainConfig
from models import Episode
from services import csv_service
from services.env.dataset import split_holdout
from services.network import ActionPrediction, MultiExitNet, net_config_from_dict
from utils import tensor as T
from utils.optim import AdamState, adam_step, clip_grad_norm, warmup_factor
from utils.rng import derive_seed, stream
from utils.tensor import Graph, NumericError, Tensor

logger = logging.getLogger(__name__)

PHASES = ("joint", "posttrain")
RESUME_FILE = "resume.json"
FINAL_FILE = "final.json"


# ---------------------------------------------------------------------------
# Exit sampling
# ---------------------------------------------------------------------------

def sample_s1(window: int, n_exits: int, rng: np.random.Generator) -> np.ndarray:
    """H independent uniform exits on {1..N}."""
    return rng.integers(1, n_exits + 1, size=window)


def two_segment(window: int, split: int, first: int, second: int) -> np.ndarray:
    """Steps 0..split take ``first``; split+1..H-1 take ``second``."""
    seq = np.full(window, second, dtype=np.int64)
    seq[: split + 1] = first
    return seq


def sample_s2(window: int, n_exits: int, rng: np.random.Generator) -> np.ndarray:
    """Split point uniform on {0..H-1}; one uniform exit per segment (split H-1 gives one segment)."""
    split = int(rng.integers(0, window))
    first, second = rng.integers(1, n_exits + 1, size=2)
    return two_segment(window, split, int(first), int(second))


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------

@dataclass
class EpisodeArrays:
    inst: np.ndarray  # (L_inst,)
    obs: np.ndarray  # (n, L_obs, d_raw)
    pose: np.ndarray  # (n, 6)
    grip: np.ndarray  # (n,)

    @classmethod
    def from_episode(cls, episode: Episode) -> "EpisodeArrays":
        return cls(
            inst=np.asarray(episode.instruction.tokens, dtype=np.int64),
            obs=np.stack([s.obs for s in episode.steps]).astype(np.float64),
            pose=np.stack([s.action.pose for s in episode.steps]).astype(np.float64),
            grip=np.array([s.action.gripper for s in episode.steps], dtype=np.float64),
        )

    def window(self, start: int, length: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Frames start..start+length-1; short episodes are front-padded with the first frame, masked out."""
        n = len(self.pose)
        if n >= length:
            sl = slice(start, start + length)
            return self.obs[sl], self.pose[sl], self.grip[sl], np.ones(length)
        pad = length - n
        obs = np.concatenate([np.repeat(self.obs[:1], pad, axis=0), self.obs])
        pose = np.concatenate([np.zeros((pad, self.pose.shape[1])), self.pose])
        grip = np.concatenate([np.zeros(pad), self.grip])
        mask = np.concatenate([np.zeros(pad), np.ones(n)])
        return obs, pose, grip, mask


@dataclass
class WindowBatch:
    inst: np.ndarray  # (B, L_inst)
    obs: np.ndarray  # (B, H, L_obs, d_raw)
    pose: np.ndarray  # (B, H, 6)
    grip: np.ndarray  # (B, H, 1)
    mask: np.ndarray  # (B, H)
    exits_s1: np.ndarray  # (B, H)
    exits_s2: np.ndarray  # (B, H)

    @property
    def size(self) -> int:
        return self.inst.shape[0]

    @property
    def window(self) -> int:
        return self.pose.shape[1]

    def permuted(self, order: Sequence[int]) -> "WindowBatch":
        order = np.asarray(order)
        return WindowBatch(*(getattr(self, f)[order] for f in
                             ("inst", "obs", "pose", "grip", "mask", "exits_s1", "exits_s2")))


def sample_batch(data: List[EpisodeArrays], batch_size: int, window: int, n_exits: int,
                 rng: np.random.Generator) -> WindowBatch:
    """Random episode, random start offset, fresh s1/s2 sequences per element."""
    inst, obs, pose, grip, mask, s1, s2 = [], [], [], [], [], [], []
    for _ in range(batch_size):
        ep = data[int(rng.integers(len(data)))]
        n = len(ep.pose)
        start = int(rng.integers(0, n - window + 1)) if n >= window else 0
        o, p, g, m = ep.window(start, window)
        inst.append(ep.inst)
        obs.append(o)
        pose.append(p)
        grip.append(g)
        mask.append(m)
        s1.append(sample_s1(window, n_exits, rng))
        s2.append(sample_s2(window, n_exits, rng))
    return WindowBatch(
        inst=np.stack(inst),
        obs=np.stack(obs),
        pose=np.stack(pose),
        grip=np.stack(grip)[..., None],
        mask=np.stack(mask),
        exits_s1=np.stack(s1),
        exits_s2=np.stack(s2),
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def single_action_loss(pred: ActionPrediction, target_pose, target_grip, lam: float, mask=None) -> Tensor:
    """Per batch row: mean squared pose error + lam * BCE(gripper logit, target flag)."""
    target_pose = np.asarray(target_pose, dtype=pred.pose.dtype)
    target_grip = np.asarray(target_grip, dtype=pred.pose.dtype).reshape(pred.gripper_logit.shape)
    rows = pred.pose.shape[0]
    mse = T.mean(T.square(T.sub(pred.pose, target_pose)), axis=-1)
    bce = T.reshape(T.bce_with_logits(pred.gripper_logit, target_grip), (rows,))
    loss = T.add(mse, T.scale(bce, lam))
    if mask is not None:
        loss = T.mul(loss, np.asarray(mask, dtype=pred.pose.dtype))
    return loss


@dataclass
class BackboneFeatures:
    """Pooled features per exit, shaped (B, H, D); index 0 is the pre-backbone feature."""
    pooled: List[Tensor]

    @property
    def computed(self) -> int:
        return len(self.pooled) - 1


def backbone_features(net: MultiExitNet, batch: WindowBatch, upto: int) -> BackboneFeatures:
    """Run all B*H frames through the backbone once, up to exit ``upto``."""
    b, h = batch.size, batch.window
    inst = np.repeat(batch.inst, h, axis=0)
    obs = batch.obs.reshape((b * h,) + batch.obs.shape[2:])
    cache = net.new_cache(inst, obs)
    net.forward_to_exit(cache, upto)
    d = net.config.d_model
    return BackboneFeatures(pooled=[T.reshape(p, (b, h, d)) for p in cache.pooled])


@dataclass
class LossParts:
    seq: Tensor
    aux: Optional[Tensor]
    n_seq_terms: int = 0
    n_aux_terms: int = 0

    @property
    def total(self) -> Tensor:
        return self.seq if self.aux is None else T.add(self.seq, self.aux)


def _stream_loss(net: MultiExitNet, feats: BackboneFeatures, exits: np.ndarray, batch: WindowBatch,
                 lam: float, rng, dropout: Dict) -> Tuple[Tensor, int]:
    """One strategy's recurrent stream over the window; returns the per-row loss sum."""
    b, h = batch.size, batch.window
    top = int(exits.max())
    if top > feats.computed:
        raise ValueError(f"exit index {top} exceeds computed exits ({feats.computed})")
    stacked = T.concat([T.reshape(feats.pooled[e], (b, h, 1, -1)) for e in range(1, top + 1)], axis=2)
    onehot = (exits[..., None] == np.arange(1, top + 1)).astype(net.dtype)[..., None]  # (B, H, E, 1)
    state = net.zero_state(b)
    acc, terms = None, 0
    for i in range(h):
        per_exit = T.slice_(stacked, (slice(None), i))
        feature = T.sum_(T.mul(per_exit, onehot[:, i]), axis=1)
        pred, state = net.head_forward(feature, state, rng, **dropout)
        term = single_action_loss(pred, batch.pose[:, i], batch.grip[:, i], lam, batch.mask[:, i])
        acc = term if acc is None else T.add(acc, term)
        terms += 1
    return acc, terms


def window_loss(net: MultiExitNet, batch: WindowBatch, lam: float, rng=None,
                feats: Optional[BackboneFeatures] = None, dropout: Optional[Dict] = None) -> Tuple[Tensor, int]:
    """Sum over both strategies and all H steps, averaged over batch rows."""
    for exits in (batch.exits_s1, batch.exits_s2):
        if exits.min() < 1 or exits.max() > net.config.n_exits:
            raise ValueError(f"exit indices must lie in [1, {net.config.n_exits}]")
    if feats is None:
        feats = backbone_features(net, batch, int(max(batch.exits_s1.max(), batch.exits_s2.max())))
    total, terms = None, 0
    for exits in (batch.exits_s1, batch.exits_s2):
        part, n = _stream_loss(net, feats, exits, batch, lam, rng, dropout or {})
        total = part if total is None else T.add(total, part)
        terms += n
    return T.scale(T.sum_(total), 1.0 / batch.size), terms


def aux_loss(net: MultiExitNet, batch: WindowBatch, lam: float, rng=None,
             feats: Optional[BackboneFeatures] = None) -> Tuple[Tensor, int]:
    """Every exit's feature drives its own auxiliary head stream: N*H terms."""
    if not net.config.aux_heads:
        raise ValueError("auxiliary heads are disabled for this network")
    n = net.config.n_exits
    if feats is None or feats.computed < n:
        feats = backbone_features(net, batch, n)
    total, terms = None, 0
    for j in range(1, n + 1):
        state = net.zero_state(batch.size)
        for i in range(batch.window):
            feature = T.slice_(feats.pooled[j], (slice(None), i))
            pred, state = net.aux_head_forward(j, feature, state, rng)
            term = single_action_loss(pred, batch.pose[:, i], batch.grip[:, i], lam, batch.mask[:, i])
            total = term if total is None else T.add(total, term)
            terms += 1
    return T.scale(T.sum_(total), 1.0 / batch.size), terms


def batch_losses(net: MultiExitNet, batch: WindowBatch, cfg: TrainConfig, phase: str = "joint",
                 rng=None) -> LossParts:
    """Shared backbone pass, then L* and (phase joint, aux enabled) L_aux."""
    use_aux = phase == "joint" and cfg.aux_enabled and net.config.aux_heads
    upto = net.config.n_exits if use_aux else int(max(batch.exits_s1.max(), batch.exits_s2.max()))
    dropout = {}
    if phase == "posttrain":
        if cfg.posttrain_lstm_dropout is not None:
            dropout["lstm_dropout"] = cfg.posttrain_lstm_dropout
        if cfg.posttrain_mlp_dropout is not None:
            dropout["mlp_dropout"] = cfg.posttrain_mlp_dropout

    term = "backbone"
    try:
        if phase == "posttrain":
            with T.no_grad():
                feats = backbone_features(net, batch, upto)
        else:
            feats = backbone_features(net, batch, upto)
        term = "loss_seq"
        seq, n_seq = window_loss(net, batch, cfg.lam, rng, feats, dropout)
        aux, n_aux = None, 0
        if use_aux:
            term = "loss_aux"
            aux, n_aux = aux_loss(net, batch, cfg.lam, rng, feats)
    except NumericError as e:
        raise NumericError(e.op, f"term {term}") from e
    return LossParts(seq=seq, aux=aux, n_seq_terms=n_seq, n_aux_terms=n_aux)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def trainable_names(net: MultiExitNet, cfg: TrainConfig, phase: str) -> List[str]:
    if phase == "posttrain":
        return net.head_names()
    names = [n for n in net.params if not n.startswith("enc/")] if net.config.freeze_encoder else list(net.params)
    if not (cfg.aux_enabled and net.config.aux_heads):
        names = [n for n in names if not n.startswith("aux")]
    return names


def learning_rates(net: MultiExitNet, cfg: TrainConfig, names: Sequence[str], factor: float) -> Dict[str, float]:
    backbone = set(net.backbone_names())
    return {n: (cfg.lr_backbone if n in backbone else cfg.lr_head) * factor for n in names}


@dataclass
class StepResult:
    loss_total: float
    loss_seq: float
    loss_aux: float
    grad_norm: float
    n_seq_terms: int
    n_aux_terms: int


def train_step(net: MultiExitNet, batch: WindowBatch, cfg: TrainConfig, opt: AdamState, phase: str,
               rng=None, step_index: int = 0) -> StepResult:
    """Forward, backward, clip and one AdamW update on the phase's trainable set."""
    try:
        with Graph() as graph:
            parts = batch_losses(net, batch, cfg, phase, rng)
            total = parts.total
        grads = T.backward(graph, total, net.params)
    except NumericError as e:
        raise NumericError(e.op, f"step {step_index}, {e}") from e

    names = trainable_names(net, cfg, phase)
    norm = clip_grad_norm(grads, cfg.grad_clip, names)
    if not np.isfinite(norm):
        raise NumericError("backward", f"step {step_index}, non-finite gradient norm")
    factor = warmup_factor(opt.step + 1, cfg.warmup_steps)
    adam_step(net.params, grads, opt, learning_rates(net, cfg, names, factor),
              weight_decay=cfg.weight_decay, names=names)
    if not T.tensors_finite(net.params[n].data for n in names):
        raise NumericError("adam_step", f"step {step_index}, parameters became non-finite")
    return StepResult(
        loss_total=float(total.data),
        loss_seq=float(parts.seq.data),
        loss_aux=float(parts.aux.data) if parts.aux is not None else 0.0,
        grad_norm=norm,
        n_seq_terms=parts.n_seq_terms,
        n_aux_terms=parts.n_aux_terms,
    )


def validation_losses(net: MultiExitNet, batch: WindowBatch, lam: float) -> Dict[int, Dict[str, float]]:
    """Mean single-action loss per exit: main head pinned to that exit, plus its aux head."""
    n = net.config.n_exits
    valid = float(batch.mask.sum())
    results: Dict[int, Dict[str, float]] = {}
    with T.no_grad():
        feats = backbone_features(net, batch, n)
        for k in range(1, n + 1):
            pinned = np.full_like(batch.exits_s1, k)
            part, _ = _stream_loss(net, feats, pinned, batch, lam, None, {})
            row = {"val_loss": float(part.data.sum()) / valid}
            if net.config.aux_heads:
                state = net.zero_state(batch.size)
                acc = 0.0
                for i in range(batch.window):
                    pred, state = net.aux_head_forward(k, T.slice_(feats.pooled[k], (slice(None), i)), state)
                    acc += float(single_action_loss(pred, batch.pose[:, i], batch.grip[:, i], lam, batch.mask[:, i]).data.sum())
                row["val_aux_loss"] = acc / valid
            results[k] = row
    return results


# ---------------------------------------------------------------------------
# Epoch driver
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    net: MultiExitNet
    optimizers: Dict[str, AdamState] = field(default_factory=lambda: {p: AdamState() for p in PHASES})
    completed: List[List] = field(default_factory=list)  # [phase, epoch] pairs
    log: List[Dict] = field(default_factory=list)
    val_log: List[Dict] = field(default_factory=list)


@dataclass
class TrainResult:
    net: MultiExitNet
    log: List[Dict]
    val_log: List[Dict]
    final_checkpoint: Path


def global_epoch(cfg: TrainConfig, phase: str, epoch: int) -> int:
    return epoch if phase == "joint" else cfg.epochs_joint + epoch


def run_epoch(state: TrainState, data: List[EpisodeArrays], cfg: TrainConfig, phase: str, epoch: int,
              seed: int) -> List[Dict]:
    """All randomness of an epoch comes from the (phase, epoch) stream, so resumed runs replay it exactly."""
    rng = stream(seed, "train", phase, epoch)
    opt = state.optimizers[phase]
    ge = global_epoch(cfg, phase, epoch)
    rows = []
    for s in range(cfg.steps_per_epoch):
        step_index = ge * cfg.steps_per_epoch + s + 1
        batch = sample_batch(data, cfg.batch_size, cfg.window, state.net.config.n_exits, rng)
        result = train_step(state.net, batch, cfg, opt, phase, rng, step_index)
        rows.append({
            "epoch": ge,
            "phase": phase,
            "step": step_index,
            "loss_total": result.loss_total,
            "loss_seq": result.loss_seq,
            "loss_aux": result.loss_aux,
            "grad_norm": result.grad_norm,
        })
    return rows


def _optimizer_arrays(state: TrainState) -> Dict[str, np.ndarray]:
    arrays = {}
    for phase, opt in state.optimizers.items():
        arrays.update({f"{phase}/{k}": v for k, v in opt.to_arrays().items()})
    return arrays


async def _save(path: Path, state: TrainState, seed: int, extra: Dict, with_optimizer: bool) -> bool:
    optimizer = _optimizer_arrays(state) if with_optimizer else None
    return await storage.save_checkpoint(path, asdict(state.net.config), state.net.params.arrays(), seed,
                                         extra=extra, optimizer=optimizer)


async def _restore(path: Path, state: TrainState) -> bool:
    payload = await storage.load_checkpoint(path)
    if payload is None:
        return False
    state.net.params.load(payload["params"])
    extra = payload.get("extra", {})
    steps = extra.get("optimizer_steps", {})
    grouped: Dict[str, Dict[str, np.ndarray]] = {p: {} for p in PHASES}
    for key, arr in payload.get("optimizer", {}).items():
        phase, rest = key.split("/", 1)
        grouped[phase][rest] = arr
    state.optimizers = {p: AdamState.from_arrays(steps.get(p, 0), grouped[p]) for p in PHASES}
    state.completed = extra.get("completed", [])
    state.log = extra.get("log", [])
    state.val_log = extra.get("val_log", [])
    logger.info(f"Resumed training from {path} after {len(state.completed)} epochs")
    return True


async def train(config: RunConfig, episodes: List[Episode], out_dir, resume: bool = True) -> TrainResult:
    """
    Two-phase training with per-epoch checkpoints.

    Writes ``checkpoints/epoch_XXX.json``, ``checkpoints/resume.json``
    (parameters + optimizer moments + progress), ``checkpoints/final.json``,
    ``train_log.csv`` and ``val_log.csv`` under ``out_dir``.
    """
    if not episodes:
        raise ValueError("training needs at least one episode")
    cfg = config.validate().train
    net_config = config.net
    seed = config.seed

    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    resume_path = ckpt_dir / RESUME_FILE
    train_log, val_log = out / "train_log.csv", out / "val_log.csv"
    train_eps, val_eps = split_holdout(episodes, cfg.val_fraction, seed)
    data = [EpisodeArrays.from_episode(e) for e in train_eps]
    val_data = [EpisodeArrays.from_episode(e) for e in (val_eps or train_eps)]
    val_batch = sample_batch(val_data, cfg.val_windows, cfg.window, net_config.n_exits, stream(seed, "val-windows"))

    state = TrainState(net=MultiExitNet.init(net_config, derive_seed(seed, "init")))
    if resume and resume_path.exists():
        await _restore(resume_path, state)

    logger.info(f"Training on {len(data)} episodes ({len(val_eps)} held out), aux={'on' if net_config.aux_heads else 'off'}")
    for phase, n_epochs in (("joint", cfg.epochs_joint), ("posttrain", cfg.epochs_posttrain)):
        for epoch in range(n_epochs):
            if [phase, epoch] in state.completed:
                continue
            rows = await asyncio.to_thread(run_epoch, state, data, cfg, phase, epoch, seed)
            val = await asyncio.to_thread(validation_losses, state.net, val_batch, cfg.lam)
            ge = global_epoch(cfg, phase, epoch)
            state.log.extend(rows)
            state.val_log.extend({"epoch": ge, "phase": phase, "exit": k, **v} for k, v in val.items())
            state.completed.append([phase, epoch])

            mean_loss = float(np.mean([r["loss_total"] for r in rows])) if rows else float("nan")
            logger.info(f"Epoch {ge} ({phase}) done: mean loss {mean_loss:.5f}, val exit-1 loss {val[1]['val_loss']:.5f}")

            progress = {
                "phase": phase,
                "epoch": epoch,
                "completed": state.completed,
                "optimizer_steps": {p: o.step for p, o in state.optimizers.items()},
            }
            epoch_path = ckpt_dir / f"epoch_{ge:03d}.json"
            resume_extra = {**progress, "log": state.log, "val_log": state.val_log}
            storage.ensure_written(await _save(epoch_path, state, seed, {"phase": phase, "epoch": epoch}, False), epoch_path)
            storage.ensure_written(await _save(resume_path, state, seed, resume_extra, True), resume_path)
            storage.ensure_written(await csv_service.write_training_log(state.log, train_log), train_log)
            storage.ensure_written(await csv_service.write_frame(state.val_log, val_log), val_log)

    final = ckpt_dir / FINAL_FILE
    storage.ensure_written(await _save(final, state, seed, {"phase": "final"}, False), final)
    storage.ensure_written(await csv_service.write_training_log(state.log, train_log), train_log)
    logger.info(f"Training finished; final checkpoint at {final}")
    return TrainResult(net=state.net, log=state.log, val_log=state.val_log, final_checkpoint=final)


async def load_network(path, dtype=np.float64) -> Tuple[MultiExitNet, Dict]:
    """Network and header from a checkpoint file."""
    payload = await storage.load_checkpoint(path)
    if payload is None:
        raise FileNotFoundError(f"cannot load checkpoint {path}")
    net = MultiExitNet.from_arrays(net_config_from_dict(payload["net_config"]), payload["params"], dtype)
    return net, payload
