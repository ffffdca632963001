"""
Calibration command for the DeeR toolkit.
Fits exit thresholds under a budget, offline on demonstration data or online
by searching over task-chain rollouts.
"""

import argparse
import asyncio
import logging
from pathlib import Path
from typing import List

import numpy as np

import storage
from config import RunConfig
from models import CriterionKind, DatasetManifest, Episode, ThresholdVector
from services import csv_service
from services.budget.allocation import (
    budget_spec, cap_exit, fit_thresholds, replay_exits, schedule_from_allocation, solve_allocation,
)
from services.budget.cost_model import cost_model_for
from services.budget.online import solve_online
from services.env.chains import make_chains
from services.env.dataset import MANIFEST_FILE, load_dataset, split_holdout, subsample
from services.policy import collect_deltas
from services.training import load_network
from utils.validation import (
    ValidationError, require, validate_criterion, validate_fraction, validate_positive, validate_splits,
)

logger = logging.getLogger(__name__)

THRESHOLDS_FILE = "thresholds.json"
ALLOCATION_FILE = "allocation.json"
DELTAS_FILE = "deltas.csv"
BO_LOG_FILE = "bo_log.csv"


async def calibration_episodes(config: RunConfig, data_dir) -> List[Episode]:
    """
    Calibration timesteps: the training holdout (``calib_split=val``), given
    split letters, or a ``calib_fraction`` subsample of the training splits.
    """
    ev = config.eval
    if ev.calib_fraction is not None:
        require(validate_fraction("calib_fraction", ev.calib_fraction))
        episodes, _ = await load_dataset(data_dir, config.train.train_splits)
        return subsample(episodes, ev.calib_fraction, config.seed, "calibration")
    if ev.calib_split == "val":
        episodes, _ = await load_dataset(data_dir, config.train.train_splits)
        _, held_out = split_holdout(episodes, config.train.val_fraction, config.seed)
        return held_out or episodes
    episodes, _ = await load_dataset(data_dir, require(validate_splits(ev.calib_split)))
    return episodes


async def run(args: argparse.Namespace, config: RunConfig) -> int:
    config.update({
        "avg_gflops": args.avg_gflops,
        "avg_fraction": args.avg_fraction,
        "peak_gflops": args.peak_gflops,
        "mem_gb": args.mem_gb,
        "calib_fraction": args.calib_fraction,
        "cost_mode": args.cost_mode,
        "criterion": args.criterion,
    })
    criterion = CriterionKind(require(validate_criterion(config.eval.criterion)))
    if criterion == CriterionKind.STATIC:
        raise ValidationError("Static exits need no calibration; use eval --static-exit")
    if args.mode == "online" and criterion == CriterionKind.TIME:
        raise ValidationError("Online search covers threshold criteria only")
    budget_cfg = config.budget
    for name in ("avg_gflops", "peak_gflops", "mem_gb"):
        require(validate_positive(name, getattr(budget_cfg, name)))
    require(validate_fraction("avg_fraction", budget_cfg.avg_fraction))
    out = Path(args.out)

    net, _ = await load_network(args.checkpoint)
    net = net.inference_copy(np.dtype(config.eval.inference_dtype))
    cost_model = cost_model_for(budget_cfg, net.config)
    n_cap = cap_exit(cost_model, budget_cfg.peak_gflops * 1e9, budget_cfg.mem_gb * 1e9)

    manifest_data = await storage.load_json(Path(args.data) / MANIFEST_FILE)
    manifest = DatasetManifest.from_dict(manifest_data) if manifest_data else None
    episodes = await calibration_episodes(config, args.data)
    if not episodes:
        raise ValidationError(f"No calibration episodes found in {args.data}")
    mean_len = manifest.mean_len if manifest else float(np.mean([len(e) for e in episodes]))
    n_tasks = budget_cfg.n_tasks or config.eval.n_chains

    budget = budget_spec(cost_model, n_cap, budget_cfg.avg_gflops, budget_cfg.avg_fraction,
                         budget_cfg.peak_gflops, budget_cfg.mem_gb, n_tasks, mean_len)
    allocation = solve_allocation(cost_model, budget, n_cap)

    deltas = None
    if criterion == CriterionKind.TIME:
        thresholds = ThresholdVector(criterion=criterion, eta=[float("inf")] * cost_model.n_exits, n_cap=n_cap,
                                     cost_model_hash=cost_model.hash(), schedule=schedule_from_allocation(allocation, mean_len))
    else:
        if args.deltas:
            deltas = await csv_service.read_deltas(args.deltas)
            if deltas is None:
                raise ValidationError(f"Cannot read calibration deltas from {args.deltas}")
        else:
            deltas = await asyncio.to_thread(collect_deltas, net, episodes, n_cap, criterion, config.eval.calib_samples)
            storage.ensure_written(await csv_service.write_deltas(deltas, out / DELTAS_FILE), out / DELTAS_FILE)
        thresholds = fit_thresholds(allocation, deltas, criterion, cost_model.hash())
        counts = np.bincount(replay_exits(thresholds, deltas), minlength=n_cap + 1)[1:]
        logger.info(f"Calibration exit fractions {np.round(counts / max(1, counts.sum()), 4).tolist()} "
                    f"vs targets {np.round(allocation.proportions[:n_cap], 4).tolist()}")

    online = None
    if args.mode == "online":
        chains = make_chains(config.search.bo_chains, config.eval.eval_split, config.seed, config.env, purpose="search")
        online = await solve_online(net, chains, config.env, budget, cost_model, n_cap, deltas, config.search,
                                    config.seed, thresholds, config.eval.eval_workers, criterion)
        thresholds = online.thresholds
        storage.ensure_written(await csv_service.write_bo_log(online.log, n_cap - 1, out / BO_LOG_FILE), out / BO_LOG_FILE)

    storage.ensure_written(await storage.save_json(out / THRESHOLDS_FILE, thresholds.to_dict()), out / THRESHOLDS_FILE)
    allocation_ok = await storage.save_json(out / ALLOCATION_FILE, {
        "mode": args.mode,
        "budget": budget.to_dict(),
        "cost_model": cost_model.to_dict(),
        "cost_model_hash": cost_model.hash(),
        "allocation": allocation.to_dict(),
        "online_feasible": online.found_feasible if online else None,
    })
    storage.ensure_written(allocation_ok, out / ALLOCATION_FILE)
    storage.ensure_written(await storage.save_resolved_config(out, config.to_dict()), out / storage.RESOLVED_CONFIG_FILE)
    logger.info(f"Thresholds for {criterion.value} at cap {n_cap} written to {out / THRESHOLDS_FILE}")
    return 0


def setup(subparsers) -> None:
    """Register the calibrate command."""
    parser = subparsers.add_parser("calibrate", help="Fit exit thresholds under a budget")
    parser.add_argument("--checkpoint", required=True, help="Trained checkpoint file")
    parser.add_argument("--data", required=True, help="Dataset directory")
    parser.add_argument("--out", required=True, help="Output directory for thresholds")
    parser.add_argument("--mode", choices=["dataset", "online"], default="dataset", help="Offline or online calibration")
    parser.add_argument("--criterion", choices=["action", "feature", "time"], default=None, help="Exit criterion")
    parser.add_argument("--avg-gflops", type=float, default=None, help="Average per-step GFLOPs budget")
    parser.add_argument("--avg-fraction", type=float, default=None, help="Average per-step budget as a fraction of C_n")
    parser.add_argument("--peak-gflops", type=float, default=None, help="Peak per-step GFLOPs")
    parser.add_argument("--mem-gb", type=float, default=None, help="Memory cap in GB")
    parser.add_argument("--calib-fraction", type=float, default=None, help="Calibrate on this fraction of the training splits")
    parser.add_argument("--cost-mode", choices=["analytic", "table"], default=None, help="Cost model source")
    parser.add_argument("--deltas", default=None, help="Existing calibration-delta CSV to fit from")
    parser.set_defaults(handler=run)
