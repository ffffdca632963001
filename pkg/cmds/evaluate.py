"""
Evaluation command for the DeeR toolkit.
Rolls a static or early-exit policy through task chains and records metrics,
per-step traces and a budget check.
"""

import argparse
import logging
from pathlib import Path

import numpy as np

import storage
from config import RunConfig
from models import CriterionKind, ThresholdVector
from services.budget.allocation import budget_spec
from services.budget.cost_model import cost_model_for
from services.budget.verify import verify_constraints
from services.env.chains import ExpertPolicy, RandomPolicy, evaluate_chains, make_chains
from services.policy import EarlyExitPolicy
from services.report import METRICS_FILE
from services.training import load_network
from utils.validation import ValidationError, require, validate_exit_index, validate_splits

logger = logging.getLogger(__name__)

TRACES_FILE = "episodes.jsonl"


async def run(args: argparse.Namespace, config: RunConfig) -> int:
    config.update({
        "n_chains": args.chains,
        "eval_workers": args.workers,
        "eval_split": args.split,
        "static_exit": args.static_exit,
        "cost_mode": args.cost_mode,
    })
    ev = config.eval
    splits = require(validate_splits(ev.eval_split))
    out = Path(args.out)

    net, _ = await load_network(args.checkpoint)
    net = net.inference_copy(np.dtype(ev.inference_dtype))
    cost_model = cost_model_for(config.budget, net.config)

    if args.baseline:
        policy = ExpertPolicy(config.env) if args.baseline == "expert" else RandomPolicy(config.seed, config.env)
        n_cap = 1
        label = args.label or args.baseline
    elif ev.static_exit:
        exit_index = require(validate_exit_index(ev.static_exit, net.config.n_exits))
        policy = EarlyExitPolicy.static(net, exit_index, cost_model=cost_model)
        n_cap = exit_index
        label = args.label or f"static-{exit_index}"
    elif args.thresholds:
        data = await storage.load_json(args.thresholds)
        if not data:
            raise ValidationError(f"Cannot read thresholds from {args.thresholds}")
        thresholds = ThresholdVector.from_dict(data)
        if args.criterion and CriterionKind(args.criterion) != thresholds.criterion:
            raise ValidationError(f"Thresholds were fitted for '{thresholds.criterion.value}', not '{args.criterion}'")
        if thresholds.cost_model_hash and thresholds.cost_model_hash != cost_model.hash():
            logger.warning("Thresholds were calibrated against a different cost model")
        require(validate_exit_index(thresholds.n_cap, net.config.n_exits))
        policy = EarlyExitPolicy.from_thresholds(net, thresholds, cost_model=cost_model)
        n_cap = thresholds.n_cap
        label = args.label or thresholds.criterion.value
    else:
        raise ValidationError("eval needs one of --thresholds, --static-exit or --baseline")

    chains = make_chains(ev.n_chains, splits, config.seed, config.env, purpose="eval")
    metrics, results = await evaluate_chains(policy, chains, config.env, ev.eval_workers, label=label)

    budget_cfg = config.budget
    budget = budget_spec(cost_model, n_cap, budget_cfg.avg_gflops, budget_cfg.avg_fraction,
                         budget_cfg.peak_gflops, budget_cfg.mem_gb, 1, 1.0)
    report = verify_constraints((log for r in results for log in r.logs), budget, cost_model, n_cap)

    payload = metrics.to_dict()
    payload["n_cap"] = n_cap
    payload["constraints"] = report.to_dict()
    payload["cost_model"] = cost_model.to_dict()
    storage.ensure_written(await storage.save_json(out / METRICS_FILE, payload), out / METRICS_FILE)
    traces_ok = await storage.write_jsonl(out / TRACES_FILE, (
        {
            "chain": result.chain_index,
            "subtask": log.subtask,
            "success": log.success,
            "steps": [step.to_dict() for step in log.steps],
        }
        for result in results for log in result.logs
    ))
    storage.ensure_written(traces_ok, out / TRACES_FILE)
    storage.ensure_written(await storage.save_resolved_config(out, config.to_dict()), out / storage.RESOLVED_CONFIG_FILE)

    logger.info(f"{label}: avg successful length {metrics.avg_len:.3f}, avg {metrics.mean_flops / 1e9:.4g} GFLOPs, "
                f"{metrics.ns_per_action / 1e6:.3f} ms/action, constraints {'met' if report.passed else 'violated'}")
    return 0


def setup(subparsers) -> None:
    """Register the eval command."""
    parser = subparsers.add_parser("eval", help="Evaluate a policy on task chains")
    parser.add_argument("--checkpoint", required=True, help="Trained checkpoint file")
    parser.add_argument("--out", required=True, help="Output directory for metrics and traces")
    parser.add_argument("--thresholds", default=None, help="Threshold file from calibrate")
    parser.add_argument("--static-exit", type=int, default=None, help="Always exit at this index")
    parser.add_argument("--baseline", choices=["expert", "random"], default=None, help="Roll a reference policy instead of the network")
    parser.add_argument("--criterion", choices=["action", "feature", "time"], default=None, help="Expected criterion of the thresholds")
    parser.add_argument("--chains", type=int, default=None, help="Number of evaluation chains")
    parser.add_argument("--split", default=None, help="Evaluation split letters")
    parser.add_argument("--workers", type=int, default=None, help="Concurrent chain workers")
    parser.add_argument("--cost-mode", choices=["analytic", "table"], default=None, help="Cost model source")
    parser.add_argument("--label", default=None, help="Run label in reports")
    parser.set_defaults(handler=run)
