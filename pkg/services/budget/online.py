"""
Online threshold search.

A Gaussian-process surrogate (squared-exponential kernel with fitted noise)
over the normalized threshold box, expected-improvement acquisition and a
penalized objective f = Scc - P, evaluated by rolling the early-exit policy
through a fixed set of task chains.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm, qmc
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import RBF, ConstantKernel, WhiteKernel

from config import EnvConfig, SearchConfig
from models import CHAIN_LENGTH, BudgetSpec, CostModel, CriterionKind, TaskChain, ThresholdVector
from services.budget.verify import verify_constraints
from services.env.chains import evaluate_chains
from services.network import MultiExitNet
from services.policy import EarlyExitPolicy

logger = logging.getLogger(__name__)


def expected_improvement(mu: np.ndarray, sigma: np.ndarray, best: float, xi: float = 0.01) -> np.ndarray:
    """EI for maximization; zero where the predictive std vanishes."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    improvement = mu - best - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, improvement / sigma, 0.0)
    ei = improvement * norm.cdf(z) + sigma * norm.pdf(z)
    return np.where(sigma > 1e-12, np.maximum(ei, 0.0), 0.0)


class SequentialOptimizer:
    """
    Ask/tell Bayesian optimizer over a box.

    The first ``n_init`` points come from a Latin hypercube; later points
    maximize expected improvement under a GP fitted on unit-cube inputs.
    """

    def __init__(self, bounds: Sequence[Tuple[float, float]], n_init: int = 10, seed: int = 0,
                 candidates: int = 2000, restarts: int = 5, xi: float = 0.01,
                 initial: Optional[Sequence[Sequence[float]]] = None):
        self.bounds = np.asarray(bounds, dtype=np.float64).reshape(-1, 2)
        if np.any(self.bounds[:, 1] <= self.bounds[:, 0]):
            raise ValueError(f"empty search box {self.bounds.tolist()}")
        self.dim = self.bounds.shape[0]
        self.n_init = max(1, n_init)
        self.candidates = candidates
        self.restarts = restarts
        self.xi = xi
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        starts = [np.clip(self._to_unit(x), 0.0, 1.0) for x in (initial or [])]
        remaining = self.n_init - len(starts)
        if remaining > 0:
            starts.extend(qmc.LatinHypercube(d=self.dim, seed=self.rng).random(remaining))
        self._design = np.vstack(starts)
        self.n_init = len(self._design)
        self.X: List[np.ndarray] = []
        self.y: List[float] = []

    def _to_unit(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)

    def _from_unit(self, u: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return lo + np.clip(u, 0.0, 1.0) * (hi - lo)

    def _fit(self) -> GaussianProcessRegressor:
        kernel = (ConstantKernel(1.0, (1e-3, 1e3))
                  * RBF(length_scale=np.full(self.dim, 0.3), length_scale_bounds=(1e-2, 1e2))
                  + WhiteKernel(noise_level=1e-3, noise_level_bounds=(1e-8, 1e0)))
        gp = GaussianProcessRegressor(kernel=kernel, normalize_y=True, n_restarts_optimizer=2,
                                      random_state=int(self.rng.integers(2 ** 31)))
        units = np.array([self._to_unit(x) for x in self.X])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            gp.fit(units, np.asarray(self.y, dtype=np.float64))
        return gp

    def ask(self) -> np.ndarray:
        if len(self.X) < self.n_init:
            return self._from_unit(self._design[len(self.X)])

        gp = self._fit()
        best = max(self.y)

        def neg_ei(u: np.ndarray) -> float:
            mu, sigma = gp.predict(u.reshape(1, -1), return_std=True)
            return -float(expected_improvement(mu, sigma, best, self.xi)[0])

        pool = self.rng.random((self.candidates, self.dim))
        mu, sigma = gp.predict(pool, return_std=True)
        scores = expected_improvement(mu, sigma, best, self.xi)
        starts = pool[np.argsort(-scores, kind="stable")[:self.restarts]]
        best_u, best_value = starts[0], -scores.max()
        for start in starts:
            result = minimize(neg_ei, start, method="L-BFGS-B", bounds=[(0.0, 1.0)] * self.dim)
            if result.success and result.fun < best_value:
                best_u, best_value = result.x, result.fun
        return self._from_unit(best_u)

    def tell(self, x: np.ndarray, y: float) -> None:
        if not math.isfinite(y):
            raise ValueError(f"objective value must be finite, got {y}")
        self.X.append(np.asarray(x, dtype=np.float64))
        self.y.append(float(y))

    @property
    def best(self) -> Tuple[np.ndarray, float]:
        index = int(np.argmax(self.y))
        return self.X[index], self.y[index]


@dataclass
class OptimizationResult:
    best_x: Optional[np.ndarray]
    best_y: float
    X: np.ndarray
    y: np.ndarray
    n_iter: int


def bo_maximize(f: Callable[[np.ndarray], float], bounds: Sequence[Tuple[float, float]], n_iter: int = 50,
                n_init: int = 10, seed: int = 0, **kwargs) -> OptimizationResult:
    optimizer = SequentialOptimizer(bounds, n_init=n_init, seed=seed, **kwargs)
    for _ in range(n_iter):
        x = optimizer.ask()
        optimizer.tell(x, float(f(x)))
    best_x, best_y = optimizer.best
    return OptimizationResult(best_x, best_y, np.array(optimizer.X), np.array(optimizer.y), n_iter)


def penalized_objective(scc: float, feasible: bool, penalty: float) -> float:
    return scc - (0.0 if feasible else penalty)


def search_bounds(deltas: np.ndarray, n_cap: int, percentile: float = 99.0) -> List[Tuple[float, float]]:
    """[0, u_i] per searchable exit i < n_cap, u_i the given percentile of that exit's deltas."""
    deltas = np.asarray(deltas, dtype=np.float64)
    bounds = []
    for i in range(1, n_cap):
        upper = float(np.percentile(deltas[:, i - 1], percentile)) if deltas.shape[0] else 0.0
        bounds.append((0.0, max(upper, 1e-6)))
    return bounds


@dataclass
class OnlineResult:
    thresholds: ThresholdVector
    log: List[Dict] = field(default_factory=list)
    found_feasible: bool = False
    best_objective: float = -math.inf


async def solve_online(net: MultiExitNet, chains: List[TaskChain], env: EnvConfig, budget: BudgetSpec,
                       cost_model: CostModel, n_cap: int, deltas: np.ndarray, search: SearchConfig,
                       seed: int, fallback: ThresholdVector, workers: int = 1,
                       criterion: CriterionKind = CriterionKind.ACTION) -> OnlineResult:
    """
    Search thresholds that maximize Scc - P on ``chains``.

    Every evaluation uses the same chains, so objective differences come from
    the thresholds only. The ``fallback`` (offline) thresholds, clipped to the
    search box, are the first design point. The incumbent is the best
    feasible point; without one the fallback is returned unchanged.
    """
    n_exits = cost_model.n_exits
    cost_hash = cost_model.hash()
    if n_cap == 1:
        logger.info("Cap is exit 1; nothing to search")
        return OnlineResult(thresholds=fallback)

    bounds = search_bounds(deltas, n_cap, search.upper_percentile)
    initial = [[min(fallback.effective(i), upper) for i, (_, upper) in enumerate(bounds, start=1)]]
    optimizer = SequentialOptimizer(bounds, n_init=search.bo_init, seed=seed, candidates=search.acq_candidates,
                                    restarts=search.acq_restarts, xi=search.xi,
                                    initial=initial)
    log: List[Dict] = []
    incumbent: Optional[ThresholdVector] = None
    incumbent_value = -math.inf

    for evaluation in range(search.bo_evals):
        x = optimizer.ask()
        eta = [float(v) for v in x] + [math.inf] * (n_exits - len(x))
        thresholds = ThresholdVector(criterion=criterion, eta=eta, n_cap=n_cap, cost_model_hash=cost_hash)
        policy = EarlyExitPolicy.from_thresholds(net, thresholds, cost_model=cost_model)
        metrics, results = await evaluate_chains(policy, chains, env, workers, label=f"bo{evaluation}")
        report = verify_constraints((log_ for r in results for log_ in r.logs), budget, cost_model, n_cap)
        scc = metrics.avg_len / CHAIN_LENGTH
        value = penalized_objective(scc, report.passed, search.penalty)
        optimizer.tell(x, value)

        row = {"eval": evaluation}
        row.update({f"eta_{i + 1}": float(v) for i, v in enumerate(x)})
        row.update({
            "scc": scc,
            "avg_flops": report.avg_flops,
            "peak_flops": report.peak_flops,
            "mem": report.mem,
            "f_obj": value,
            "feasible": report.passed,
        })
        log.append(row)
        logger.info(f"Search eval {evaluation + 1}/{search.bo_evals}: Scc {scc:.3f}, avg {report.avg_flops:.4g} FLOPs, f {value:.3f}")

        if report.passed and value > incumbent_value:
            incumbent, incumbent_value = thresholds, value

    if incumbent is None:
        logger.warning("Online search found no feasible thresholds; falling back to offline calibration")
        return OnlineResult(thresholds=fallback, log=log)
    return OnlineResult(thresholds=incumbent, log=log, found_feasible=True, best_objective=incumbent_value)
