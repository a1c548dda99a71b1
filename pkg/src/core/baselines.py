"""Comparison policies: cross-entropy and finite-difference search over open-loop
tables, the greedy threshold rule and constant control."""
import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from threading import Lock
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NumericalError, ValidationError
from .integrate import check_grid
from .network import ControlProblem, HawkesParams, ObjectiveKind, OpinionParams
from .sdesim import Policy, Scenario, Trajectory, draw_scenarios, monte_carlo_cost
from ..utils.random_utils import SEARCH_STREAM, derive_seed, make_rng

logger = logging.getLogger(__name__)

COLLAPSE_STDDEV = 1e-12
CONSTANT_LEVELS = 41

# objective(candidate, iteration) -> cost; the iteration selects the random-number block
Objective = Callable[[np.ndarray, int], float]


def _interval_index(grid: np.ndarray, t: float) -> int:
    return int(np.clip(np.searchsorted(grid, t, side="right") - 1, 0, len(grid) - 2))


class PiecewiseConstantPolicy(Policy):
    """Open-loop table: one control vector per grid interval, x is ignored"""

    def __init__(self, grid, u_table):
        self.grid = check_grid(grid)
        table = np.array(u_table, dtype=float)
        if table.ndim == 1:
            table = table[:, None]
        if table.shape[0] != self.grid.size - 1:
            raise ValidationError(f"control table has {table.shape[0]} rows for {self.grid.size - 1} intervals")
        if not np.all(np.isfinite(table)):
            raise ValidationError("control table has non-finite entries")
        table.setflags(write=False)
        self.u_table = table

    @classmethod
    def from_segments(cls, grid, segment_table) -> "PiecewiseConstantPolicy":
        """Spread an (S, U) table over the grid intervals in S contiguous blocks"""
        grid = check_grid(grid)
        segment_table = np.atleast_2d(np.asarray(segment_table, dtype=float))
        m, segments = grid.size - 1, segment_table.shape[0]
        if not 1 <= segments <= m:
            raise ValidationError(f"need between 1 and {m} segments, got {segments}")
        rows = (np.arange(m) * segments) // m
        return cls(grid, segment_table[rows])

    def evaluate(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.u_table[_interval_index(self.grid, t)].copy()


class ConstantPolicy(Policy):
    def __init__(self, u0):
        u0 = np.array(u0, dtype=float)
        if not np.all(np.isfinite(u0)):
            raise ValidationError("constant control must be finite")
        u0.setflags(write=False)
        self.u0 = u0

    def evaluate(self, x: np.ndarray, t: float) -> np.ndarray:
        return np.broadcast_to(self.u0, np.shape(x)).copy()


def constant_policy(u0) -> ConstantPolicy:
    return ConstantPolicy(u0)


@dataclass(frozen=True)
class CEConfig:
    population_size: int = 100
    elite_fraction: float = 0.1
    init_mean: float = 0.0
    init_stddev: float = 1.0
    max_iters: int = 50
    rel_tol: float = 1e-3
    segments: Optional[int] = None  # None: one table row per grid interval

    def __post_init__(self):
        if not 0 < self.elite_fraction <= 1:
            raise ValidationError(f"elite_fraction must lie in (0, 1], got {self.elite_fraction}")
        if self.population_size * self.elite_fraction < 2:
            raise ValidationError(
                f"population_size {self.population_size} is below 2 / elite_fraction "
                f"({2 / self.elite_fraction:.0f})")
        if not self.init_stddev > 0:
            raise ValidationError(f"init_stddev must be positive, got {self.init_stddev}")
        if self.max_iters < 0 or self.rel_tol < 0:
            raise ValidationError("max_iters and rel_tol must be nonnegative")
        if self.segments is not None and self.segments < 1:
            raise ValidationError(f"segments must be at least 1, got {self.segments}")

    @property
    def n_elite(self) -> int:
        return max(2, int(round(self.population_size * self.elite_fraction)))


@dataclass(frozen=True)
class FDConfig:
    eps: float = 1e-2
    step: float = 0.01
    max_iters: int = 20
    rel_tol: float = 1e-3
    max_update: Optional[float] = 1.0  # per-entry clip of step * gradient
    segments: Optional[int] = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ValidationError(f"perturbation eps must be positive, got {self.eps}")
        if not self.step > 0:
            raise ValidationError(f"step must be positive, got {self.step}")
        if self.max_iters < 0 or self.rel_tol < 0:
            raise ValidationError("max_iters and rel_tol must be nonnegative")
        if self.max_update is not None and not self.max_update > 0:
            raise ValidationError(f"max_update must be positive, got {self.max_update}")
        if self.segments is not None and self.segments < 1:
            raise ValidationError(f"segments must be at least 1, got {self.segments}")


@dataclass(frozen=True)
class GreedyConfig:
    k: float = 1.0
    n_checkpoints: int = 10
    c: float = 1.0

    def __post_init__(self):
        if not self.k >= 1:
            raise ValidationError(f"multiplier k must be at least 1, got {self.k}")
        if int(self.n_checkpoints) < 1:
            raise ValidationError(f"n_checkpoints must be at least 1, got {self.n_checkpoints}")
        if not self.c >= 0:
            raise ValidationError(f"pulse magnitude c must be nonnegative, got {self.c}")


@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    mean_cost: float
    best_cost: float


@dataclass
class CostHistory:
    entries: List[HistoryEntry] = field(default_factory=list)
    converged: bool = False
    collapsed: bool = False

    def append(self, iteration: int, mean_cost: float, best_cost: float) -> None:
        self.entries.append(HistoryEntry(iteration, float(mean_cost), float(best_cost)))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def mean_costs(self) -> np.ndarray:
        return np.array([entry.mean_cost for entry in self.entries])

    def rows(self) -> List[Tuple[int, float, float]]:
        return [(e.iteration, e.mean_cost, e.best_cost) for e in self.entries]


def _relative_change(previous: float, current: float) -> float:
    return abs(current - previous) / max(abs(previous), 1e-12)


def _evaluate_all(objective: Objective, candidates: Sequence[np.ndarray], iteration: int,
                  workers: int) -> np.ndarray:
    def run(candidate):
        return objective(candidate, iteration)

    if workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            costs = list(executor.map(run, candidates))
    else:
        costs = [run(candidate) for candidate in candidates]
    return np.array(costs, dtype=float)


def cross_entropy_search(objective: Objective, initial_mean, config: CEConfig, seed: int,
                         workers: int = 1) -> Tuple[np.ndarray, CostHistory]:
    """Diagonal-Gaussian cross-entropy minimisation of objective.

    Each iteration samples population_size candidates, ranks them by cost and
    refits the per-entry mean and stddev to the elite. Stops after max_iters,
    when the elite mean cost changes by less than rel_tol, or when every
    stddev falls below 1e-12.
    """
    mean = np.array(initial_mean, dtype=float)
    std = np.full(mean.shape, config.init_stddev)
    history = CostHistory()
    previous = None

    for iteration in range(config.max_iters):
        rng = make_rng(seed, SEARCH_STREAM, iteration)
        samples = mean + std * rng.standard_normal((config.population_size,) + mean.shape)
        costs = _evaluate_all(objective, list(samples), iteration, workers)
        if not np.all(np.isfinite(costs)):
            raise NumericalError(f"cross-entropy iteration {iteration} produced non-finite costs")

        elite = np.argsort(costs, kind="stable")[:config.n_elite]
        mean = samples[elite].mean(axis=0)
        std = samples[elite].std(axis=0)
        elite_cost = float(np.mean(costs[elite]))
        history.append(iteration, elite_cost, float(costs[elite[0]]))
        logger.debug(f"CE iteration {iteration}: elite mean cost {elite_cost:.6g}, max stddev {std.max():.3g}")

        if np.max(std) < COLLAPSE_STDDEV:
            history.collapsed = True
            logger.warning(f"CE stddev collapsed at iteration {iteration}, stopping")
            break
        if previous is not None and _relative_change(previous, elite_cost) < config.rel_tol:
            history.converged = True
            break
        previous = elite_cost

    return mean, history


def _central_stencil(flat: np.ndarray, eps: float) -> List[np.ndarray]:
    """p + eps e_i for every entry, then p - eps e_i"""
    bumps = np.eye(flat.size) * eps
    return [flat + row for row in bumps] + [flat - row for row in bumps]


def _central_gradient(stencil_costs: np.ndarray, eps: float, context: str = "") -> np.ndarray:
    d = stencil_costs.size // 2
    gradient = (stencil_costs[:d] - stencil_costs[d:]) / (2 * eps)
    bad = np.flatnonzero(~np.isfinite(gradient))
    if bad.size:
        raise NumericalError(f"non-finite gradient at entry {int(bad[0])}{context}")
    return gradient


def finite_difference_gradient(cost: Callable[[np.ndarray], float], point, eps: float) -> np.ndarray:
    """Central differences (J(p + eps e_i) - J(p - eps e_i)) / (2 eps) for every entry"""
    if not eps > 0:
        raise ValidationError(f"perturbation eps must be positive, got {eps}")
    point = np.array(point, dtype=float)
    stencil = _central_stencil(point.reshape(-1), eps)
    costs = np.array([cost(p.reshape(point.shape)) for p in stencil], dtype=float)
    return _central_gradient(costs, eps).reshape(point.shape)


def finite_difference_search(objective: Objective, initial_point, config: FDConfig,
                             workers: int = 1) -> Tuple[np.ndarray, CostHistory]:
    """Fixed-step descent along central-difference gradients.

    All 2d perturbed costs of an iteration share the iteration's random-number
    block. Stops after max_iters or when the cost changes by less than rel_tol.
    """
    point = np.array(initial_point, dtype=float)
    history = CostHistory()
    previous = None

    for iteration in range(config.max_iters):
        flat = point.reshape(-1)
        candidates = [flat] + _central_stencil(flat, config.eps)
        costs = _evaluate_all(lambda p, it: objective(p.reshape(point.shape), it), candidates, iteration, workers)

        current = float(costs[0])
        gradient = _central_gradient(costs[1:], config.eps, f" (iteration {iteration})")
        history.append(iteration, current, min(current, float(np.min(costs))))
        logger.debug(f"FD iteration {iteration}: cost {current:.6g}, |grad| {np.linalg.norm(gradient):.3g}")

        if previous is not None and _relative_change(previous, current) < config.rel_tol:
            history.converged = True
            break
        previous = current

        update = config.step * gradient
        if config.max_update is not None:
            update = np.clip(update, -config.max_update, config.max_update)
        point = (flat - update).reshape(point.shape)

    return point, history


class _OpenLoopObjective:
    """Monte-Carlo cost of a segment table; iteration i reuses one scenario block"""

    def __init__(self, problem: ControlProblem, params: OpinionParams, hawkes: HawkesParams, x0,
                 n_runs: int, segments: int, seed: int):
        self.problem = problem
        self.params = params
        self.hawkes = hawkes
        self.x0 = x0
        self.n_runs = n_runs
        self.segments = segments
        self.seed = seed
        self._scenarios: Dict[int, List[Scenario]] = {}
        self._lock = Lock()

    def scenarios(self, iteration: int) -> List[Scenario]:
        with self._lock:
            if iteration not in self._scenarios:
                block = derive_seed(self.seed, SEARCH_STREAM, iteration)
                self._scenarios = {iteration: draw_scenarios(self.hawkes, self.problem.grid, block, self.n_runs)}
            return self._scenarios[iteration]

    def policy(self, flat: np.ndarray) -> PiecewiseConstantPolicy:
        table = np.asarray(flat, dtype=float).reshape(self.segments, self.params.num_users)
        return PiecewiseConstantPolicy.from_segments(self.problem.grid, table)

    def __call__(self, flat: np.ndarray, iteration: int) -> float:
        result = monte_carlo_cost(self.policy(flat), self.problem, self.params, self.hawkes, self.x0,
                                  self.n_runs, self.seed, scenarios=self.scenarios(iteration))
        return result.mean


def _segments(problem: ControlProblem, segments: Optional[int]) -> int:
    return problem.num_intervals if segments is None else min(segments, problem.num_intervals)


def cross_entropy_optimize(problem: ControlProblem, params: OpinionParams, hawkes: HawkesParams, x0,
                           config: CEConfig, seed: int, n_runs: int = 5,
                           workers: int = 1) -> Tuple[PiecewiseConstantPolicy, CostHistory]:
    segments = _segments(problem, config.segments)
    objective = _OpenLoopObjective(problem, params, hawkes, x0, n_runs, segments, seed)
    initial = np.full(segments * params.num_users, config.init_mean)
    logger.info(f"CE search over {initial.size} entries, population {config.population_size}")
    mean, history = cross_entropy_search(objective, initial, config, seed, workers)
    return objective.policy(mean), history


def finite_difference_optimize(problem: ControlProblem, params: OpinionParams, hawkes: HawkesParams, x0,
                               config: FDConfig, seed: int, n_runs: int = 5, initial: float = 0.0,
                               workers: int = 1) -> Tuple[PiecewiseConstantPolicy, CostHistory]:
    segments = _segments(problem, config.segments)
    objective = _OpenLoopObjective(problem, params, hawkes, x0, n_runs, segments, seed)
    start = np.full(segments * params.num_users, float(initial))
    logger.info(f"FD descent over {start.size} entries, eps={config.eps}, step={config.step}")
    point, history = finite_difference_search(objective, start, config, workers)
    return objective.policy(point), history


def reference_state_cost(trajectories: Sequence[Trajectory], problem: ControlProblem) -> np.ndarray:
    """Mean state cost q(x(tau_k)) over runs, the greedy rule's reference path"""
    if not trajectories:
        raise ValidationError("need at least one trajectory for a reference cost")
    per_run = [[problem.state_cost(xk) for xk in traj.x] for traj in trajectories]
    return np.mean(np.array(per_run), axis=0)


class GreedyPolicy(Policy):
    """Threshold rule checked at n evenly spaced checkpoints.

    "k times the reference" reads as exceeding the reference by (k - 1)|ref|,
    which is k * ref for a positive reference and stays above ref for the
    negative costs of OIM. Above that threshold the rule pushes with
    magnitude c, towards the target for LSOG or uniformly upwards for OIM,
    until the next checkpoint.
    """

    def __init__(self, problem: ControlProblem, reference_cost_path, config: GreedyConfig):
        self.problem = problem
        self.config = config
        grid = problem.grid
        m = grid.size - 1
        n = int(config.n_checkpoints)
        self.checkpoints = np.unique(np.floor(np.arange(n) * m / n).astype(int))
        reference = np.asarray(reference_cost_path, dtype=float).reshape(-1)
        if reference.size == grid.size:
            reference = reference[self.checkpoints]
        if reference.size != self.checkpoints.size:
            raise ValidationError(
                f"reference cost path needs {self.checkpoints.size} checkpoint values or {grid.size} grid values")
        if not np.all(np.isfinite(reference)):
            raise ValidationError("reference cost path has non-finite entries")
        self.reference = reference
        self._next = 0
        self._held: Optional[np.ndarray] = None
        self.triggers = 0

    def bind(self, events) -> "GreedyPolicy":
        fresh = copy.copy(self)
        fresh._next = 0
        fresh._held = None
        fresh.triggers = 0
        return fresh

    def _pulse(self, x: np.ndarray) -> np.ndarray:
        c = self.config.c
        if self.problem.kind is ObjectiveKind.OIM:
            return np.full(x.shape, c)
        gap = self.problem.target - x
        norm = float(np.linalg.norm(gap))
        if norm == 0:
            return np.zeros(x.shape)
        return c * gap / norm

    def evaluate(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k = _interval_index(self.problem.grid, t)
        if self._held is None:
            self._held = np.zeros(x.shape)
        while self._next < self.checkpoints.size and k >= self.checkpoints[self._next]:
            ref = self.reference[self._next]
            threshold = ref + (self.config.k - 1) * abs(ref)
            if self.problem.state_cost(x) > threshold:
                self._held = self._pulse(x)
                self.triggers += 1
            else:
                self._held = np.zeros(x.shape)
            self._next += 1
        return self._held.copy()


def greedy_policy(problem: ControlProblem, params: OpinionParams, reference_cost_path,
                  config: GreedyConfig) -> GreedyPolicy:
    problem.check_users(params.num_users)
    return GreedyPolicy(problem, reference_cost_path, config)


def constant_levels(low: float, high: float, n_levels: int = CONSTANT_LEVELS) -> np.ndarray:
    if not high > low:
        raise ValidationError(f"level range [{low}, {high}] is empty")
    return np.linspace(low, high, n_levels)


def constant_grid_search(problem: ControlProblem, params: OpinionParams, hawkes: HawkesParams, x0,
                         levels, n_runs: int, seed: int, scenarios: Optional[Sequence[Scenario]] = None,
                         workers: int = 1) -> Tuple[ConstantPolicy, np.ndarray]:
    """Best uniform constant control u = level * 1 over the given levels.

    Returns the policy and the mean cost of every level; ties go to the lowest level.
    """
    levels = np.asarray(levels, dtype=float)
    if levels.ndim != 1 or levels.size < 1:
        raise ValidationError("need at least one control level")
    if scenarios is None:
        scenarios = draw_scenarios(hawkes, problem.grid, seed, n_runs)

    def run(level: float) -> float:
        policy = ConstantPolicy(np.full(params.num_users, level))
        return monte_carlo_cost(policy, problem, params, hawkes, x0, n_runs, seed, scenarios=scenarios).mean

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            costs = np.array(list(executor.map(run, levels)))
    else:
        costs = np.array([run(level) for level in levels])
    best = int(np.argmin(costs))
    logger.info(f"constant search: best level {levels[best]:.4g} with cost {costs[best]:.6g}")
    return ConstantPolicy(np.full(params.num_users, levels[best])), costs
