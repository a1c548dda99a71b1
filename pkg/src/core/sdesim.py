"""Forward Euler simulation of the controlled jump-diffusion SDEs and Monte-Carlo cost evaluation."""
import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import NumericalError, SimulationExplosion, ValidationError
from .integrate import check_grid
from .network import ControlProblem, HawkesParams, HMode, NetworkTopology, ObjectiveKind, OpinionParams
from .pointproc import EventLog, IntensityState, thinning_simulate
from ..utils.random_utils import EVENTS_STREAM, NOISE_STREAM, RUNS_STREAM, derive_seed, make_rng

logger = logging.getLogger(__name__)

TopologyAt = Callable[[float], NetworkTopology]


class Policy(ABC):
    """Maps the current state x(t) to a control vector"""

    @abstractmethod
    def evaluate(self, x: np.ndarray, t: float) -> np.ndarray:
        ...

    def bind(self, events: EventLog) -> "Policy":
        """Instance to drive one run; stateful policies return a fresh copy"""
        return self


@dataclass(frozen=True, eq=False)
class Trajectory:
    grid: np.ndarray
    x: np.ndarray
    u: np.ndarray
    events: EventLog
    noise_seed: Optional[int] = None

    def __post_init__(self):
        expected = (len(self.grid), self.events.num_users)
        if self.x.shape != expected or self.u.shape != expected:
            raise ValidationError(f"trajectory arrays must have shape {expected}")

    @property
    def num_users(self) -> int:
        return self.x.shape[1]

    @property
    def x0(self) -> np.ndarray:
        return self.x[0]


@dataclass(frozen=True)
class CostBreakdown:
    state_cost: float
    control_cost: float
    terminal_cost: float
    total: float = field(init=False)

    def __post_init__(self):
        if self.control_cost < 0:
            raise ValidationError("control cost cannot be negative")
        object.__setattr__(self, "total", self.state_cost + self.control_cost + self.terminal_cost)

    def to_dict(self) -> Dict[str, float]:
        return {
            "state_cost": self.state_cost,
            "control_cost": self.control_cost,
            "terminal_cost": self.terminal_cost,
            "total": self.total,
        }


@dataclass(frozen=True, eq=False)
class Scenario:
    """One run's randomness: the event log and the Wiener increments"""
    events: EventLog
    dw: np.ndarray
    noise_seed: int
    seed: int


@dataclass
class MonteCarloResult:
    mean: float
    variance: float
    variance_defined: bool
    runs: List[CostBreakdown]
    trajectories: List[Trajectory] = field(default_factory=list, repr=False)

    @property
    def n_runs(self) -> int:
        return len(self.runs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_runs": self.n_runs,
            "mean": self.mean,
            "variance": self.variance,
            "variance_defined": self.variance_defined,
            "runs": [run.to_dict() for run in self.runs],
        }


def wiener_increments(noise_seed: int, grid, num_users: int) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    dt = np.diff(grid)
    rng = make_rng(noise_seed)
    return rng.standard_normal((dt.size, num_users)) * np.sqrt(dt)[:, None]


def _euler_run(params: OpinionParams, policy: Policy, events: EventLog, x0, grid: np.ndarray,
               dw: np.ndarray, noise_seed: Optional[int],
               topology_at: Optional[TopologyAt] = None) -> Trajectory:
    n = params.num_users
    x0 = np.asarray(x0, dtype=float)
    if x0.shape == ():
        x0 = np.full(n, float(x0))
    if x0.shape != (n,):
        raise ValidationError(f"x0 has shape {x0.shape}, expected ({n},)")
    if events.num_users != n:
        raise ValidationError(f"event log has {events.num_users} users, model has {n}")
    if events.t0 > grid[0] or events.horizon_end < grid[-1]:
        raise ValidationError("event log horizon does not cover the grid")

    counts = events.counts_on_grid(grid)
    adjacency = params.topology.adjacency
    linear = params.h_mode is HMode.LINEAR
    runner = policy.bind(events)

    x = np.empty((grid.size, n))
    u = np.empty((grid.size, n))
    x[0] = x0
    for k in range(grid.size - 1):
        xk = x[k]
        uk = np.asarray(runner.evaluate(xk, grid[k]), dtype=float)
        u[k] = uk
        dt = grid[k + 1] - grid[k]
        step = xk + (params.omega2 * (params.b - xk) + uk) * dt + params.theta * dw[k]
        if counts[k].any():
            # jumps use the pre-step state
            if topology_at is not None:
                adjacency = topology_at(float(grid[k])).adjacency
            step = step + adjacency @ (counts[k] * xk if linear else counts[k])
        if not np.all(np.isfinite(step)):
            raise SimulationExplosion("non-finite opinion state", step=k + 1, time=grid[k + 1])
        x[k + 1] = step
    u[-1] = np.asarray(runner.evaluate(x[-1], grid[-1]), dtype=float)
    return Trajectory(grid, x, u, events, noise_seed)


def euler_simulate(params: OpinionParams, policy: Policy, events: EventLog, x0, grid,
                   noise_seed: int) -> Trajectory:
    """x(k+1) = x(k) + (omega2 (b - x(k)) + u(k)) dt + theta dw(k) + sum_j a_j h(x_j(k)) dN_j(k)"""
    grid = check_grid(grid)
    dw = wiener_increments(noise_seed, grid, params.num_users)
    return _euler_run(params, policy, events, x0, grid, dw, noise_seed)


def draw_scenario(hawkes: HawkesParams, grid, seed: int) -> Scenario:
    grid = check_grid(grid)
    events = thinning_simulate(hawkes, (grid[0], grid[-1]), derive_seed(seed, EVENTS_STREAM))
    noise_seed = derive_seed(seed, NOISE_STREAM)
    return Scenario(events, wiener_increments(noise_seed, grid, hawkes.num_users), noise_seed, seed)


def simulate_scenario(params: OpinionParams, policy: Policy, scenario: Scenario, x0, grid,
                      topology_at: Optional[TopologyAt] = None) -> Trajectory:
    """Euler run on a pre-drawn scenario; topology_at(t) replaces the static adjacency for the jumps"""
    return _euler_run(params, policy, scenario.events, x0, check_grid(grid), scenario.dw, scenario.noise_seed,
                      topology_at)


def cosimulate(params: OpinionParams, hawkes: HawkesParams, policy: Policy, x0, grid, seed: int) -> Trajectory:
    """Thinning for the events, then the Euler scheme; one seed split into both streams"""
    if hawkes.num_users != params.num_users:
        raise ValidationError("Hawkes and opinion models disagree on the number of users")
    return simulate_scenario(params, policy, draw_scenario(hawkes, grid, seed), x0, grid)


def simulate_controlled_intensity(hawkes: HawkesParams, policy: Policy, grid, seed: int,
                                  lam0: Optional[np.ndarray] = None,
                                  max_events: int = 10_000_000) -> Trajectory:
    """Controlled Hawkes intensity: dlam = (omega1 (eta - lam) + u) dt + sum_j beta_.j dN_j.

    The control is held over each grid interval. Inside an interval the
    intensity relaxes exactly towards eta + u / omega1 and events are drawn by
    thinning against it; the intensity is clamped at zero at every grid point.
    """
    grid = check_grid(grid)
    rng = make_rng(seed)
    n = hawkes.num_users
    decay = hawkes.omega1
    state = IntensityState(np.array(hawkes.eta if lam0 is None else lam0, dtype=float), float(grid[0]))
    if state.lam.shape != (n,):
        raise ValidationError(f"lam0 has shape {state.lam.shape}, expected ({n},)")

    x = np.empty((grid.size, n))
    u = np.empty((grid.size, n))
    times: List[float] = []
    users: List[int] = []
    runner = policy.bind(EventLog.empty(grid[0], grid[-1], n))

    for k in range(grid.size - 1):
        x[k] = state.lam
        uk = np.asarray(runner.evaluate(state.lam.copy(), grid[k]), dtype=float)
        u[k] = uk
        level = hawkes.eta + uk / decay
        end = grid[k + 1]
        while True:
            bound = float(np.sum(np.maximum(np.maximum(state.lam, level), 0.0)))
            if bound <= 0:
                break
            t = state.last_time + rng.exponential(1.0 / bound)
            if t >= end:
                break
            lam = level + (state.lam - level) * np.exp(-decay * (t - state.last_time))
            active = np.maximum(lam, 0.0)
            total = float(np.sum(active))
            assert total <= bound * (1 + 1e-12), "thinning bound below the intensity"
            if rng.random() * bound <= total:
                user = min(int(np.searchsorted(np.cumsum(active), rng.random() * total, side="right")), n - 1)
                times.append(t)
                users.append(user)
                if len(times) > max_events:
                    raise SimulationExplosion(f"more than {max_events} events under control", step=k, time=t)
                lam = lam + hawkes.topology.column_of(user)
            state = IntensityState(lam, t)
        lam_end = level + (state.lam - level) * np.exp(-decay * (end - state.last_time))
        if not np.all(np.isfinite(lam_end)):
            raise SimulationExplosion("non-finite intensity", step=k + 1, time=end)
        state = IntensityState(np.maximum(lam_end, 0.0), float(end))

    x[-1] = state.lam
    u[-1] = np.asarray(runner.evaluate(state.lam.copy(), grid[-1]), dtype=float)
    events = EventLog(np.array(times), np.array(users, dtype=np.int64), grid[0], grid[-1], n, seed)
    return Trajectory(grid, x, u, events, seed)


def _check_trajectory(traj: Trajectory, problem: ControlProblem) -> None:
    if traj.grid.shape != problem.grid.shape or not np.allclose(traj.grid, problem.grid, rtol=0, atol=1e-12):
        raise ValidationError("trajectory grid differs from the problem grid")
    problem.check_users(traj.num_users)


def instantaneous_cost(traj: Trajectory, problem: ControlProblem) -> np.ndarray:
    """q(x(tau_k)) + rho/2 ||u(tau_k)||^2 at every grid point"""
    _check_trajectory(traj, problem)
    control = 0.5 * problem.rho * np.sum(traj.u ** 2, axis=1)
    return np.array([problem.state_cost(xk) for xk in traj.x]) + control


def evaluate_cost(traj: Trajectory, problem: ControlProblem) -> CostBreakdown:
    """Left-endpoint rectangle quadrature of the running cost plus the terminal cost"""
    _check_trajectory(traj, problem)
    dt = np.diff(traj.grid)
    left_x = traj.x[:-1]
    left_u = traj.u[:-1]

    if problem.kind is ObjectiveKind.LSOG:
        per_step = 0.5 * np.sum((left_x - problem.target) ** 2, axis=1)
    else:
        per_step = -np.sum(left_x, axis=1)
    state_cost = float(per_step @ dt) if problem.running_state_cost else 0.0
    control_cost = float((0.5 * problem.rho * np.sum(left_u ** 2, axis=1)) @ dt)
    terminal_cost = problem.state_cost(traj.x[-1])
    return CostBreakdown(state_cost, control_cost, terminal_cost)


def draw_scenarios(hawkes: HawkesParams, grid, seed: int, n_runs: int) -> List[Scenario]:
    return [draw_scenario(hawkes, grid, derive_seed(seed, RUNS_STREAM, r)) for r in range(n_runs)]


def _summarise(runs: List[CostBreakdown], trajectories: List[Trajectory]) -> MonteCarloResult:
    totals = np.array([run.total for run in runs])
    if totals.size > 1:
        return MonteCarloResult(float(np.mean(totals)), float(np.var(totals, ddof=1)), True, runs, trajectories)
    return MonteCarloResult(float(totals[0]), 0.0, False, runs, trajectories)


def monte_carlo_cost(policy: Policy, problem: ControlProblem, params: OpinionParams, hawkes: HawkesParams,
                     x0, n_runs: int, seed: int, workers: int = 1,
                     scenarios: Optional[Sequence[Scenario]] = None,
                     keep_trajectories: bool = False,
                     topology_at: Optional[TopologyAt] = None) -> MonteCarloResult:
    """Mean and unbiased variance of the total cost over n_runs independent runs.

    Run r draws its events and noise from derive_seed(seed, RUNS_STREAM, r), so
    every policy evaluated with the same seed sees the same randomness.
    """
    if n_runs < 1:
        raise ValidationError(f"n_runs must be at least 1, got {n_runs}")
    problem.check_users(params.num_users)
    grid = problem.grid
    if scenarios is not None and len(scenarios) < n_runs:
        raise ValidationError(f"{len(scenarios)} scenarios given for {n_runs} runs")

    def run(r: int):
        try:
            if scenarios is not None:
                scenario = scenarios[r]
            else:
                scenario = draw_scenario(hawkes, grid, derive_seed(seed, RUNS_STREAM, r))
            traj = simulate_scenario(params, policy, scenario, x0, grid, topology_at)
        except NumericalError as exc:
            raise exc.in_run(r) from exc
        return evaluate_cost(traj, problem), traj

    if workers > 1 and n_runs > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(run, range(n_runs)))
    else:
        outcomes = [run(r) for r in range(n_runs)]

    runs = [cost for cost, _ in outcomes]
    trajectories = [traj for _, traj in outcomes] if keep_trajectories else []
    return _summarise(runs, trajectories)
