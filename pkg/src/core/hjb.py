"""Backward HJB coefficient ODEs, the optimal feedback policy and the generalised Ito check."""
import copy
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import NumericalError, RiccatiBlowUp, ValidationError
from .integrate import SolverConfig, check_grid, rk_integrate
from .network import (
    ControlProblem, HawkesParams, HMode, NetworkTopology, ObjectiveKind, OpinionParams,
    assemble_lambda_matrix, contraction_diagonal,
)
from .pointproc import EventLog, intensity_at, mean_intensity_path
from .sdesim import Policy
from ..utils.random_utils import make_rng

logger = logging.getLogger(__name__)

__all__ = [
    "SolverConfig", "rk_integrate", "ValueCoefficients", "QuadraticForm", "ItoCheck",
    "solve_lsog", "solve_oim", "solve", "solve_activity", "cost_offset", "feedback_control",
    "FeedbackPolicy", "ReplanPolicy", "hjb_residual", "verify_ito_drift",
]

RICCATI_NORM_GUARD = 1e6
SYMMETRY_TOL = 1e-10

TopologyAt = Callable[[float], NetworkTopology]


@dataclass(frozen=True, eq=False)
class ValueCoefficients:
    grid: np.ndarray
    v0: np.ndarray
    v1: np.ndarray
    v11: Optional[np.ndarray]
    kind: ObjectiveKind

    def __post_init__(self):
        object.__setattr__(self, "kind", ObjectiveKind(self.kind))
        m = len(self.grid)
        if self.v0.shape != (m,) or self.v1.ndim != 2 or self.v1.shape[0] != m:
            raise ValidationError("coefficient paths do not match the grid")
        arrays = [self.v0, self.v1]
        if self.kind is ObjectiveKind.LSOG:
            if self.v11 is None or self.v11.shape != (m, self.num_users, self.num_users):
                raise ValidationError("LSOG coefficients need a v11 path")
            arrays.append(self.v11)
        elif self.v11 is not None:
            raise ValidationError("OIM coefficients carry no v11 path")
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise NumericalError("coefficient path has non-finite entries")
        for a in arrays:
            a.setflags(write=False)

    @property
    def num_users(self) -> int:
        return self.v1.shape[1]

    def _bracket(self, t: float) -> Tuple[int, float]:
        grid = self.grid
        span = 1e-9 * max(1.0, abs(grid[-1]))
        if t < grid[0] - span or t > grid[-1] + span:
            raise ValidationError(f"t={t} outside the coefficient span [{grid[0]}, {grid[-1]}]")
        k = int(np.clip(np.searchsorted(grid, t, side="right") - 1, 0, len(grid) - 2))
        weight = float(np.clip((t - grid[k]) / (grid[k + 1] - grid[k]), 0.0, 1.0))
        return k, weight

    def at(self, t: float) -> Tuple[float, np.ndarray, Optional[np.ndarray]]:
        """(v0, v1, v11) at t, linear in t between grid points"""
        k, w = self._bracket(t)
        v0 = (1 - w) * self.v0[k] + w * self.v0[k + 1]
        v1 = (1 - w) * self.v1[k] + w * self.v1[k + 1]
        v11 = None
        if self.v11 is not None:
            v11 = (1 - w) * self.v11[k] + w * self.v11[k + 1]
        return float(v0), v1, v11

    def gradient(self, x: np.ndarray, t: float) -> np.ndarray:
        _, v1, v11 = self.at(t)
        return v1 if v11 is None else v1 + v11 @ x

    def value(self, x: np.ndarray, t: float) -> float:
        v0, v1, v11 = self.at(t)
        value = v0 + float(v1 @ x)
        if v11 is not None:
            value += 0.5 * float(x @ v11 @ x)
        return value


def cost_offset(problem: ControlProblem) -> float:
    """Constant 1/2 a'a terms the value coefficients leave out (LSOG); zero for OIM"""
    if problem.kind is not ObjectiveKind.LSOG:
        return 0.0
    half_norm = 0.5 * float(problem.target @ problem.target)
    running = (problem.horizon_end - problem.t0) if problem.running_state_cost else 0.0
    return half_norm * (1.0 + running)


def _lam_interpolator(grid: np.ndarray, lam_path, num_users: int) -> Callable[[float], np.ndarray]:
    lam_path = np.asarray(lam_path, dtype=float)
    if lam_path.ndim == 1:
        lam_path = np.broadcast_to(lam_path, (grid.size, lam_path.size))
    if lam_path.shape != (grid.size, num_users):
        raise ValidationError(f"intensity path has shape {lam_path.shape}, expected {(grid.size, num_users)}")
    if np.any(lam_path < 0):
        raise ValidationError("intensity path has negative entries")

    def lam_at(t: float) -> np.ndarray:
        k = int(np.clip(np.searchsorted(grid, t, side="right") - 1, 0, grid.size - 2))
        w = min(max((t - grid[k]) / (grid[k + 1] - grid[k]), 0.0), 1.0)
        return (1 - w) * lam_path[k] + w * lam_path[k + 1]

    return lam_at


def _guard_riccati(v11: np.ndarray, t: float) -> None:
    norm = float(np.linalg.norm(v11))
    if norm > RICCATI_NORM_GUARD:
        raise RiccatiBlowUp(
            f"Riccati solution diverged (|v11|_F={norm:.3g}); shrink the horizon or increase rho", time=t)


def _pack(v0: float, v1: np.ndarray, v11: Optional[np.ndarray] = None) -> np.ndarray:
    parts = [np.atleast_1d(float(v0)), v1]
    if v11 is not None:
        parts.append(v11.reshape(-1))
    return np.concatenate(parts)


def _unpack(y: np.ndarray, n: int, quadratic: bool):
    v0, v1 = y[0], y[1:n + 1]
    v11 = y[n + 1:].reshape(n, n) if quadratic else None
    return v0, v1, v11


def _coefficients_from_path(problem: ControlProblem, path: np.ndarray, n: int) -> ValueCoefficients:
    quadratic = problem.kind is ObjectiveKind.LSOG
    v0 = path[:, 0].copy()
    v1 = path[:, 1:n + 1].copy()
    v11 = path[:, n + 1:].reshape(-1, n, n).copy() if quadratic else None
    if v11 is not None:
        asym = float(np.max(np.abs(v11 - np.transpose(v11, (0, 2, 1)))))
        if asym > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(v11)))):
            raise NumericalError(f"v11 lost symmetry ({asym:.3g})")
    return ValueCoefficients(problem.grid.copy(), v0, v1, v11, problem.kind)


def _setup(problem: ControlProblem, num_users: int, lam_path, topology_at: Optional[TopologyAt],
           default_topology: NetworkTopology):
    problem.check_users(num_users)
    grid = check_grid(problem.grid)
    lam_at = _lam_interpolator(grid, lam_path, num_users)
    topology_at = topology_at or (lambda t: default_topology)
    return grid, lam_at, topology_at, (1.0 if problem.running_state_cost else 0.0)


def solve_lsog(problem: ControlProblem, params: OpinionParams, lam_path,
               config: Optional[SolverConfig] = None,
               topology_at: Optional[TopologyAt] = None) -> ValueCoefficients:
    """Backward Riccati triple for least-squares guiding of the opinion SDE.

    -v11' = cI - 2 w v11 + v11 Lam + Lam'v11 - v11^2/rho + D(lam, v11)
    -v1'  = -c a + (-w + Lam' - v11/rho) v1 + w v11 b
    -v0'  = w b'v1 + theta^2/2 tr(v11) - v1'v1/(2 rho)
    with w = omega2, c = 1 when the running state cost is on, and terminal
    values v11(T) = I, v1(T) = -a, v0(T) = 0. For the unit jump mode the
    Lam / D terms move to the linear and scalar coefficients.
    """
    if problem.kind is not ObjectiveKind.LSOG:
        raise ValidationError("solve_lsog needs an LSOG problem")
    n = params.num_users
    grid, lam_at, topology_at, c = _setup(problem, n, lam_path, topology_at, params.topology)
    a, b, w, rho = problem.target, params.b, params.omega2, problem.rho
    half_theta2 = 0.5 * params.theta ** 2
    eye = np.eye(n)
    linear = params.h_mode is HMode.LINEAR

    def field(t: float, y: np.ndarray) -> np.ndarray:
        v0, v1, v11 = _unpack(y, n, quadratic=True)
        _guard_riccati(v11, t)
        lam = lam_at(t)
        topology = topology_at(t)
        square = v11 @ v11
        square = 0.5 * (square + square.T)
        diag = contraction_diagonal(topology, lam, v11)
        r11 = c * eye - 2.0 * w * v11 - square / rho
        r1 = -c * a - w * v1 + w * (v11 @ b) - (v11 @ v1) / rho
        r0 = w * float(b @ v1) + half_theta2 * float(np.trace(v11)) - float(v1 @ v1) / (2.0 * rho)
        if linear:
            lam_matrix = assemble_lambda_matrix(topology, lam)
            coupling = v11 @ lam_matrix
            r11 = r11 + coupling + coupling.T + np.diag(diag)
            r1 = r1 + lam_matrix.T @ v1
        else:
            pushed = topology.adjacency @ lam
            r1 = r1 + v11 @ pushed
            r0 = r0 + float(pushed @ v1) + 0.5 * float(np.sum(diag))
        return -_pack(r0, r1, r11)

    logger.info(f"solving LSOG coefficients: U={n}, rho={rho}, {len(grid) - 1} intervals")
    path = rk_integrate(field, _pack(0.0, -a, eye), grid, config, direction="backward")
    return _coefficients_from_path(problem, path, n)


def solve_oim(problem: ControlProblem, params: OpinionParams, lam_path,
              config: Optional[SolverConfig] = None,
              topology_at: Optional[TopologyAt] = None) -> ValueCoefficients:
    """Backward linear pair for opinion influence maximisation.

    v1' = c 1 + w v1 - Lam' v1,  v0' = -w v1'b + v1'v1/(2 rho),
    v1(T) = -1, v0(T) = 0.
    """
    if problem.kind is not ObjectiveKind.OIM:
        raise ValidationError("solve_oim needs an OIM problem")
    n = params.num_users
    grid, lam_at, topology_at, c = _setup(problem, n, lam_path, topology_at, params.topology)
    b, w, rho = params.b, params.omega2, problem.rho
    ones = np.ones(n)
    linear = params.h_mode is HMode.LINEAR

    def field(t: float, y: np.ndarray) -> np.ndarray:
        _, v1, _ = _unpack(y, n, quadratic=False)
        lam = lam_at(t)
        topology = topology_at(t)
        r1 = -c * ones - w * v1
        r0 = w * float(b @ v1) - float(v1 @ v1) / (2.0 * rho)
        if linear:
            # Lam' v1 = diag(lam) A' v1
            r1 = r1 + lam * (topology.adjacency.T @ v1)
        else:
            r0 = r0 + float((topology.adjacency @ lam) @ v1)
        return -_pack(r0, r1)

    logger.info(f"solving OIM coefficients: U={n}, rho={rho}, {len(grid) - 1} intervals")
    path = rk_integrate(field, _pack(0.0, -ones), grid, config, direction="backward")
    return _coefficients_from_path(problem, path, n)


def solve(problem: ControlProblem, params: OpinionParams, lam_path,
          config: Optional[SolverConfig] = None,
          topology_at: Optional[TopologyAt] = None) -> ValueCoefficients:
    if problem.kind is ObjectiveKind.LSOG:
        return solve_lsog(problem, params, lam_path, config, topology_at)
    return solve_oim(problem, params, lam_path, config, topology_at)


def solve_activity(problem: ControlProblem, hawkes: HawkesParams,
                   config: Optional[SolverConfig] = None) -> ValueCoefficients:
    """Coefficients for guiding the Hawkes intensity itself.

    State lam, drift omega1 (eta - lam) + u, jump beta_.j at rate lam_j. The
    jump rate being the state, the expected jump B lam enters the linear part
    of the dynamics and d_j = 1/2 beta_j' v11 beta_j the linear coefficient.
    """
    n = hawkes.num_users
    problem.check_users(n)
    grid = check_grid(problem.grid)
    c = 1.0 if problem.running_state_cost else 0.0
    eta, w, rho = hawkes.eta, hawkes.omega1, problem.rho
    excitation = hawkes.topology.adjacency
    ones = np.ones(n)

    if problem.kind is ObjectiveKind.LSOG:
        a = problem.target
        eye = np.eye(n)

        def field(t: float, y: np.ndarray) -> np.ndarray:
            v0, v1, v11 = _unpack(y, n, quadratic=True)
            _guard_riccati(v11, t)
            square = v11 @ v11
            square = 0.5 * (square + square.T)
            coupling = np.asarray((excitation.T @ v11).T)
            jump_half = 0.5 * contraction_diagonal(hawkes.topology, ones, v11)
            r11 = c * eye - 2.0 * w * v11 + coupling + coupling.T - square / rho
            r1 = (-c * a - w * v1 + w * (v11 @ eta) + excitation.T @ v1 + jump_half
                  - (v11 @ v1) / rho)
            r0 = w * float(eta @ v1) - float(v1 @ v1) / (2.0 * rho)
            return -_pack(r0, r1, r11)

        terminal = _pack(0.0, -a, eye)
    else:
        def field(t: float, y: np.ndarray) -> np.ndarray:
            _, v1, _ = _unpack(y, n, quadratic=False)
            r1 = -c * ones - w * v1 + excitation.T @ v1
            r0 = w * float(eta @ v1) - float(v1 @ v1) / (2.0 * rho)
            return -_pack(r0, r1)

        terminal = _pack(0.0, -ones)

    logger.info(f"solving {problem.kind.value} activity coefficients: U={n}, rho={rho}")
    path = rk_integrate(field, terminal, grid, config, direction="backward")
    return _coefficients_from_path(problem, path, n)


def feedback_control(coeffs: ValueCoefficients, x: np.ndarray, t: float, rho: float) -> np.ndarray:
    """u* = -(v1(t) + v11(t) x) / rho, or -v1(t) / rho for OIM"""
    if not rho > 0:
        raise ValidationError(f"rho must be positive, got {rho}")
    return -coeffs.gradient(np.asarray(x, dtype=float), t) / rho


class FeedbackPolicy(Policy):
    def __init__(self, coeffs: ValueCoefficients, rho: float, active_from: Optional[np.ndarray] = None):
        self.coeffs = coeffs
        self.rho = rho
        self.active_from = None if active_from is None else np.asarray(active_from, dtype=float)

    def evaluate(self, x: np.ndarray, t: float) -> np.ndarray:
        u = feedback_control(self.coeffs, x, t, self.rho)
        if self.active_from is not None:
            # nodes that have not joined yet are left alone
            u = np.where(t >= self.active_from, u, 0.0)
        return u


class ReplanPolicy(Policy):
    """Receding-horizon feedback: re-solve on the remaining grid after new events.

    The intensity path for each re-solve starts from the realised intensity
    and continues with the mean-field ODE. At most one re-solve per grid
    interval.
    """

    def __init__(self, problem: ControlProblem, params: OpinionParams, hawkes: HawkesParams,
                 config: Optional[SolverConfig] = None, active_from: Optional[np.ndarray] = None,
                 topology_at: Optional[TopologyAt] = None):
        self.problem = problem
        self.params = params
        self.hawkes = hawkes
        self.config = config
        self.active_from = active_from
        self.topology_at = topology_at
        lam_path = mean_intensity_path(hawkes, problem.grid, config)
        self._initial = FeedbackPolicy(solve(problem, params, lam_path, config, topology_at), problem.rho,
                                       active_from)
        self._events: Optional[EventLog] = None
        self._current = self._initial
        self._seen = 0
        self._last_interval = 0
        self.replans = 0

    def bind(self, events: EventLog) -> "ReplanPolicy":
        bound = copy.copy(self)
        bound._events = events
        bound._current = self._initial
        bound._seen = 0
        bound._last_interval = 0
        bound.replans = 0
        return bound

    def _replan(self, k: int, t: float) -> None:
        grid = self.problem.grid
        remaining = ControlProblem(self.problem.kind, self.problem.rho, float(grid[k]), float(grid[-1]),
                                   len(grid) - 1 - k, self.problem.target, self.problem.running_state_cost,
                                   self.problem.num_users)
        lam_now = intensity_at(self.hawkes, self._events, t)
        lam_path = mean_intensity_path(self.hawkes, remaining.grid, self.config, initial=lam_now)
        coeffs = solve(remaining, self.params, lam_path, self.config, self.topology_at)
        self._current = FeedbackPolicy(coeffs, self.problem.rho, self.active_from)
        self.replans += 1
        logger.debug(f"replanned at t={t:.4g} after {self._seen} events")

    def evaluate(self, x: np.ndarray, t: float) -> np.ndarray:
        if self._events is not None:
            grid = self.problem.grid
            k = int(np.clip(np.searchsorted(grid, t, side="right") - 1, 0, len(grid) - 1))
            seen = self._events.count_before(t)
            if seen > self._seen and k > self._last_interval and k < len(grid) - 1:
                self._seen = seen
                self._last_interval = k
                self._replan(k, t)
        return self._current.evaluate(x, t)


def hjb_residual(coeffs: ValueCoefficients, problem: ControlProblem, params: OpinionParams,
                 lam: np.ndarray, x: np.ndarray, k: int) -> Tuple[float, float]:
    """(residual, |V|) of the LSOG HJB equation at grid index k.

    V_t comes from a fourth-order central difference of the solved path and the
    jump expectation is summed user by user, so the check is independent of
    the coefficient ODEs. The constant 1/2 a'a is left out of the running
    cost, as it is left out of v0.
    """
    if coeffs.kind is not ObjectiveKind.LSOG:
        raise ValidationError("the residual check is defined for LSOG coefficients")
    if not 2 <= k <= len(coeffs.grid) - 3:
        raise ValidationError("grid index needs two neighbours on each side")
    h = coeffs.grid[1] - coeffs.grid[0]
    t = float(coeffs.grid[k])

    def value(j: int, state: np.ndarray) -> float:
        return float(coeffs.v0[j] + coeffs.v1[j] @ state + 0.5 * state @ coeffs.v11[j] @ state)

    v_t = (-value(k + 2, x) + 8 * value(k + 1, x) - 8 * value(k - 1, x) + value(k - 2, x)) / (12 * h)
    grad = coeffs.v1[k] + coeffs.v11[k] @ x
    u = -grad / problem.rho
    c = 1.0 if problem.running_state_cost else 0.0
    running = c * (0.5 * float(x @ x) - float(x @ problem.target)) + 0.5 * problem.rho * float(u @ u)
    drift = params.omega2 * (params.b - x) + u
    diffusion = 0.5 * params.theta ** 2 * float(np.trace(coeffs.v11[k]))

    base = value(k, x)
    jumps = 0.0
    for j in range(params.num_users):
        column = params.topology.column_of(j)
        if lam[j] == 0 or not column.any():
            continue
        kick = column * x[j] if params.h_mode is HMode.LINEAR else column
        jumps += lam[j] * (value(k, x + kick) - base)

    residual = -v_t - (running + diffusion + float(grad @ drift) + jumps)
    return residual, abs(base)


@dataclass(frozen=True)
class QuadraticForm:
    """V(x) = v0 + v1'x + 1/2 x'v11 x at a fixed time"""
    v0: float
    v1: np.ndarray
    v11: np.ndarray

    def value(self, x: np.ndarray) -> np.ndarray:
        """Works row-wise on a (samples, U) array"""
        x = np.asarray(x, dtype=float)
        return self.v0 + x @ self.v1 + 0.5 * np.einsum("...i,ij,...j->...", x, self.v11, x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.v1 + self.v11 @ x


@dataclass(frozen=True)
class ItoCheck:
    analytic: float
    mc_estimate: float
    standard_error: float

    def within(self, n_errors: float = 3.0) -> bool:
        return abs(self.analytic - self.mc_estimate) <= n_errors * self.standard_error


def verify_ito_drift(v: QuadraticForm, params: OpinionParams, lam: np.ndarray, x: np.ndarray,
                     dt: float = 1e-3, n_samples: int = 10_000, seed: int = 0,
                     u: Optional[np.ndarray] = None, v_dot: Optional[QuadraticForm] = None) -> ItoCheck:
    """Compare the generalised Ito drift of V with a one-step Monte-Carlo estimate.

    analytic = V_t + 1/2 tr(V_xx g g') + V_x'(f + u) + sum_j lam_j (V(x + h_j(x)) - V(x));
    the estimate is the sample mean of (V(x(t+dt), t+dt) - V(x, t)) / dt over
    one Euler step with Poisson(lam_j dt) jump counts.
    """
    if not dt > 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    if n_samples < 2:
        raise ValidationError(f"n_samples must be at least 2, got {n_samples}")
    n = params.num_users
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    u = np.zeros(n) if u is None else np.asarray(u, dtype=float)
    zero = QuadraticForm(0.0, np.zeros(n), np.zeros((n, n)))
    v_dot = v_dot or zero
    linear = params.h_mode is HMode.LINEAR
    adjacency = params.topology.dense()

    drift = params.omega2 * (params.b - x) + u
    base = float(v.value(x))
    jumps = 0.0
    for j in range(n):
        kick = adjacency[:, j] * (x[j] if linear else 1.0)
        jumps += lam[j] * (float(v.value(x + kick)) - base)
    analytic = (float(v_dot.value(x)) + 0.5 * params.theta ** 2 * float(np.trace(v.v11))
                + float(v.gradient(x) @ drift) + jumps)

    rng = make_rng(seed)
    dw = rng.standard_normal((n_samples, n)) * np.sqrt(dt)
    counts = rng.poisson(lam * dt, size=(n_samples, n)).astype(float)
    pushed = counts * x if linear else counts
    x_next = x + drift * dt + params.theta * dw + pushed @ adjacency.T
    increments = (v.value(x_next) + dt * v_dot.value(x_next) - base) / dt
    estimate = float(np.mean(increments))
    error = float(np.std(increments, ddof=1) / np.sqrt(n_samples))
    return ItoCheck(analytic, estimate, error)
