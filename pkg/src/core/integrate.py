"""Runge-Kutta integration of time-dependent vector fields sampled on a grid."""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import IntegrationError, ValidationError

logger = logging.getLogger(__name__)

FIXED_RK4 = "fixed_rk4"
DORMAND_PRINCE = "dp45"
_METHOD_ALIASES = {
    "fixed_rk4": FIXED_RK4,
    "rk4": FIXED_RK4,
    "dp45": DORMAND_PRINCE,
    "dormand_prince_45": DORMAND_PRINCE,
}

Field = Callable[[float, np.ndarray], np.ndarray]
Monitor = Callable[[float, np.ndarray], None]


@dataclass(frozen=True)
class SolverConfig:
    method: str = FIXED_RK4
    step: Optional[float] = None  # fixed_rk4 only; None means one step per grid interval
    abs_tol: float = 1e-10
    rel_tol: float = 1e-8
    max_steps: int = 100_000

    def __post_init__(self):
        method = _METHOD_ALIASES.get(str(self.method).lower())
        if method is None:
            raise ValidationError(f"unknown solver method '{self.method}'")
        object.__setattr__(self, "method", method)
        if self.step is not None and not self.step > 0:
            raise ValidationError(f"solver step must be positive, got {self.step}")
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValidationError("solver tolerances must be positive")
        if self.max_steps < 1:
            raise ValidationError(f"max_steps must be at least 1, got {self.max_steps}")


def check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ValidationError("grid needs at least two timestamps")
    spacing = np.diff(grid)
    if np.any(spacing <= 0):
        raise ValidationError("grid must be strictly increasing")
    if np.max(np.abs(spacing - spacing[0])) > 1e-9 * max(1.0, abs(grid[-1])):
        raise ValidationError("grid must be uniformly spaced")
    return grid


def _finite_field(field: Field, shape) -> Callable[[float, np.ndarray], np.ndarray]:
    def flat_field(t: float, y: np.ndarray) -> np.ndarray:
        dy = np.asarray(field(t, y.reshape(shape)), dtype=float).reshape(-1)
        if not np.all(np.isfinite(dy)):
            raise IntegrationError("vector field returned non-finite values", time=t)
        return dy
    return flat_field


def _rk4_step(f, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = f(t, y)
    k2 = f(t + h / 2, y + h / 2 * k1)
    k3 = f(t + h / 2, y + h / 2 * k2)
    k4 = f(t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def rk_integrate(field: Field, boundary_value, grid, config: Optional[SolverConfig] = None,
                 direction: str = "backward", monitor: Optional[Monitor] = None) -> np.ndarray:
    """Integrate y' = field(t, y) over the grid.

    backward starts from boundary_value at grid[-1], forward from grid[0].
    Returns the path at every grid point in ascending time order, with shape
    (len(grid),) + shape(boundary_value). monitor(t, y) is called at every
    grid point and may raise to abort.
    """
    config = config or SolverConfig()
    grid = check_grid(grid)
    if direction not in ("backward", "forward"):
        raise ValidationError(f"direction must be 'backward' or 'forward', got '{direction}'")

    y0 = np.array(boundary_value, dtype=float)
    shape = y0.shape
    f = _finite_field(field, shape)
    times = grid[::-1] if direction == "backward" else grid

    path = np.empty((grid.size, y0.size))
    path[0] = y0.reshape(-1)
    if monitor is not None:
        monitor(times[0], y0)

    if config.method == FIXED_RK4:
        y = y0.reshape(-1)
        for k in range(1, times.size):
            span = times[k] - times[k - 1]
            substeps = 1 if config.step is None else max(1, math.ceil(abs(span) / config.step - 1e-9))
            h = span / substeps
            t = times[k - 1]
            for _ in range(substeps):
                y = _rk4_step(f, t, y, h)
                t += h
            if not np.all(np.isfinite(y)):
                raise IntegrationError("non-finite state in fixed-step integration", step=k, time=times[k])
            path[k] = y
            if monitor is not None:
                monitor(times[k], y.reshape(shape))
    else:
        evaluations = [0]
        max_evaluations = 7 * config.max_steps

        def counted(t, y):
            evaluations[0] += 1
            if evaluations[0] > max_evaluations:
                raise IntegrationError(f"adaptive solver exceeded {config.max_steps} steps", time=t)
            return f(t, y)

        solution = solve_ivp(counted, (times[0], times[-1]), y0.reshape(-1), method="RK45",
                             t_eval=times, rtol=config.rel_tol, atol=config.abs_tol)
        if solution.status != 0:
            stalled = solution.t[-1] if solution.t.size else times[0]
            raise IntegrationError(f"adaptive solver failed: {solution.message}", time=float(stalled))
        path[:] = solution.y.T
        if monitor is not None:
            for k in range(1, times.size):
                monitor(times[k], path[k].reshape(shape))
        logger.debug(f"dp45 finished with {solution.nfev} field evaluations")

    if direction == "backward":
        path = path[::-1]
    return path.reshape((grid.size,) + shape)
