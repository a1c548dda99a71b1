"""Hawkes and survival point processes: intensity recursion, thinning and the mean-field path."""
import hashlib
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import SimulationExplosion, ValidationError
from .integrate import SolverConfig, check_grid, rk_integrate
from .network import HawkesParams, SurvivalRates
from ..utils.random_utils import make_rng

logger = logging.getLogger(__name__)

DEFAULT_MAX_EVENTS = 10_000_000
MEAN_PATH_OVERFLOW = 1e12


@dataclass(frozen=True, eq=False)
class EventLog:
    times: np.ndarray
    users: np.ndarray
    t0: float
    horizon_end: float
    num_users: int
    seed: Optional[int] = None

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        users = np.array(self.users, dtype=np.int64).reshape(-1)
        if times.shape != users.shape:
            raise ValidationError("event times and users differ in length")
        if times.size:
            if np.any(np.diff(times) < 0):
                raise ValidationError("event times must be sorted")
            if times[0] < self.t0 or times[-1] >= self.horizon_end:
                raise ValidationError(f"event times must lie in [{self.t0}, {self.horizon_end})")
            if users.min() < 0 or users.max() >= self.num_users:
                raise ValidationError(f"event users must lie in [0, {self.num_users})")
            for u in np.unique(users):
                if np.any(np.diff(times[users == u]) <= 0):
                    raise ValidationError(f"user {u} has repeated event times")
        times.setflags(write=False)
        users.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "users", users)

    @classmethod
    def empty(cls, t0: float, horizon_end: float, num_users: int, seed: Optional[int] = None) -> "EventLog":
        return cls(np.empty(0), np.empty(0, dtype=np.int64), t0, horizon_end, num_users, seed)

    def __len__(self) -> int:
        return self.times.size

    @property
    def horizon(self) -> Tuple[float, float]:
        return self.t0, self.horizon_end

    def counts_on_grid(self, grid) -> np.ndarray:
        """Delta N: (len(grid) - 1, U) event counts on [tau_k, tau_k+1)"""
        grid = np.asarray(grid, dtype=float)
        counts = np.zeros((grid.size - 1, self.num_users))
        if self.times.size:
            k = np.searchsorted(grid, self.times, side="right") - 1
            inside = (k >= 0) & (k < grid.size - 1)
            np.add.at(counts, (k[inside], self.users[inside]), 1.0)
        return counts

    def count_before(self, t: float) -> int:
        return int(np.searchsorted(self.times, t, side="left"))

    def fingerprint(self) -> str:
        """Content hash, used to check that compared methods saw the same events"""
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.times).tobytes())
        digest.update(np.ascontiguousarray(self.users).tobytes())
        return digest.hexdigest()


@dataclass
class IntensityState:
    lam: np.ndarray
    last_time: float


def _excitation_walk(params: HawkesParams, events: EventLog, times: np.ndarray, right_limit: bool):
    """Excitation E(t) and cumulative jump sum S(t) at sorted times, one pass over the events"""
    decay = params.omega1
    n = params.num_users
    excitation = np.zeros(n)
    jumps = np.zeros(n)
    last = events.t0
    idx = 0
    out_e = np.empty((times.size, n))
    out_s = np.empty((times.size, n))
    for k, t in enumerate(times):
        while idx < len(events) and (events.times[idx] < t or (right_limit and events.times[idx] == t)):
            ti = events.times[idx]
            excitation *= np.exp(-decay * (ti - last))
            column = params.topology.column_of(int(events.users[idx]))
            excitation += column
            jumps += column
            last = ti
            idx += 1
        out_e[k] = excitation * np.exp(-decay * (t - last))
        out_s[k] = jumps
    return out_e, out_s


def _check_times(events: EventLog, times) -> np.ndarray:
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times < events.t0):
        raise ValidationError(f"time {times.min()} is before the horizon start {events.t0}")
    if np.any(np.diff(times) < 0):
        raise ValidationError("evaluation times must be sorted")
    return times


def intensity_at(params: HawkesParams, events: EventLog, t: float, right_limit: bool = False) -> np.ndarray:
    """lam_i(t) = eta_i + sum_j beta_ij sum_{t_j < t} exp(-omega1 (t - t_j)).

    right_limit=True also counts events at exactly t, giving lam(t+).
    """
    times = _check_times(events, t)
    excitation, _ = _excitation_walk(params, events, times, right_limit)
    return params.eta + excitation[0]


def intensity_path(params: HawkesParams, events: EventLog, times) -> np.ndarray:
    times = _check_times(events, times)
    excitation, _ = _excitation_walk(params, events, times, right_limit=False)
    return params.eta[None, :] + excitation


def compensator(params: HawkesParams, events: EventLog, times, right_limit: bool = False) -> np.ndarray:
    """Integrated intensity int_t0^t lam(s) ds per user at sorted times"""
    times = _check_times(events, times)
    excitation, jumps = _excitation_walk(params, events, times, right_limit)
    return params.eta[None, :] * (times - events.t0)[:, None] + (jumps - excitation) / params.omega1


def thinning_simulate(params: HawkesParams, horizon: Tuple[float, float], seed: int,
                      max_events: int = DEFAULT_MAX_EVENTS) -> EventLog:
    """Ogata thinning for the multivariate exponential-kernel Hawkes process"""
    t0, end = float(horizon[0]), float(horizon[1])
    if not end > t0:
        raise ValidationError(f"horizon end {end} must exceed start {t0}")

    rng = make_rng(seed)
    eta = params.eta
    decay = params.omega1
    excitation = np.zeros(params.num_users)
    times: List[float] = []
    users: List[int] = []

    t = t0
    bound = float(np.sum(eta))
    proposals = 0
    while bound > 0:
        t_candidate = t + rng.exponential(1.0 / bound)
        if t_candidate >= end:
            break
        proposals += 1
        excitation *= np.exp(-decay * (t_candidate - t))
        t = t_candidate
        lam = eta + excitation
        total = float(np.sum(lam))
        # the kernel only decays between events, so the bound set at the last update dominates
        assert total <= bound * (1 + 1e-12), "thinning bound below the intensity"

        if rng.random() * bound <= total:
            user = int(np.searchsorted(np.cumsum(lam), rng.random() * total, side="right"))
            user = min(user, params.num_users - 1)
            times.append(t)
            users.append(user)
            if len(times) > max_events:
                raise SimulationExplosion(
                    f"more than {max_events} events, branching radius {params.branching_radius():.3f}",
                    time=t,
                )
            excitation += params.topology.column_of(user)
            total = float(np.sum(eta + excitation))
        bound = total

    logger.debug(f"thinning: {len(times)} events from {proposals} proposals on [{t0}, {end})")
    return EventLog(np.array(times), np.array(users, dtype=np.int64), t0, end, params.num_users, seed)


def mean_intensity_path(params: HawkesParams, grid, config: Optional[SolverConfig] = None,
                        initial: Optional[np.ndarray] = None) -> np.ndarray:
    """Forward solution of dlam/dt = omega1 (eta - lam) + B lam on the grid, lam(t0) = eta"""
    grid = check_grid(grid)
    eta = params.eta
    decay = params.omega1
    adjacency = params.topology.adjacency
    start = eta if initial is None else np.asarray(initial, dtype=float)
    if start.shape != eta.shape:
        raise ValidationError(f"initial intensity has shape {start.shape}, expected {eta.shape}")

    def drift(t, lam):
        return decay * (eta - lam) + adjacency @ lam

    def guard(t, lam):
        if np.max(np.abs(lam)) > MEAN_PATH_OVERFLOW:
            raise SimulationExplosion(
                f"mean intensity diverged, branching radius {params.branching_radius():.3f}", time=t)

    config = config or SolverConfig(step=None)
    path = rk_integrate(drift, start, grid, config, direction="forward", monitor=guard)
    return np.maximum(path, 0.0)


def survival_simulate(rates: SurvivalRates, horizon: Tuple[float, float],
                      seed: int) -> List[Tuple[Tuple[int, int], Optional[float]]]:
    """One exponential(eta_ij) infection time per pair, censored at the horizon end"""
    t0, end = float(horizon[0]), float(horizon[1])
    if not end > t0:
        raise ValidationError(f"horizon end {end} must exceed start {t0}")
    rng = make_rng(seed)
    draws = rng.exponential(1.0, size=len(rates.pairs))
    with np.errstate(divide="ignore"):
        times = np.where(rates.rates > 0, t0 + draws / np.where(rates.rates > 0, rates.rates, 1.0), np.inf)
    return [(pair, float(t) if t < end else None) for pair, t in zip(rates.pairs, times)]
