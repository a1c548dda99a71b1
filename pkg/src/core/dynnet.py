"""Time-varying networks: link creation as a survival process per ordered pair."""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError
from .network import NetworkTopology, build_topology, topology_from_matrix
from ..utils.random_utils import LINKS_STREAM, make_rng

logger = logging.getLogger(__name__)

Pair = Tuple[int, int]


@dataclass(frozen=True, eq=False)
class LinkEvents:
    """Link creations (t, source, target): source starts following target"""
    times: np.ndarray
    sources: np.ndarray
    targets: np.ndarray
    t0: float
    horizon_end: float

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        sources = np.array(self.sources, dtype=np.int64).reshape(-1)
        targets = np.array(self.targets, dtype=np.int64).reshape(-1)
        if not times.shape == sources.shape == targets.shape:
            raise ValidationError("link times, sources and targets differ in length")
        if times.size:
            if np.any(np.diff(times) < 0):
                raise ValidationError("link times must be sorted")
            if times[0] < self.t0 or times[-1] >= self.horizon_end:
                raise ValidationError(f"link times must lie in [{self.t0}, {self.horizon_end})")
            pairs = set(zip(sources.tolist(), targets.tolist()))
            if len(pairs) != times.size:
                raise ValidationError("at most one link event per ordered pair")
        for arr in (times, sources, targets):
            arr.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "targets", targets)

    @classmethod
    def from_records(cls, records: Iterable[Sequence], horizon: Tuple[float, float]) -> "LinkEvents":
        rows = sorted((float(t), int(u), int(s)) for t, u, s in records)
        if not rows:
            return cls(np.empty(0), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), *horizon)
        times, sources, targets = zip(*rows)
        return cls(np.array(times), np.array(sources), np.array(targets), float(horizon[0]), float(horizon[1]))

    def __len__(self) -> int:
        return self.times.size

    def records(self) -> List[Tuple[float, int, int]]:
        return [(float(t), int(u), int(s)) for t, u, s in zip(self.times, self.sources, self.targets)]

    def link_times(self) -> Dict[Pair, float]:
        return {(int(u), int(s)): float(t) for t, u, s in zip(self.times, self.sources, self.targets)}


def default_candidates(topology: NetworkTopology) -> Tuple[Pair, ...]:
    """Every ordered pair (i, s), i != s, that is not already linked"""
    linked = topology.dense() != 0
    np.fill_diagonal(linked, True)
    rows, cols = np.nonzero(~linked)
    return tuple(zip(rows.tolist(), cols.tolist()))


@dataclass(frozen=True, eq=False)
class LinkCreationModel:
    gamma: np.ndarray
    initial_topology: NetworkTopology
    candidates: Tuple[Pair, ...]
    nominal_weight: Optional[float] = None

    def __post_init__(self):
        n = self.initial_topology.num_users
        gamma = np.array(self.gamma, dtype=float).reshape(-1)
        if gamma.shape != (n,):
            raise ValidationError(f"gamma has length {gamma.size}, expected {n}")
        if not np.all(np.isfinite(gamma)) or np.any(gamma < 0):
            raise ValidationError("link creation rates must be finite and nonnegative")
        gamma.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)

        existing = {(i, j) for i, j, _ in self.initial_topology.edges}
        pairs = tuple(sorted({(int(i), int(s)) for i, s in self.candidates}))
        for i, s in pairs:
            if not (0 <= i < n and 0 <= s < n):
                raise ValidationError(f"candidate pair ({i}, {s}) outside [0, {n})")
            if i == s:
                raise ValidationError(f"candidate pair ({i}, {s}) is a self-link")
            if (i, s) in existing:
                raise ValidationError(f"candidate pair ({i}, {s}) is already linked")
        object.__setattr__(self, "candidates", pairs)

        if self.nominal_weight is None:
            weights = [w for _, _, w in self.initial_topology.edges]
            object.__setattr__(self, "nominal_weight", float(np.mean(weights)) if weights else 1.0)
        elif not self.nominal_weight >= 0:
            raise ValidationError(f"nominal weight must be nonnegative, got {self.nominal_weight}")

    @classmethod
    def over_all_pairs(cls, gamma, initial_topology: NetworkTopology,
                       nominal_weight: Optional[float] = None) -> "LinkCreationModel":
        return cls(gamma, initial_topology, default_candidates(initial_topology), nominal_weight)

    @property
    def num_users(self) -> int:
        return self.initial_topology.num_users

    def with_gamma(self, gamma) -> "LinkCreationModel":
        return LinkCreationModel(gamma, self.initial_topology, self.candidates, self.nominal_weight)

    def candidate_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self.candidates:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        sources, targets = zip(*self.candidates)
        return np.array(sources, dtype=np.int64), np.array(targets, dtype=np.int64)


def simulate_link_creation(model: LinkCreationModel, horizon: Tuple[float, float], seed: int) -> LinkEvents:
    """One exponential(gamma_i) creation time per candidate pair, censored at the horizon end"""
    t0, end = float(horizon[0]), float(horizon[1])
    if not end > t0:
        raise ValidationError(f"horizon end {end} must exceed start {t0}")
    sources, targets = model.candidate_arrays()
    rng = make_rng(seed, LINKS_STREAM)
    draws = rng.exponential(1.0, size=sources.size)
    rates = model.gamma[sources]
    with np.errstate(divide="ignore"):
        times = np.where(rates > 0, t0 + draws / np.where(rates > 0, rates, 1.0), np.inf)
    keep = times < end
    order = np.argsort(times[keep], kind="stable")
    logger.debug(f"link simulation: {int(keep.sum())} of {sources.size} candidate pairs linked")
    return LinkEvents(times[keep][order], sources[keep][order], targets[keep][order], t0, end)


def _check_consistent(events: LinkEvents, model: LinkCreationModel) -> None:
    allowed = set(model.candidates)
    for _, u, s in events.records():
        if (u, s) not in allowed:
            raise ValidationError(f"link event ({u}, {s}) is not a candidate pair")


def _exposure(events: LinkEvents, model: LinkCreationModel) -> Tuple[np.ndarray, np.ndarray]:
    """(n_u, R_u): links created by u and the total at-risk time of u's candidate pairs"""
    n = model.num_users
    created = np.bincount(events.sources, minlength=n).astype(float)
    link_times = events.link_times()
    at_risk = np.zeros(n)
    for u, s in model.candidates:
        end = link_times.get((u, s), events.horizon_end)
        at_risk[u] += end - events.t0
    return created, at_risk


def log_likelihood(gamma, events: LinkEvents, model: LinkCreationModel) -> float:
    """sum_i log gamma_{u_i} - sum_u gamma_u R_u"""
    gamma = np.asarray(gamma, dtype=float)
    created, at_risk = _exposure(events, model)
    with np.errstate(divide="ignore"):
        logs = np.where(created > 0, created * np.log(np.where(gamma > 0, gamma, 1.0)), 0.0)
    if np.any((created > 0) & (gamma <= 0)):
        return float("-inf")
    return float(np.sum(logs) - gamma @ at_risk)


@dataclass(frozen=True)
class GammaFit:
    gamma: np.ndarray
    loglik: float
    n_events: int

    def to_dict(self) -> Dict:
        return {"gamma": [float(g) for g in self.gamma], "loglik": self.loglik, "n_events": self.n_events}


def fit_gamma(events: LinkEvents, model_skeleton: LinkCreationModel) -> GammaFit:
    """Closed-form maximum likelihood gamma_u = n_u / R_u (zero for users with no links)"""
    _check_consistent(events, model_skeleton)
    created, at_risk = _exposure(events, model_skeleton)
    bad = np.flatnonzero((created > 0) & (at_risk <= 0))
    if bad.size:
        raise ValidationError(f"user {int(bad[0])} created links but has no at-risk time")
    gamma = np.divide(created, at_risk, out=np.zeros_like(created), where=created > 0)
    loglik = log_likelihood(gamma, events, model_skeleton)
    logger.info(f"fitted link creation rates from {len(events)} events, loglik {loglik:.6g}")
    return GammaFit(gamma, loglik, len(events))


def expected_adjacency(model: LinkCreationModel, t: float, t0: float = 0.0) -> np.ndarray:
    """E[A(t)]: initial weights plus nominal_weight (1 - exp(-gamma_i (t - t0))) on candidate pairs"""
    if t < t0:
        raise ValidationError(f"t={t} precedes the horizon start {t0}")
    matrix = model.initial_topology.dense()
    sources, targets = model.candidate_arrays()
    if sources.size:
        matrix[sources, targets] = model.nominal_weight * -np.expm1(-model.gamma[sources] * (t - t0))
    return matrix


def expected_topology(model: LinkCreationModel, t: float, t0: float = 0.0) -> NetworkTopology:
    return topology_from_matrix(expected_adjacency(model, t, t0),
                                allow_self_loops=model.initial_topology.allow_self_loops)


def expected_topology_at(model: LinkCreationModel, t0: float = 0.0) -> Callable[[float], NetworkTopology]:
    """Cached t -> E[A(t)] topology with link clocks started at t0, usable as a solver's topology_at"""
    @lru_cache(maxsize=1024)
    def topology_at(t: float) -> NetworkTopology:
        return expected_topology(model, max(float(t), t0), t0)
    return topology_at


def realized_topology_at(events: LinkEvents, model: LinkCreationModel) -> Callable[[float], NetworkTopology]:
    """t -> adjacency with the links created up to and including t, at the nominal weight"""
    base = list(model.initial_topology.edges)
    records = events.records()

    @lru_cache(maxsize=1024)
    def topology_at(t: float) -> NetworkTopology:
        added = [(u, s, model.nominal_weight) for time, u, s in records if time <= t]
        return build_topology(base + added, model.num_users, model.initial_topology.allow_self_loops)

    return topology_at


@dataclass(frozen=True, eq=False)
class NodeBirths:
    events: LinkEvents
    skeleton: LinkCreationModel
    birth_times: np.ndarray  # horizon start for nodes present from the beginning


def node_birth_to_links(births: Iterable[Sequence], u_max: int, horizon: Tuple[float, float],
                        initial_topology: Optional[NetworkTopology] = None,
                        nominal_weight: Optional[float] = None) -> NodeBirths:
    """Map arrivals (t, new node v, attach target s) to link creations on a fixed u_max network.

    Each arrival becomes the link event (t, v, s). The skeleton's candidate set
    holds only the arrival pairs, so unborn nodes have no other links, and
    birth_times tells the controller when each node may be steered.
    """
    if u_max < 1:
        raise ValidationError(f"u_max must be positive, got {u_max}")
    if initial_topology is None:
        initial_topology = build_topology([], u_max)
    elif initial_topology.num_users != u_max:
        raise ValidationError(f"initial topology has {initial_topology.num_users} users, expected {u_max}")

    records = [(float(t), int(v), int(s)) for t, v, s in births]
    previous = -np.inf
    born = set()
    birth_times = np.full(u_max, float(horizon[0]))
    for t, v, s in records:
        if not (0 <= v < u_max and 0 <= s < u_max):
            raise ValidationError(f"birth ({t}, {v}, {s}) refers to a node outside [0, {u_max})")
        if t < previous:
            raise ValidationError("birth times must be increasing")
        previous = t
        if v not in born:
            born.add(v)
            birth_times[v] = t

    events = LinkEvents.from_records(records, horizon)
    skeleton = LinkCreationModel(np.zeros(u_max), initial_topology, tuple((v, s) for _, v, s in records),
                                 nominal_weight)
    birth_times.setflags(write=False)
    return NodeBirths(events, skeleton, birth_times)
