"""Network topology, model parameter containers and the Lambda(t) / B^j algebra.

The influence matrix A = (a_ij) stores the weight of user j on user i, so the
j-th column a_j lists everyone user j excites. The per-user matrices B^j of the
jump term are the rank-one products a_j e_j^T and are never materialised:
sum_j lam_j B^j = A diag(lam) and sum_j lam_j B^jT v11 B^j is diagonal with
entries lam_j a_j^T v11 a_j.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from .errors import ValidationError
from ..utils.random_utils import make_rng

logger = logging.getLogger(__name__)

DENSE_CACHE_LIMIT = 64
SYMMETRY_TOL = 1e-10

Edge = Tuple[int, int, float]


class NetworkTopology:
    """Immutable directed weighted adjacency, stored as sorted sparse columns"""

    def __init__(self, num_users: int, rows: np.ndarray, cols: np.ndarray, weights: np.ndarray,
                 allow_self_loops: bool = False):
        self.num_users = int(num_users)
        self.allow_self_loops = allow_self_loops

        order = np.lexsort((rows, cols))
        self._rows = np.asarray(rows, dtype=np.int64)[order]
        self._cols = np.asarray(cols, dtype=np.int64)[order]
        self._weights = np.asarray(weights, dtype=float)[order]
        for arr in (self._rows, self._cols, self._weights):
            arr.setflags(write=False)

        self._matrix = sparse.csc_matrix(
            (self._weights, (self._rows, self._cols)),
            shape=(self.num_users, self.num_users),
        )
        self._matrix.sort_indices()
        self._dense: Optional[np.ndarray] = None
        if self.num_users <= DENSE_CACHE_LIMIT:
            self._dense = self._matrix.toarray()
            self._dense.setflags(write=False)

    @property
    def edges(self) -> List[Edge]:
        """Edges (i, j, weight) in canonical (j, i) order"""
        return [(int(i), int(j), float(w)) for i, j, w in zip(self._rows, self._cols, self._weights)]

    @property
    def nnz(self) -> int:
        return len(self._weights)

    @property
    def adjacency(self) -> sparse.csc_matrix:
        return self._matrix

    def dense(self) -> np.ndarray:
        if self._dense is not None:
            return self._dense.copy()
        return self._matrix.toarray()

    def column_of(self, j: int) -> np.ndarray:
        if not 0 <= j < self.num_users:
            raise ValidationError(f"column index {j} outside [0, {self.num_users})")
        if self._dense is not None:
            return self._dense[:, j].copy()
        column = np.zeros(self.num_users)
        start, stop = self._matrix.indptr[j], self._matrix.indptr[j + 1]
        column[self._matrix.indices[start:stop]] = self._matrix.data[start:stop]
        return column

    def spectral_radius(self) -> float:
        if self.nnz == 0:
            return 0.0
        if self.num_users <= 256:
            return float(np.max(np.abs(np.linalg.eigvals(self.dense()))))
        # Nonnegative matrix: the smaller of the max row / column sums bounds the radius
        row_max = float(np.max(np.asarray(self._matrix.sum(axis=1))))
        col_max = float(np.max(np.asarray(self._matrix.sum(axis=0))))
        return min(row_max, col_max)

    def __eq__(self, other) -> bool:
        if not isinstance(other, NetworkTopology):
            return NotImplemented
        return (self.num_users == other.num_users
                and np.array_equal(self._rows, other._rows)
                and np.array_equal(self._cols, other._cols)
                and np.array_equal(self._weights, other._weights))

    def __repr__(self) -> str:
        return f"NetworkTopology(num_users={self.num_users}, nnz={self.nnz})"


def build_topology(edges: Iterable[Sequence], num_users: int,
                   allow_self_loops: bool = False) -> NetworkTopology:
    if num_users < 1:
        raise ValidationError(f"num_users must be positive, got {num_users}")

    seen = set()
    rows, cols, weights = [], [], []
    for edge in edges:
        i, j, w = int(edge[0]), int(edge[1]), float(edge[2])
        if not (0 <= i < num_users and 0 <= j < num_users):
            raise ValidationError(f"edge ({i}, {j}) outside [0, {num_users})")
        if not np.isfinite(w) or w < 0:
            raise ValidationError(f"edge ({i}, {j}) has invalid weight {w}")
        if i == j and not allow_self_loops:
            raise ValidationError(f"self-loop ({i}, {j}) given but self-loops are disabled")
        if (i, j) in seen:
            raise ValidationError(f"duplicate edge ({i}, {j})")
        seen.add((i, j))
        rows.append(i)
        cols.append(j)
        weights.append(w)

    return NetworkTopology(num_users, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
                           np.array(weights, dtype=float), allow_self_loops)


def topology_from_matrix(matrix, allow_self_loops: bool = True) -> NetworkTopology:
    """Topology holding the nonzero entries of a dense or sparse square matrix"""
    coo = sparse.coo_matrix(matrix)
    if coo.shape[0] != coo.shape[1]:
        raise ValidationError(f"adjacency must be square, got {coo.shape}")
    coo.sum_duplicates()
    keep = coo.data != 0
    return build_topology(zip(coo.row[keep], coo.col[keep], coo.data[keep]), coo.shape[0], allow_self_loops)


def random_topology(num_users: int, sparsity: float, weight_range: Tuple[float, float], seed: int,
                    allow_self_loops: bool = False) -> NetworkTopology:
    lo, hi = float(weight_range[0]), float(weight_range[1])
    if not 0.0 <= sparsity <= 1.0:
        raise ValidationError(f"sparsity must lie in [0, 1], got {sparsity}")
    if lo > hi or lo < 0:
        raise ValidationError(f"invalid weight range [{lo}, {hi}]")
    if num_users < 1:
        raise ValidationError(f"num_users must be positive, got {num_users}")

    rng = make_rng(seed)
    mask = rng.random((num_users, num_users)) < sparsity
    if not allow_self_loops:
        np.fill_diagonal(mask, False)
    # nonzero of the transpose walks column by column: (j, i) order
    cols, rows = np.nonzero(mask.T)
    weights = rng.uniform(lo, hi, size=len(rows))

    logger.debug(f"random topology: U={num_users}, sparsity={sparsity}, nnz={len(rows)}")
    return NetworkTopology(num_users, rows, cols, weights, allow_self_loops)


def _check_intensity(topology: NetworkTopology, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (topology.num_users,):
        raise ValidationError(f"intensity vector has shape {lam.shape}, expected ({topology.num_users},)")
    if np.any(lam < 0):
        raise ValidationError(f"intensity vector has negative entries (min {lam.min():.3g})")
    return lam


def assemble_lambda_matrix(topology: NetworkTopology, lam) -> np.ndarray:
    """Lambda = sum_j lam_j B^j = A diag(lam)"""
    lam = _check_intensity(topology, lam)
    scaled = topology.adjacency @ sparse.diags(lam)
    return np.asarray(scaled.toarray())


def contraction_diagonal(topology: NetworkTopology, lam, v11: np.ndarray) -> np.ndarray:
    """Entries lam_j * a_j^T v11 a_j of the diagonal jump contraction"""
    lam = _check_intensity(topology, lam)
    v11 = np.asarray(v11, dtype=float)
    n = topology.num_users
    if v11.shape != (n, n):
        raise ValidationError(f"v11 has shape {v11.shape}, expected ({n}, {n})")
    scale = max(1.0, float(np.max(np.abs(v11)))) if v11.size else 1.0
    if np.max(np.abs(v11 - v11.T)) > SYMMETRY_TOL * scale:
        raise ValidationError("v11 is not symmetric")

    a = topology.adjacency
    # row j of a^T v11 is a_j^T v11
    projected = np.asarray(a.T @ v11)
    quad = np.asarray(a.T.multiply(projected).sum(axis=1)).ravel()
    return lam * quad


def jump_quadratic_contraction(topology: NetworkTopology, lam, v11: np.ndarray) -> np.ndarray:
    """sum_j lam_j B^jT v11 B^j, which is diagonal"""
    return np.diag(contraction_diagonal(topology, lam, v11))


def _as_vector(values, name: str, length: Optional[int] = None) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if length is not None and arr.shape != (length,):
        raise ValidationError(f"{name} has length {arr.size}, expected {length}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


class HMode(str, Enum):
    UNIT = "unit"
    LINEAR = "linear"


class ObjectiveKind(str, Enum):
    LSOG = "LSOG"
    OIM = "OIM"


@dataclass(frozen=True, eq=False)
class HawkesParams:
    eta: np.ndarray
    topology: NetworkTopology
    omega1: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "eta", _as_vector(self.eta, "eta", self.topology.num_users))
        if np.any(self.eta < 0):
            raise ValidationError("base intensity eta must be nonnegative")
        if not self.omega1 > 0:
            raise ValidationError(f"omega1 must be positive, got {self.omega1}")
        radius = self.branching_radius()
        if radius >= 1:
            logger.warning(f"Hawkes branching radius {radius:.3f} >= 1, the process may explode")

    @property
    def num_users(self) -> int:
        return self.topology.num_users

    def branching_radius(self) -> float:
        """Spectral radius of (beta_ij / omega1)"""
        return self.topology.spectral_radius() / self.omega1

    def stationary_intensity(self) -> np.ndarray:
        """Mean-field fixed point (omega1 I - B) lam = omega1 eta"""
        system = self.omega1 * np.eye(self.num_users) - self.topology.dense()
        return np.linalg.solve(system, self.omega1 * self.eta)


@dataclass(frozen=True, eq=False)
class OpinionParams:
    b: np.ndarray
    topology: NetworkTopology
    omega2: float = 1.0
    theta: float = 0.0
    h_mode: HMode = HMode.LINEAR

    def __post_init__(self):
        object.__setattr__(self, "b", _as_vector(self.b, "b", self.topology.num_users))
        object.__setattr__(self, "h_mode", HMode(self.h_mode))
        if not self.omega2 > 0:
            raise ValidationError(f"omega2 must be positive, got {self.omega2}")
        if not self.theta >= 0:
            raise ValidationError(f"theta must be nonnegative, got {self.theta}")

    @property
    def num_users(self) -> int:
        return self.topology.num_users


@dataclass(frozen=True, eq=False)
class SurvivalRates:
    """Infection rate eta_ij per directed pair (i infects j)"""
    pairs: Tuple[Tuple[int, int], ...]
    rates: np.ndarray

    def __post_init__(self):
        pairs = tuple((int(i), int(j)) for i, j in self.pairs)
        if len(set(pairs)) != len(pairs):
            raise ValidationError("duplicate pair in survival rates")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "rates", _as_vector(self.rates, "rates", len(pairs)))
        if np.any(self.rates < 0):
            raise ValidationError("survival rates must be nonnegative")

    @classmethod
    def from_dict(cls, rates: dict) -> "SurvivalRates":
        pairs = sorted(rates)
        return cls(tuple(pairs), np.array([rates[p] for p in pairs], dtype=float))

    @classmethod
    def from_topology(cls, topology: NetworkTopology) -> "SurvivalRates":
        """Infection i -> j at rate a_ji, i.e. along the influence direction"""
        pairs = tuple((j, i) for i, j, _ in topology.edges)
        return cls(pairs, np.array([w for _, _, w in topology.edges], dtype=float))


@dataclass(frozen=True, eq=False)
class ControlProblem:
    kind: ObjectiveKind
    rho: float
    t0: float
    horizon_end: float
    num_intervals: int
    target: Optional[np.ndarray] = None
    running_state_cost: bool = True
    num_users: Optional[int] = None
    grid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", ObjectiveKind(self.kind))
        if not self.rho > 0:
            raise ValidationError(f"rho must be positive, got {self.rho}")
        if not self.horizon_end > self.t0:
            raise ValidationError(f"horizon end {self.horizon_end} must exceed t0 {self.t0}")
        if int(self.num_intervals) < 1:
            raise ValidationError(f"grid needs at least one interval, got {self.num_intervals}")
        object.__setattr__(self, "num_intervals", int(self.num_intervals))

        if self.kind is ObjectiveKind.LSOG:
            if self.target is None:
                raise ValidationError("LSOG problem needs a target vector")
            target = _as_vector(self.target, "target", self.num_users)
            object.__setattr__(self, "target", target)
            object.__setattr__(self, "num_users", target.size)
        elif self.target is not None:
            object.__setattr__(self, "target", _as_vector(self.target, "target", self.num_users))

        grid = np.linspace(self.t0, self.horizon_end, self.num_intervals + 1)
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    @property
    def dt(self) -> float:
        return (self.horizon_end - self.t0) / self.num_intervals

    @property
    def horizon(self) -> Tuple[float, float]:
        return self.t0, self.horizon_end

    def check_users(self, num_users: int) -> None:
        if self.num_users is not None and self.num_users != num_users:
            raise ValidationError(f"problem is sized for {self.num_users} users, model has {num_users}")

    def state_cost(self, x: np.ndarray) -> float:
        """q(x) = phi(x): 1/2 ||x - a||^2 (LSOG) or -sum x (OIM)"""
        if self.kind is ObjectiveKind.LSOG:
            diff = x - self.target
            return 0.5 * float(diff @ diff)
        return -float(np.sum(x))
