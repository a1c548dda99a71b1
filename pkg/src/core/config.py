import os
import json
from typing import Dict, Any, List, Optional

from dotenv import load_dotenv

from .errors import ConfigError

METHODS = ("hjb", "ce", "fd", "greedy", "constant")
LAM_MODES = ("mean_field", "stationary", "replan")


class ExperimentConfig:
    def __init__(self, output_folder: str = None):
        self.output_folder = output_folder or os.path.join(os.getcwd(), "results")
        self._workers = 4
        self.log_level: str = "INFO"
        self.seed: int = 0

        # Model
        self.num_users: int = 100
        self.sparsity: float = 0.01
        self.alpha_range: List[float] = [0.0, 0.01]
        self.beta_range: List[float] = [0.0, 0.01]
        self.eta_range: List[float] = [0.5, 1.5]
        self.b_range: List[float] = [-1.0, 1.0]
        self.omega1: float = 1.0
        self.omega2: float = 1.0
        self.theta: float = 0.2
        self.h_mode: str = "linear"
        self.x0: float = -10.0

        # Problem
        self.kind: str = "LSOG"
        self.target: float = 1.0
        self.rho: float = 10.0
        self.t0: float = 0.0
        self.horizon_end: float = 10.0
        self._num_intervals = 100
        self.running_state_cost: bool = True
        self.lam_mode: str = "mean_field"
        self.solver_method: str = "fixed_rk4"
        self.solver_step: Optional[float] = None

        # Methods and evaluation
        self.methods: List[str] = list(METHODS)
        self._n_runs = 10
        self.n_sample_users: int = 5
        self.search_runs: int = 3  # Monte-Carlo runs per CE/FD candidate

        self.ce_population: int = 100
        self.ce_elite_fraction: float = 0.1
        self.ce_init_stddev: float = 1.0
        self.ce_max_iters: int = 20
        self.ce_rel_tol: float = 1e-3
        self.ce_segments: int = 5

        self.fd_eps: float = 0.01
        self.fd_step: float = 0.01
        self.fd_max_iters: int = 10
        self.fd_rel_tol: float = 1e-3
        self.fd_segments: int = 2

        self.greedy_k: float = 1.0
        self.greedy_checkpoints: int = 10
        self.greedy_c: float = 1.0

        self.constant_range: List[float] = [-5.0, 5.0]
        self.constant_level: Optional[float] = None  # fixed level instead of the grid search

        # Dynamic network, off unless gamma or births are given
        self.link_gamma: Optional[float] = None
        self.births: List[List[float]] = []
        self.nominal_weight: Optional[float] = None

    @property
    def workers(self) -> int:
        return max(1, self._workers)  # Never allow less than 1

    @workers.setter
    def workers(self, value: int):
        self._workers = max(1, int(value))

    @property
    def n_runs(self) -> int:
        return self._n_runs

    @n_runs.setter
    def n_runs(self, value: int):
        if int(value) < 1:
            raise ConfigError(f"n_runs must be at least 1, got {value}")
        self._n_runs = int(value)

    @property
    def num_intervals(self) -> int:
        return self._num_intervals

    @num_intervals.setter
    def num_intervals(self, value: int):
        # grid size = num_intervals + 1 >= 2
        if int(value) < 1:
            raise ConfigError(f"num_intervals must be at least 1, got {value}")
        self._num_intervals = int(value)

    @property
    def dynamic(self) -> bool:
        return self.link_gamma is not None or bool(self.births)

    def full_scale(self) -> None:
        """Switch to the 1000-user network at the same expected in-degree"""
        self.sparsity = self.sparsity * self.num_users / 1000
        self.num_users = 1000

    def validate(self) -> None:
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}, choose from {list(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods list has duplicates")
        if self.kind not in ("LSOG", "OIM"):
            raise ConfigError(f"kind must be LSOG or OIM, got '{self.kind}'")
        if self.lam_mode not in LAM_MODES:
            raise ConfigError(f"lam_mode must be one of {list(LAM_MODES)}, got '{self.lam_mode}'")
        if self.h_mode not in ("unit", "linear"):
            raise ConfigError(f"h_mode must be unit or linear, got '{self.h_mode}'")
        if self.num_users < 1:
            raise ConfigError(f"num_users must be positive, got {self.num_users}")
        if not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if not self.horizon_end > self.t0:
            raise ConfigError(f"horizon_end {self.horizon_end} must exceed t0 {self.t0}")
        for name in ("alpha_range", "beta_range", "eta_range", "b_range", "constant_range"):
            low, high = getattr(self, name)
            if low > high:
                raise ConfigError(f"{name} [{low}, {high}] is empty")
        if self.link_gamma is not None and self.link_gamma < 0:
            raise ConfigError(f"link_gamma must be nonnegative, got {self.link_gamma}")
        for birth in self.births:
            if len(birth) != 3:
                raise ConfigError(f"birth entries are [t, node, target], got {birth}")
        if self.link_gamma is not None and self.births:
            raise ConfigError("give either link_gamma or births, not both")
        if str(self.log_level).upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError(f"unknown log level '{self.log_level}'")

    def apply_env(self, env_file: Optional[str] = None) -> None:
        """GUIDE_OUT_DIR, GUIDE_WORKERS and GUIDE_LOG_LEVEL from the environment or a .env file"""
        load_dotenv(env_file)
        if os.getenv("GUIDE_OUT_DIR"):
            self.output_folder = os.getenv("GUIDE_OUT_DIR")
        if os.getenv("GUIDE_WORKERS"):
            try:
                self.workers = int(os.getenv("GUIDE_WORKERS"))
            except ValueError:
                raise ConfigError(f"GUIDE_WORKERS must be an integer, got '{os.getenv('GUIDE_WORKERS')}'")
        if os.getenv("GUIDE_LOG_LEVEL"):
            self.log_level = os.getenv("GUIDE_LOG_LEVEL").upper()

    def save_config(self, config_file: str):
        os.makedirs(os.path.dirname(os.path.abspath(config_file)), exist_ok=True)

        with open(config_file, 'w') as f:
            json.dump(self.to_dict(), f, indent=4)

    def load_config(self, config_file: str):
        try:
            with open(config_file, 'r') as f:
                config_data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Error loading config {config_file}: {str(e)}") from e
        if not isinstance(config_data, dict):
            raise ConfigError(f"config {config_file} must hold a JSON object")
        for key, value in config_data.items():
            if not hasattr(self, key):
                raise ConfigError(f"unknown config key '{key}'")
            setattr(self, key, value)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "output_folder": self.output_folder,
            "workers": self.workers,
            "log_level": self.log_level,
            "seed": self.seed,
            "num_users": self.num_users,
            "sparsity": self.sparsity,
            "alpha_range": list(self.alpha_range),
            "beta_range": list(self.beta_range),
            "eta_range": list(self.eta_range),
            "b_range": list(self.b_range),
            "omega1": self.omega1,
            "omega2": self.omega2,
            "theta": self.theta,
            "h_mode": self.h_mode,
            "x0": self.x0,
            "kind": self.kind,
            "target": self.target,
            "rho": self.rho,
            "t0": self.t0,
            "horizon_end": self.horizon_end,
            "num_intervals": self.num_intervals,
            "running_state_cost": self.running_state_cost,
            "lam_mode": self.lam_mode,
            "solver_method": self.solver_method,
            "solver_step": self.solver_step,
            "methods": list(self.methods),
            "n_runs": self.n_runs,
            "n_sample_users": self.n_sample_users,
            "search_runs": self.search_runs,
            "ce_population": self.ce_population,
            "ce_elite_fraction": self.ce_elite_fraction,
            "ce_init_stddev": self.ce_init_stddev,
            "ce_max_iters": self.ce_max_iters,
            "ce_rel_tol": self.ce_rel_tol,
            "ce_segments": self.ce_segments,
            "fd_eps": self.fd_eps,
            "fd_step": self.fd_step,
            "fd_max_iters": self.fd_max_iters,
            "fd_rel_tol": self.fd_rel_tol,
            "fd_segments": self.fd_segments,
            "greedy_k": self.greedy_k,
            "greedy_checkpoints": self.greedy_checkpoints,
            "greedy_c": self.greedy_c,
            "constant_range": list(self.constant_range),
            "constant_level": self.constant_level,
            "link_gamma": self.link_gamma,
            "births": [list(b) for b in self.births],
            "nominal_weight": self.nominal_weight,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        config = cls()
        for key, value in data.items():
            if not hasattr(config, key):
                raise ConfigError(f"unknown config key '{key}'")
            setattr(config, key, value)
        return config

    @classmethod
    def from_file(cls, config_file: str) -> 'ExperimentConfig':
        config = cls()
        config.load_config(config_file)
        return config
