"""End-to-end comparison runs: build the model, solve the HJB coefficients,
evaluate every method on shared scenarios and write the reports."""
import os
import time
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .baselines import (
    CEConfig, CostHistory, FDConfig, GreedyConfig, constant_grid_search, constant_levels, constant_policy,
    cross_entropy_optimize, finite_difference_optimize, greedy_policy, reference_state_cost,
)
from .config import ExperimentConfig
from .dynnet import (
    LinkCreationModel, expected_topology_at, fit_gamma, node_birth_to_links, realized_topology_at,
    simulate_link_creation,
)
from .errors import GuideError, NumericalError, StageError
from .hjb import FeedbackPolicy, ReplanPolicy, SolverConfig, ValueCoefficients, solve
from .network import (
    ControlProblem, HawkesParams, NetworkTopology, ObjectiveKind, OpinionParams, build_topology, random_topology,
)
from .pointproc import mean_intensity_path
from .sdesim import (
    MonteCarloResult, Policy, Scenario, TopologyAt, Trajectory, draw_scenarios, instantaneous_cost,
    monte_carlo_cost,
)
from ..utils.file_utils import create_folder, ledger_line, log_message, sanitize_filename
from ..utils.random_utils import LINKS_STREAM, PARAMS_STREAM, TOPOLOGY_STREAM, derive_seed, make_rng
from src.utils.data_parser import GuideDataParser


@dataclass
class ExperimentModel:
    params: OpinionParams
    hawkes: HawkesParams
    problem: ControlProblem
    x0: np.ndarray
    solve_topology_at: Optional[TopologyAt] = None
    sim_topology_at: Optional[TopologyAt] = None
    active_from: Optional[np.ndarray] = None
    link_model: Optional[LinkCreationModel] = None


@dataclass
class MethodReport:
    name: str
    result: MonteCarloResult
    wall_time: float
    cost_mean: np.ndarray
    cost_std: np.ndarray
    fingerprints: List[str]
    history: Optional[CostHistory] = None

    def to_dict(self) -> Dict:
        data = {
            "name": self.name,
            "mean_total_cost": self.result.mean,
            "variance": self.result.variance,
            "variance_defined": self.result.variance_defined,
            "wall_time": self.wall_time,
            "runs": [run.to_dict() for run in self.result.runs],
        }
        if self.history is not None:
            data["iterations"] = len(self.history)
            data["converged"] = self.history.converged
            data["collapsed"] = self.history.collapsed
        return data


@dataclass
class ComparisonReport:
    config: ExperimentConfig
    grid: np.ndarray
    sample_users: List[int]
    fingerprints: List[str]
    methods: Dict[str, MethodReport] = field(default_factory=dict)

    def ranking(self) -> List[Tuple[str, float]]:
        return sorted(((name, m.result.mean) for name, m in self.methods.items()), key=lambda item: item[1])

    def to_dict(self) -> Dict:
        return {
            "seed": self.config.seed,
            "n_runs": self.config.n_runs,
            "num_users": self.config.num_users,
            "kind": self.config.kind,
            "event_fingerprints": list(self.fingerprints),
            "methods": [report.to_dict() for report in self.methods.values()],
        }


def build_topologies(config: ExperimentConfig) -> Tuple[NetworkTopology, NetworkTopology]:
    """Opinion weights alpha and Hawkes weights beta on one shared edge set"""
    alpha = random_topology(config.num_users, config.sparsity, tuple(config.alpha_range),
                            derive_seed(config.seed, TOPOLOGY_STREAM))
    rng = make_rng(config.seed, PARAMS_STREAM, 0)
    edges = alpha.edges
    beta_weights = rng.uniform(config.beta_range[0], config.beta_range[1], size=len(edges))
    beta = NetworkTopology(config.num_users, np.array([i for i, _, _ in edges], dtype=np.int64),
                           np.array([j for _, j, _ in edges], dtype=np.int64), beta_weights)
    return alpha, beta


def build_model(config: ExperimentConfig) -> ExperimentModel:
    config.validate()
    alpha, beta = build_topologies(config)
    n = config.num_users
    rng = make_rng(config.seed, PARAMS_STREAM, 1)
    eta = rng.uniform(config.eta_range[0], config.eta_range[1], size=n)
    b = rng.uniform(config.b_range[0], config.b_range[1], size=n)

    params = OpinionParams(b, alpha, config.omega2, config.theta, config.h_mode)
    hawkes = HawkesParams(eta, beta, config.omega1)
    target = np.full(n, float(config.target)) if config.kind == "LSOG" else None
    problem = ControlProblem(ObjectiveKind(config.kind), config.rho, config.t0, config.horizon_end,
                             config.num_intervals, target, config.running_state_cost, n)
    model = ExperimentModel(params, hawkes, problem, np.full(n, float(config.x0)))

    horizon = (config.t0, config.horizon_end)
    if config.link_gamma is not None:
        link_model = LinkCreationModel.over_all_pairs(np.full(n, float(config.link_gamma)), alpha,
                                                      config.nominal_weight)
        links = simulate_link_creation(link_model, horizon, derive_seed(config.seed, LINKS_STREAM))
        model.link_model = link_model
        model.solve_topology_at = expected_topology_at(link_model, config.t0)
        model.sim_topology_at = realized_topology_at(links, link_model)
    elif config.births:
        # nodes that arrive later start without links
        unborn = {int(v) for t, v, _ in config.births if t > config.t0}
        alpha = build_topology([e for e in alpha.edges if e[0] not in unborn and e[1] not in unborn], n)
        model.params = OpinionParams(b, alpha, config.omega2, config.theta, config.h_mode)
        births = node_birth_to_links(config.births, n, horizon, alpha, config.nominal_weight)
        fitted = births.skeleton.with_gamma(fit_gamma(births.events, births.skeleton).gamma)
        model.link_model = fitted
        model.solve_topology_at = expected_topology_at(fitted, config.t0)
        model.sim_topology_at = realized_topology_at(births.events, births.skeleton)
        model.active_from = births.birth_times
    return model


def intensity_path_for(config: ExperimentConfig, hawkes: HawkesParams, grid: np.ndarray,
                       solver: SolverConfig) -> np.ndarray:
    if config.lam_mode == "stationary":
        return np.broadcast_to(np.maximum(hawkes.stationary_intensity(), 0.0), (grid.size, hawkes.num_users))
    return mean_intensity_path(hawkes, grid, solver)


def solve_model(config: ExperimentConfig, model: ExperimentModel, solver: SolverConfig) -> ValueCoefficients:
    lam_path = intensity_path_for(config, model.hawkes, model.problem.grid, solver)
    return solve(model.problem, model.params, lam_path, solver, model.solve_topology_at)


def hjb_policy(config: ExperimentConfig, model: ExperimentModel, coeffs: ValueCoefficients,
               solver: SolverConfig) -> Policy:
    """Mean-field feedback on coeffs, or a receding-horizon policy in replan mode"""
    if config.lam_mode == "replan":
        return ReplanPolicy(model.problem, model.params, model.hawkes, solver, model.active_from,
                            model.solve_topology_at)
    return FeedbackPolicy(coeffs, model.problem.rho, model.active_from)


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig, callback: Optional[Callable[[str, Dict], None]] = None):
        self.config = config
        self.callback = callback
        self.logger = logging.getLogger(__name__)

        self.logs_folder = create_folder(os.path.join(self.config.output_folder, "logs"))
        self.runs_log = os.path.join(self.logs_folder, "runs.log")
        self.error_log = os.path.join(self.logs_folder, "error.log")
        self.solver = SolverConfig(config.solver_method, config.solver_step)

    def _stage(self, name: str, fn, *args, **kwargs):
        self.logger.info(f"stage '{name}' started")
        try:
            result = fn(*args, **kwargs)
        except GuideError as e:
            log_message(self.error_log, ledger_line(stage=name, seed=self.config.seed, error=str(e)))
            self.logger.error(f"stage '{name}' failed: {str(e)}")
            raise StageError(name, self.config.seed, e) from e
        self.logger.info(f"stage '{name}' finished")
        if self.callback:
            self.callback(name, {"seed": self.config.seed})
        return result

    def _solve(self, model: ExperimentModel) -> ValueCoefficients:
        return solve_model(self.config, model, self.solver)

    def _hjb_policy(self, model: ExperimentModel, coeffs: ValueCoefficients) -> Policy:
        return hjb_policy(self.config, model, coeffs, self.solver)

    def _evaluate(self, name: str, policy: Policy, model: ExperimentModel,
                  scenarios: List[Scenario]) -> Tuple[MonteCarloResult, float]:
        started = time.perf_counter()
        result = monte_carlo_cost(policy, model.problem, model.params, model.hawkes, model.x0,
                                  self.config.n_runs, self.config.seed, scenarios=scenarios,
                                  keep_trajectories=True, topology_at=model.sim_topology_at)
        return result, time.perf_counter() - started

    def _build_policies(self, model: ExperimentModel, coeffs: ValueCoefficients,
                        scenarios: List[Scenario]) -> Tuple[Dict[str, Policy], Dict[str, CostHistory]]:
        config = self.config
        methods = config.methods
        policies: Dict[str, Policy] = {}
        histories: Dict[str, CostHistory] = {}
        hjb = self._hjb_policy(model, coeffs)
        if "hjb" in methods:
            policies["hjb"] = hjb
        if "ce" in methods:
            ce = CEConfig(config.ce_population, config.ce_elite_fraction, 0.0, config.ce_init_stddev,
                          config.ce_max_iters, config.ce_rel_tol, config.ce_segments)
            policies["ce"], histories["ce"] = cross_entropy_optimize(
                model.problem, model.params, model.hawkes, model.x0, ce, config.seed,
                n_runs=config.search_runs, workers=config.workers)
        if "fd" in methods:
            fd = FDConfig(config.fd_eps, config.fd_step, config.fd_max_iters, config.fd_rel_tol,
                          segments=config.fd_segments)
            policies["fd"], histories["fd"] = finite_difference_optimize(
                model.problem, model.params, model.hawkes, model.x0, fd, config.seed,
                n_runs=config.search_runs, workers=config.workers)
        if "greedy" in methods:
            reference_runs = monte_carlo_cost(hjb, model.problem, model.params, model.hawkes, model.x0,
                                              config.n_runs, config.seed, scenarios=scenarios,
                                              keep_trajectories=True, topology_at=model.sim_topology_at)
            reference = reference_state_cost(reference_runs.trajectories, model.problem)
            greedy = GreedyConfig(config.greedy_k, config.greedy_checkpoints, config.greedy_c)
            policies["greedy"] = greedy_policy(model.problem, model.params, reference, greedy)
        if "constant" in methods and config.constant_level is not None:
            policies["constant"] = constant_policy(np.full(model.params.num_users, float(config.constant_level)))
        elif "constant" in methods:
            levels = constant_levels(*config.constant_range)
            policies["constant"], _ = constant_grid_search(
                model.problem, model.params, model.hawkes, model.x0, levels, config.n_runs, config.seed,
                scenarios=scenarios, workers=config.workers)
        return {name: policies[name] for name in methods}, histories

    def _method_report(self, name: str, result: MonteCarloResult, wall_time: float, model: ExperimentModel,
                       history: Optional[CostHistory]) -> MethodReport:
        paths = np.array([instantaneous_cost(traj, model.problem) for traj in result.trajectories])
        std = paths.std(axis=0, ddof=1) if len(paths) > 1 else np.zeros(paths.shape[1])
        fingerprints = [traj.events.fingerprint() for traj in result.trajectories]
        for r, (run, traj) in enumerate(zip(result.runs, result.trajectories)):
            log_message(self.runs_log, ledger_line(method=name, run=r, seed=traj.noise_seed, cost=repr(run.total)))
        return MethodReport(name, result, wall_time, paths.mean(axis=0), std, fingerprints, history)

    def run(self) -> ComparisonReport:
        config = self.config
        self.logger.info(f"experiment: U={config.num_users}, methods={config.methods}, "
                         f"{config.n_runs} runs, seed {config.seed}")
        model = self._stage("model", build_model, config)
        scenarios = self._stage("scenarios", draw_scenarios, model.hawkes, model.problem.grid,
                                config.seed, config.n_runs)
        fingerprints = [scenario.events.fingerprint() for scenario in scenarios]
        sample_users = list(range(min(config.n_sample_users, config.num_users)))
        report = ComparisonReport(config, model.problem.grid, sample_users, fingerprints)
        if not config.methods:
            return report

        coeffs = self._stage("solve", self._solve, model)
        policies, histories = self._stage("baselines", self._build_policies, model, coeffs, scenarios)

        def evaluate(name: str):
            return self._evaluate(name, policies[name], model, scenarios)

        def evaluate_all():
            with ThreadPoolExecutor(max_workers=config.workers) as executor:
                return list(executor.map(evaluate, list(policies)))

        outcomes = self._stage("evaluate", evaluate_all)
        for name, (result, wall_time) in zip(policies, outcomes):
            method = self._method_report(name, result, wall_time, model, histories.get(name))
            if method.fingerprints != fingerprints:
                raise StageError("evaluate", config.seed,
                                 NumericalError(f"method '{name}' saw different event logs"))
            report.methods[name] = method
            self.logger.info(f"{name}: mean total cost {result.mean:.6g} (variance {result.variance:.4g})")
        return report


def run_experiment(config: ExperimentConfig, emit: bool = True) -> ComparisonReport:
    report = ExperimentRunner(config).run()
    if emit:
        emit_reports(report, config.output_folder)
    return report


def emit_reports(report: ComparisonReport, out_dir: str) -> List[str]:
    """summary.json, config.echo.json and, when methods ran, the cost and trajectory CSVs"""
    logger = logging.getLogger(__name__)
    create_folder(out_dir)
    written = []

    def target(name: str) -> str:
        path = os.path.join(out_dir, name)
        written.append(path)
        return path

    GuideDataParser.write_json(report.to_dict(), target("summary.json"))
    GuideDataParser.write_json(report.config.to_dict(), target("config.echo.json"))
    if report.methods:
        cost_rows = []
        for name, method in report.methods.items():
            for k, t in enumerate(report.grid):
                cost_rows.append([repr(float(t)), name, repr(float(method.cost_mean[k])),
                                  repr(float(method.cost_std[k]))])
        GuideDataParser.write_csv(target("instantaneous_cost.csv"),
                                  GuideDataParser.HEADERS["instantaneous_cost"], cost_rows)

        trajectory_rows = []
        for name, method in report.methods.items():
            traj: Trajectory = method.result.trajectories[0]
            for t, user, x, u in GuideDataParser.trajectory_rows(traj.grid, traj.x, traj.u, report.sample_users):
                trajectory_rows.append([t, user, name, x, u])
        GuideDataParser.write_csv(target("trajectories.csv"), GuideDataParser.HEADERS["trajectories"],
                                  trajectory_rows)

        for name, method in report.methods.items():
            if method.history is not None:
                GuideDataParser.write_cost_history(
                    method.history, target(f"cost_history_{sanitize_filename(name)}.csv"))
    logger.info(f"wrote {len(written)} report files to {out_dir}")
    return written
