import os
import sys
import argparse
import logging
from typing import List, Optional, Tuple

import numpy as np

from ..core.baselines import (
    CEConfig, ConstantPolicy, FDConfig, GreedyConfig, constant_grid_search, constant_levels, constant_policy,
    cross_entropy_optimize, finite_difference_optimize, greedy_policy, reference_state_cost,
)
from ..core.config import ExperimentConfig
from ..core.dynnet import LinkCreationModel, fit_gamma
from ..core.errors import ConfigError, GuideError, NumericalError, StageError, ValidationError
from ..core.experiment import ExperimentModel, build_model, emit_reports, hjb_policy, run_experiment, solve_model
from ..core.hjb import SolverConfig, ValueCoefficients
from ..core.sdesim import Policy
from ..core.network import build_topology
from ..core.sdesim import draw_scenarios, monte_carlo_cost, simulate_scenario, evaluate_cost
from ..utils.file_utils import create_folder, setup_logging
from src.utils.data_parser import GuideDataParser

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

LAM_FLAGS = {"mean": "mean_field", "stationary": "stationary", "replan": "replan"}

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="guide", description="Steer opinions and activity on a network of point-process driven SDEs")
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", help="output folder")
    parser.add_argument("--workers", type=int, help="worker threads")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--full-scale", action="store_true", help="use the 1000-user network")
    parser.add_argument("--solver", choices=["fixed_rk4", "dp45"], help="backward ODE solver")
    parser.add_argument("--lam-mode", choices=sorted(LAM_FLAGS), help="intensity seen by the backward solve")
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="one uncontrolled (or constant-control) run")
    simulate.add_argument("--u0", type=float, default=0.0, help="constant control level")

    sub.add_parser("solve", help="solve the HJB coefficients and write them as JSON")

    control = sub.add_parser("control", help="evaluate the optimal feedback policy")
    control.add_argument("--runs", type=int, help="Monte-Carlo runs, default from the config")

    baseline = sub.add_parser("baseline", help="optimise and evaluate one comparison policy")
    baseline.add_argument("--method", required=True, choices=["ce", "fd", "greedy", "constant"])

    fit = sub.add_parser("fit-network", help="fit link creation rates to a link CSV")
    fit.add_argument("--links", required=True, help="CSV with columns t,source,target")
    fit.add_argument("--num-users", type=int, required=True)
    fit.add_argument("--topology", help="initial topology JSON; empty network if omitted")
    fit.add_argument("--horizon", type=float, nargs=2, metavar=("T0", "T"), required=True)

    sub.add_parser("experiment", help="compare every configured method and write the reports")
    return parser


def load_configuration(args: argparse.Namespace) -> ExperimentConfig:
    """Config file, then the environment, then explicit flags"""
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    config.apply_env()
    if args.seed is not None:
        config.seed = args.seed
    if args.out:
        config.output_folder = args.out
    if args.workers is not None:
        config.workers = args.workers
    if args.log_level:
        config.log_level = args.log_level.upper()
    if args.solver:
        config.solver_method = args.solver
    if args.lam_mode:
        config.lam_mode = LAM_FLAGS[args.lam_mode]
    if args.full_scale:
        config.full_scale()
    config.validate()
    return config


def _solver(config: ExperimentConfig) -> SolverConfig:
    return SolverConfig(config.solver_method, config.solver_step)


def _hjb(config: ExperimentConfig, model: ExperimentModel) -> Tuple[ValueCoefficients, Policy]:
    solver = _solver(config)
    coeffs = solve_model(config, model, solver)
    return coeffs, hjb_policy(config, model, coeffs, solver)


def cmd_simulate(config: ExperimentConfig, args) -> None:
    model = build_model(config)
    scenario = draw_scenarios(model.hawkes, model.problem.grid, config.seed, 1)[0]
    policy = ConstantPolicy(np.full(model.params.num_users, args.u0))
    traj = simulate_scenario(model.params, policy, scenario, model.x0, model.problem.grid, model.sim_topology_at)
    out = config.output_folder
    GuideDataParser.write_events(traj.events, os.path.join(out, "events.csv"))
    GuideDataParser.write_trajectory(traj, os.path.join(out, "trajectory.csv"))
    GuideDataParser.write_cost(evaluate_cost(traj, model.problem), os.path.join(out, "cost.json"))
    logger.info(f"simulated {len(traj.events)} events for {model.params.num_users} users")


def cmd_solve(config: ExperimentConfig, args) -> None:
    model = build_model(config)
    coeffs = solve_model(config, model, _solver(config))
    if config.lam_mode == "replan":
        logger.info("replan mode: coefficients.json holds the initial plan, re-solves happen per run")
    GuideDataParser.write_json(GuideDataParser.coefficients_to_dict(coeffs),
                               os.path.join(config.output_folder, "coefficients.json"))
    GuideDataParser.save_topology(model.params.topology, os.path.join(config.output_folder, "topology.json"))


def _evaluate_and_write(config: ExperimentConfig, model: ExperimentModel, policy, name: str, n_runs: int) -> None:
    result = monte_carlo_cost(policy, model.problem, model.params, model.hawkes, model.x0, n_runs, config.seed,
                              workers=config.workers, keep_trajectories=True, topology_at=model.sim_topology_at)
    out = config.output_folder
    GuideDataParser.write_json(result.to_dict(), os.path.join(out, f"{name}_cost.json"))
    GuideDataParser.write_trajectory(result.trajectories[0], os.path.join(out, f"{name}_trajectory.csv"))
    logger.info(f"{name}: mean total cost {result.mean:.6g} over {result.n_runs} runs")


def cmd_control(config: ExperimentConfig, args) -> None:
    model = build_model(config)
    _evaluate_and_write(config, model, _hjb(config, model)[1], "hjb", args.runs or config.n_runs)


def cmd_baseline(config: ExperimentConfig, args) -> None:
    model = build_model(config)
    out = config.output_folder
    method = args.method
    if method == "ce":
        ce = CEConfig(config.ce_population, config.ce_elite_fraction, 0.0, config.ce_init_stddev,
                      config.ce_max_iters, config.ce_rel_tol, config.ce_segments)
        policy, history = cross_entropy_optimize(model.problem, model.params, model.hawkes, model.x0, ce,
                                                 config.seed, n_runs=config.search_runs, workers=config.workers)
        GuideDataParser.write_cost_history(history, os.path.join(out, "cost_history.csv"))
    elif method == "fd":
        fd = FDConfig(config.fd_eps, config.fd_step, config.fd_max_iters, config.fd_rel_tol,
                      segments=config.fd_segments)
        policy, history = finite_difference_optimize(model.problem, model.params, model.hawkes, model.x0, fd,
                                                     config.seed, n_runs=config.search_runs, workers=config.workers)
        GuideDataParser.write_cost_history(history, os.path.join(out, "cost_history.csv"))
    elif method == "greedy":
        reference_runs = monte_carlo_cost(_hjb(config, model)[1], model.problem, model.params, model.hawkes,
                                          model.x0, config.n_runs, config.seed, workers=config.workers,
                                          keep_trajectories=True, topology_at=model.sim_topology_at)
        reference = reference_state_cost(reference_runs.trajectories, model.problem)
        policy = greedy_policy(model.problem, model.params, reference,
                               GreedyConfig(config.greedy_k, config.greedy_checkpoints, config.greedy_c))
    elif config.constant_level is not None:
        policy = constant_policy(np.full(model.params.num_users, float(config.constant_level)))
    else:
        policy, _ = constant_grid_search(model.problem, model.params, model.hawkes, model.x0,
                                         constant_levels(*config.constant_range), config.n_runs, config.seed,
                                         workers=config.workers)
    _evaluate_and_write(config, model, policy, method, config.n_runs)


def cmd_fit_network(config: ExperimentConfig, args) -> None:
    horizon = (args.horizon[0], args.horizon[1])
    events = GuideDataParser.read_links(args.links, horizon)
    if args.topology:
        topology = GuideDataParser.load_topology(args.topology)
    else:
        topology = build_topology([], args.num_users)
    skeleton = LinkCreationModel.over_all_pairs(np.zeros(args.num_users), topology)
    fit = fit_gamma(events, skeleton)
    GuideDataParser.write_json(fit.to_dict(), os.path.join(config.output_folder, "fitted_model.json"))


def cmd_experiment(config: ExperimentConfig, args) -> None:
    report = run_experiment(config, emit=False)
    emit_reports(report, config.output_folder)
    for name, cost in report.ranking():
        logger.info(f"{name:>10}: {cost:.6g}")


COMMANDS = {
    "simulate": cmd_simulate,
    "solve": cmd_solve,
    "control": cmd_control,
    "baseline": cmd_baseline,
    "fit-network": cmd_fit_network,
    "experiment": cmd_experiment,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_configuration(args)
    except (ConfigError, ValidationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    setup_logging(os.path.join(config.output_folder, "logs"), config.log_level)
    create_folder(config.output_folder)
    try:
        COMMANDS[args.command](config, args)
    except StageError as e:
        logger.error(str(e))
        if isinstance(e.cause, NumericalError):
            return EXIT_NUMERICAL
        return EXIT_CONFIG
    except NumericalError as e:
        logger.error(f"numerical abort: {str(e)}")
        return EXIT_NUMERICAL
    except (ConfigError, ValidationError) as e:
        logger.error(f"config error: {str(e)}")
        return EXIT_CONFIG
    except GuideError as e:
        logger.error(str(e))
        return EXIT_CONFIG
    return EXIT_OK
