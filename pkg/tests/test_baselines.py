import numpy as np
import pytest

from src.core.baselines import (
    CEConfig, ConstantPolicy, FDConfig, GreedyConfig, GreedyPolicy, PiecewiseConstantPolicy, constant_grid_search,
    constant_levels, constant_policy, cross_entropy_optimize, cross_entropy_search, finite_difference_gradient,
    finite_difference_optimize, finite_difference_search, greedy_policy, reference_state_cost,
)
from src.core.errors import NumericalError, ValidationError
from src.core.hjb import FeedbackPolicy, solve_lsog
from src.core.network import ControlProblem, HawkesParams, ObjectiveKind, OpinionParams
from src.core.pointproc import EventLog
from src.core.sdesim import Trajectory, euler_simulate, evaluate_cost, monte_carlo_cost


def shifted_square(candidate, iteration):
    return float(np.sum((np.asarray(candidate) - 3.0) ** 2))


def scalar_problem(horizon_end=10.0, num_intervals=100, rho=10.0):
    return ControlProblem(ObjectiveKind.LSOG, rho, 0.0, horizon_end, num_intervals, target=[1.0])


def deterministic_cost(problem, params, policy, x0=-10.0):
    events = EventLog.empty(problem.t0, problem.horizon_end, params.num_users)
    return evaluate_cost(euler_simulate(params, policy, events, x0, problem.grid, 0), problem).total


# Piecewise-constant and constant policies

def test_segments_spread_over_intervals():
    grid = np.linspace(0, 1, 11)
    policy = PiecewiseConstantPolicy.from_segments(grid, [[1.0], [2.0], [3.0]])
    values = [policy.evaluate(np.zeros(1), t)[0] for t in grid[:-1]]
    assert values == [1.0] * 4 + [2.0] * 3 + [3.0] * 3
    # the last grid point holds the last interval's row
    assert policy.evaluate(np.zeros(1), 1.0)[0] == 3.0


def test_table_rows_must_match_intervals():
    with pytest.raises(ValidationError):
        PiecewiseConstantPolicy(np.linspace(0, 1, 11), np.zeros((9, 1)))
    with pytest.raises(ValidationError):
        PiecewiseConstantPolicy.from_segments(np.linspace(0, 1, 11), np.zeros((11, 1)))


def test_constant_policy_ignores_state_and_time():
    policy = constant_policy([0.5, -1.0])
    np.testing.assert_array_equal(policy.evaluate(np.array([3.0, 4.0]), 0.1),
                                  policy.evaluate(np.array([-7.0, 0.0]), 9.0))
    with pytest.raises(ValidationError):
        constant_policy([np.nan])


def test_zero_constant_is_uncontrolled(two_user_topology):
    params = OpinionParams([0.2, -0.2], two_user_topology, theta=0.2)
    hawkes = HawkesParams([0.5, 0.5], two_user_topology)
    problem = ControlProblem(ObjectiveKind.LSOG, 10.0, 0.0, 2.0, 20, target=[1.0, 1.0])
    zero = monte_carlo_cost(constant_policy(np.zeros(2)), problem, params, hawkes, -1.0, 4, seed=2)
    table = PiecewiseConstantPolicy(problem.grid, np.zeros((20, 2)))
    assert monte_carlo_cost(table, problem, params, hawkes, -1.0, 4, seed=2).mean == zero.mean
    assert all(run.control_cost == 0.0 for run in zero.runs)


def test_constant_levels():
    levels = constant_levels(-5.0, 5.0)
    assert levels.size == 41
    assert levels[0] == -5.0 and levels[-1] == 5.0
    assert levels[20] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValidationError):
        constant_levels(1.0, 1.0)


def test_constant_search_does_not_beat_feedback(scalar_opinion, quiet_hawkes):
    problem = scalar_problem()
    params = scalar_opinion()
    policy, costs = constant_grid_search(problem, params, quiet_hawkes(1), -10.0, constant_levels(-2.0, 2.0),
                                         n_runs=1, seed=0)
    assert costs.size == 41
    assert policy.u0[0] == constant_levels(-2.0, 2.0)[int(np.argmin(costs))]
    hjb = deterministic_cost(problem, params, FeedbackPolicy(solve_lsog(problem, params, np.zeros(1)), 10.0))
    assert costs.min() >= hjb * (1 - 1e-2)


def test_constant_search_is_thread_safe(two_user_topology):
    params = OpinionParams([0.2, -0.2], two_user_topology, theta=0.2)
    hawkes = HawkesParams([0.5, 0.5], two_user_topology)
    problem = ControlProblem(ObjectiveKind.LSOG, 10.0, 0.0, 2.0, 20, target=[1.0, 1.0])
    levels = constant_levels(-1.0, 1.0, 9)
    _, serial = constant_grid_search(problem, params, hawkes, -1.0, levels, 3, seed=5)
    _, threaded = constant_grid_search(problem, params, hawkes, -1.0, levels, 3, seed=5, workers=4)
    np.testing.assert_array_equal(serial, threaded)


# Cross-entropy

def test_cross_entropy_finds_quadratic_minimum():
    config = CEConfig(population_size=100, elite_fraction=0.1, max_iters=50, rel_tol=0.0)
    mean, history = cross_entropy_search(shifted_square, [0.0], config, seed=1)
    assert abs(mean[0] - 3.0) < 1e-2
    assert history.mean_costs[-1] < history.mean_costs[0]
    assert history.collapsed


def test_cross_entropy_zero_iterations():
    config = CEConfig(max_iters=0, init_mean=0.25)
    mean, history = cross_entropy_search(shifted_square, [0.25, 0.25], config, seed=0)
    np.testing.assert_array_equal(mean, [0.25, 0.25])
    assert len(history) == 0


def test_cross_entropy_is_reproducible():
    config = CEConfig(population_size=20, elite_fraction=0.2, max_iters=5)
    first, h1 = cross_entropy_search(shifted_square, [0.0, 1.0], config, seed=7)
    second, h2 = cross_entropy_search(shifted_square, [0.0, 1.0], config, seed=7, workers=4)
    np.testing.assert_array_equal(first, second)
    assert h1.rows() == h2.rows()


def test_cross_entropy_rel_tol_stops_early():
    config = CEConfig(population_size=50, elite_fraction=0.2, max_iters=50, rel_tol=0.5)
    _, history = cross_entropy_search(lambda c, it: 1.0 + float(np.sum(c ** 2)), [1.0], config, seed=3)
    assert history.converged
    assert len(history) < 50


def test_cross_entropy_config_checks():
    with pytest.raises(ValidationError):
        CEConfig(population_size=10, elite_fraction=0.1)
    with pytest.raises(ValidationError):
        CEConfig(elite_fraction=0.0)
    with pytest.raises(ValidationError):
        CEConfig(init_stddev=0.0)
    assert CEConfig(population_size=20, elite_fraction=0.1).n_elite == 2


def test_cross_entropy_optimize_zero_iterations(two_user_topology):
    params = OpinionParams([0.0, 0.0], two_user_topology)
    hawkes = HawkesParams([0.5, 0.5], two_user_topology)
    problem = ControlProblem(ObjectiveKind.LSOG, 10.0, 0.0, 1.0, 10, target=[1.0, 1.0])
    policy, history = cross_entropy_optimize(problem, params, hawkes, 0.0,
                                             CEConfig(max_iters=0, init_mean=0.3, segments=2), seed=0)
    np.testing.assert_array_equal(policy.u_table, np.full((10, 2), 0.3))
    assert len(history) == 0


def test_cross_entropy_optimize_workers_agree(two_user_topology):
    params = OpinionParams([0.0, 0.0], two_user_topology, theta=0.2)
    hawkes = HawkesParams([0.5, 0.5], two_user_topology)
    problem = ControlProblem(ObjectiveKind.LSOG, 10.0, 0.0, 1.0, 10, target=[1.0, 1.0])
    config = CEConfig(population_size=10, elite_fraction=0.2, max_iters=3, segments=2)
    serial, h1 = cross_entropy_optimize(problem, params, hawkes, -1.0, config, seed=4, n_runs=2)
    threaded, h2 = cross_entropy_optimize(problem, params, hawkes, -1.0, config, seed=4, n_runs=2, workers=3)
    np.testing.assert_array_equal(serial.u_table, threaded.u_table)
    assert h1.rows() == h2.rows()


@pytest.mark.slow
def test_cross_entropy_close_to_feedback(scalar_opinion, quiet_hawkes):
    problem = scalar_problem()
    params = scalar_opinion()
    config = CEConfig(population_size=100, elite_fraction=0.1, max_iters=50, rel_tol=0.0, segments=10)
    policy, _ = cross_entropy_optimize(problem, params, quiet_hawkes(1), -10.0, config, seed=0, n_runs=1)
    hjb = deterministic_cost(problem, params, FeedbackPolicy(solve_lsog(problem, params, np.zeros(1)), 10.0))
    assert deterministic_cost(problem, params, policy) <= hjb * 1.05


# Finite differences

def test_gradient_of_square():
    gradient = finite_difference_gradient(lambda u: float(u[0] ** 2), [1.0], eps=1e-3)
    assert gradient[0] == pytest.approx(2.0, abs=1e-6)


def test_gradient_needs_positive_eps():
    with pytest.raises(ValidationError):
        finite_difference_gradient(lambda u: 0.0, [1.0], eps=0.0)
    with pytest.raises(ValidationError):
        FDConfig(eps=0.0)


def test_descent_on_quadratic():
    config = FDConfig(eps=1e-3, step=0.1, max_iters=100, rel_tol=0.0, max_update=None)
    point, history = finite_difference_search(shifted_square, [0.0], config)
    assert abs(point[0] - 3.0) < 1e-3
    assert len(history) == 100


def test_search_steps_along_the_shared_gradient():
    def bowl(p, it):
        return float(p[0] ** 2 + 3.0 * p[0] * p[1] + np.exp(p[1]))

    start = np.array([0.7, -0.4])
    config = FDConfig(eps=1e-2, step=0.05, max_iters=1, rel_tol=0.0, max_update=None)
    point, _ = finite_difference_search(bowl, start, config)
    gradient = finite_difference_gradient(lambda p: bowl(p, 0), start, eps=1e-2)
    np.testing.assert_allclose(point, start - 0.05 * gradient, rtol=0, atol=1e-15)


def test_descent_update_is_clipped():
    config = FDConfig(eps=1e-3, step=1.0, max_iters=3, rel_tol=0.0, max_update=1.0)
    point, _ = finite_difference_search(lambda p, it: 100.0 * float(p[0]), [0.0], config)
    assert point[0] == pytest.approx(-3.0)


def test_non_finite_gradient_is_reported():
    def cliff(p, it):
        return np.inf if p[1] > 0 else 0.0

    with pytest.raises(NumericalError, match="entry 1"):
        finite_difference_search(cliff, [0.0, 0.0], FDConfig(eps=1e-2))


def test_finite_difference_optimize_improves(scalar_opinion, quiet_hawkes):
    problem = scalar_problem(horizon_end=5.0, num_intervals=50)
    params = scalar_opinion()
    config = FDConfig(eps=1e-2, step=0.05, max_iters=10, rel_tol=0.0, segments=2)
    policy, history = finite_difference_optimize(problem, params, quiet_hawkes(1), -10.0, config, seed=0, n_runs=1)
    assert policy.u_table.shape == (50, 1)
    assert history.mean_costs[-1] < history.mean_costs[0]
    assert deterministic_cost(problem, params, policy) < deterministic_cost(problem, params, constant_policy([0.0]))


# Greedy threshold rule

def test_greedy_idle_when_reference_is_high(scalar_opinion):
    problem = scalar_problem()
    params = scalar_opinion()
    policy = greedy_policy(problem, params, np.full(10, 1e9), GreedyConfig(k=1, n_checkpoints=10, c=5.0))
    assert deterministic_cost(problem, params, policy) == deterministic_cost(problem, params, constant_policy([0.0]))


def test_greedy_at_target_emits_nothing(scalar_opinion):
    problem = scalar_problem()
    params = scalar_opinion(b=1.0)
    policy = GreedyPolicy(problem, np.full(10, -1.0), GreedyConfig(k=1, n_checkpoints=10, c=5.0))
    events = EventLog.empty(0.0, 10.0, 1)
    traj = euler_simulate(params, policy, events, 1.0, problem.grid, 0)
    np.testing.assert_array_equal(traj.u, 0.0)


def test_greedy_pulse_is_held_between_checkpoints():
    problem = ControlProblem(ObjectiveKind.LSOG, 10.0, 0.0, 1.0, 10, target=[1.0, 1.0])
    policy = GreedyPolicy(problem, np.zeros(2), GreedyConfig(k=1, n_checkpoints=2, c=2.0)).bind(None)
    np.testing.assert_array_equal(policy.checkpoints, [0, 5])
    x = np.array([1.0, -2.0])
    first = policy.evaluate(x, 0.0)
    np.testing.assert_allclose(first, [0.0, 2.0])
    # state changes do not matter until the next checkpoint
    np.testing.assert_array_equal(policy.evaluate(np.array([5.0, 5.0]), 0.3), first)
    np.testing.assert_allclose(policy.evaluate(np.array([1.0, 1.0]), 0.5), [0.0, 0.0])
    assert policy.triggers == 1


def test_greedy_oim_pushes_everyone_up():
    problem = ControlProblem(ObjectiveKind.OIM, 10.0, 0.0, 1.0, 10, num_users=3)
    policy = GreedyPolicy(problem, np.full(11, 0.0), GreedyConfig(k=2, n_checkpoints=5, c=0.5))
    np.testing.assert_array_equal(policy.evaluate(np.full(3, -1.0), 0.0), np.full(3, 0.5))
    assert policy.evaluate(np.full(3, -1.0), 0.2).tolist() == [0.5, 0.5, 0.5]
    np.testing.assert_array_equal(policy.evaluate(np.full(3, 1.0), 0.4), 0.0)


def test_greedy_threshold_for_negative_reference():
    problem = ControlProblem(ObjectiveKind.OIM, 10.0, 0.0, 1.0, 10, num_users=1)
    policy = GreedyPolicy(problem, [-4.0], GreedyConfig(k=2, n_checkpoints=1, c=1.0))
    # threshold -4 + |-4| = 0, not k * ref = -8
    assert policy.bind(None).evaluate(np.array([3.0]), 0.0).tolist() == [0.0]
    assert policy.bind(None).evaluate(np.array([-1.0]), 0.0).tolist() == [1.0]


def test_greedy_bind_resets_state():
    problem = ControlProblem(ObjectiveKind.LSOG, 10.0, 0.0, 1.0, 10, target=[1.0])
    policy = GreedyPolicy(problem, np.zeros(10), GreedyConfig(n_checkpoints=10))
    for t in problem.grid:
        policy.evaluate(np.array([-1.0]), t)
    assert policy.triggers == 10
    assert policy.bind(None).triggers == 0


def test_greedy_reference_checks():
    problem = scalar_problem()
    with pytest.raises(ValidationError):
        GreedyPolicy(problem, np.zeros(7), GreedyConfig(n_checkpoints=10))
    with pytest.raises(ValidationError):
        GreedyConfig(k=0.5)
    with pytest.raises(ValidationError):
        GreedyConfig(n_checkpoints=0)


def test_reference_state_cost_averages_runs():
    problem = ControlProblem(ObjectiveKind.LSOG, 10.0, 0.0, 1.0, 2, target=[0.0])
    events = EventLog.empty(0.0, 1.0, 1)
    runs = [Trajectory(problem.grid, np.full((3, 1), value), np.zeros((3, 1)), events) for value in (1.0, 3.0)]
    np.testing.assert_allclose(reference_state_cost(runs, problem), [2.5, 2.5, 2.5])
    with pytest.raises(ValidationError):
        reference_state_cost([], problem)
