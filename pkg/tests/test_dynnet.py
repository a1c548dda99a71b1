import numpy as np
import pytest

from src.core.dynnet import (
    LinkCreationModel, LinkEvents, default_candidates, expected_adjacency, expected_topology, expected_topology_at,
    fit_gamma, log_likelihood, node_birth_to_links, realized_topology_at, simulate_link_creation,
)
from src.core.errors import ValidationError
from src.core.hjb import solve_lsog
from src.core.network import ControlProblem, ObjectiveKind, OpinionParams, build_topology


def all_pairs(num_users, gamma, topology=None, nominal_weight=None):
    topology = topology or build_topology([], num_users)
    return LinkCreationModel.over_all_pairs(np.full(num_users, gamma), topology, nominal_weight)


def star_model(sources, targets_per_source, gamma):
    """Each of the first `sources` users may follow each of the remaining users"""
    num_users = sources + targets_per_source
    candidates = [(i, s) for i in range(sources) for s in range(sources, num_users)]
    rates = np.zeros(num_users)
    rates[:sources] = gamma
    return LinkCreationModel(rates, build_topology([], num_users), tuple(candidates))


def test_default_candidates_skip_links_and_self():
    topology = build_topology([(0, 1, 0.4)], 3)
    assert default_candidates(topology) == ((0, 2), (1, 0), (1, 2), (2, 0), (2, 1))


def test_model_rejects_bad_candidates():
    topology = build_topology([(0, 1, 0.4)], 3)
    with pytest.raises(ValidationError):
        LinkCreationModel(np.zeros(3), topology, ((0, 1),))
    with pytest.raises(ValidationError):
        LinkCreationModel(np.zeros(3), topology, ((2, 2),))
    with pytest.raises(ValidationError):
        LinkCreationModel(np.zeros(2), topology, ())
    with pytest.raises(ValidationError):
        LinkCreationModel(np.full(3, -0.1), topology, ())


def test_nominal_weight_defaults():
    assert all_pairs(3, 0.1).nominal_weight == 1.0
    topology = build_topology([(0, 1, 0.2), (1, 2, 0.4)], 3)
    assert all_pairs(3, 0.1, topology).nominal_weight == pytest.approx(0.3)
    assert all_pairs(3, 0.1, topology, nominal_weight=2.0).nominal_weight == 2.0


def test_link_events_checks():
    with pytest.raises(ValidationError):
        LinkEvents([1.0, 2.0], [0, 0], [1, 1], 0.0, 10.0)
    with pytest.raises(ValidationError):
        LinkEvents([1.0], [0], [1], 0.0, 1.0)
    events = LinkEvents.from_records([(4.0, 1, 0), (2.0, 0, 1)], (0.0, 10.0))
    assert events.records() == [(2.0, 0, 1), (4.0, 1, 0)]
    assert events.link_times() == {(0, 1): 2.0, (1, 0): 4.0}


def test_zero_rate_creates_nothing():
    assert len(simulate_link_creation(all_pairs(10, 0.0), (0.0, 10.0), seed=0)) == 0


def test_link_fraction_follows_exponential_law():
    model = all_pairs(317, 0.5)
    events = simulate_link_creation(model, (0.0, 10.0), seed=2)
    fraction = len(events) / len(model.candidates)
    assert len(model.candidates) > 100_000
    assert fraction == pytest.approx(1 - np.exp(-5.0), rel=0.01)


def test_link_simulation_is_deterministic():
    model = all_pairs(20, 0.2)
    first = simulate_link_creation(model, (0.0, 5.0), seed=9)
    second = simulate_link_creation(model, (0.0, 5.0), seed=9)
    assert first.records() == second.records()
    assert first.records() != simulate_link_creation(model, (0.0, 5.0), seed=10).records()


def test_fit_single_pair():
    skeleton = LinkCreationModel(np.zeros(2), build_topology([], 2), ((0, 1),))
    events = LinkEvents.from_records([(2.0, 0, 1)], (0.0, 10.0))
    fit = fit_gamma(events, skeleton)
    np.testing.assert_allclose(fit.gamma, [0.5, 0.0])
    assert fit.n_events == 1
    assert fit.loglik == pytest.approx(np.log(0.5) - 1.0)


def test_fit_without_events_is_zero():
    skeleton = all_pairs(4, 0.0)
    fit = fit_gamma(LinkEvents.from_records([], (0.0, 10.0)), skeleton)
    np.testing.assert_array_equal(fit.gamma, np.zeros(4))
    assert fit.to_dict() == {"gamma": [0.0] * 4, "loglik": 0.0, "n_events": 0}


def test_fit_rejects_inconsistent_events():
    skeleton = LinkCreationModel(np.zeros(3), build_topology([], 3), ((0, 1),))
    with pytest.raises(ValidationError):
        fit_gamma(LinkEvents.from_records([(1.0, 1, 2)], (0.0, 10.0)), skeleton)
    # a link at the horizon start leaves no at-risk time
    with pytest.raises(ValidationError):
        fit_gamma(LinkEvents.from_records([(0.0, 0, 1)], (0.0, 10.0)), skeleton)


def test_fit_is_a_stationary_local_maximum():
    model = star_model(4, 30, 0.2)
    events = simulate_link_creation(model, (0.0, 10.0), seed=1)
    fit = fit_gamma(events, model.with_gamma(np.zeros(model.num_users)))
    active = fit.gamma > 0
    assert active.sum() == 4
    created = np.bincount(events.sources, minlength=model.num_users)
    exposure = created[active] / fit.gamma[active]
    # d loglik / d gamma_u = n_u / gamma_u - R_u vanishes at the fit
    for u in np.flatnonzero(active):
        bumped = fit.gamma.copy()
        for factor in (0.9, 1.1):
            bumped[u] = fit.gamma[u] * factor
            assert log_likelihood(bumped, events, model) <= fit.loglik
    step = 1e-6
    for u in np.flatnonzero(active):
        up, down = fit.gamma.copy(), fit.gamma.copy()
        up[u] += step
        down[u] -= step
        slope = (log_likelihood(up, events, model) - log_likelihood(down, events, model)) / (2 * step)
        assert abs(slope) <= 1e-4 * exposure.max()


def test_planted_rate_is_recovered():
    estimates = []
    for seed in range(10):
        model = star_model(10, 500, 0.3)
        events = simulate_link_creation(model, (0.0, 10.0), seed=seed)
        fit = fit_gamma(events, model.with_gamma(np.zeros(model.num_users)))
        per_seed = fit.gamma[:10].mean()
        assert per_seed == pytest.approx(0.3, rel=0.1)
        estimates.append(per_seed)
    assert np.mean(estimates) == pytest.approx(0.3, rel=0.03)


def test_expected_adjacency_at_start_is_initial():
    topology = build_topology([(0, 1, 0.4), (2, 0, 0.2)], 3)
    model = all_pairs(3, 0.5, topology)
    np.testing.assert_array_equal(expected_adjacency(model, 0.0), topology.dense())
    with pytest.raises(ValidationError):
        expected_adjacency(model, -1.0)


def test_expected_adjacency_closed_form():
    topology = build_topology([(0, 1, 0.4), (2, 0, 0.2)], 3)
    model = all_pairs(3, 0.5, topology)
    matrix = expected_adjacency(model, 2.0)
    weight = model.nominal_weight
    for i, s in model.candidates:
        assert matrix[i, s] == pytest.approx((1 - np.exp(-1.0)) * weight)
    assert matrix[0, 1] == 0.4 and matrix[2, 0] == 0.2
    assert np.all(np.diag(matrix) == 0)


def test_expected_adjacency_is_monotone_and_bounded():
    model = LinkCreationModel([0.1, 0.7, 2.0], build_topology([], 3), ((0, 1), (1, 2), (2, 0)))
    previous = np.zeros((3, 3))
    for t in np.linspace(0, 20, 41):
        matrix = expected_adjacency(model, t)
        assert np.all(matrix >= previous)
        assert np.all((matrix >= 0) & (matrix <= 1))
        previous = matrix


@pytest.mark.parametrize("t", [1.0, 2.0, 5.0])
def test_expected_adjacency_matches_simulation(t):
    model = all_pairs(101, 0.5)
    events = simulate_link_creation(model, (0.0, 10.0), seed=int(t * 10))
    linked = np.sum(events.times <= t) / len(model.candidates)
    sources, targets = model.candidate_arrays()
    assert linked == pytest.approx(expected_adjacency(model, t)[sources, targets].mean(), abs=0.02)


def test_expected_topology_cache():
    model = all_pairs(3, 0.5, build_topology([(0, 1, 0.4)], 3))
    topology_at = expected_topology_at(model)
    assert topology_at(1.0) is topology_at(1.0)
    np.testing.assert_allclose(topology_at(1.0).dense(), expected_topology(model, 1.0).dense())


def test_link_clocks_start_at_horizon_start():
    model = all_pairs(3, 0.5)
    assert expected_adjacency(model, 5.0, t0=5.0).max() == 0.0
    np.testing.assert_allclose(expected_adjacency(model, 7.0, t0=5.0), expected_adjacency(model, 2.0))
    with pytest.raises(ValidationError):
        expected_adjacency(model, 4.0, t0=5.0)

    events = simulate_link_creation(model, (5.0, 6.0), seed=3)
    assert events.times.size == 0 or events.times.min() > 5.0
    topology_at = expected_topology_at(model, t0=5.0)
    assert topology_at(5.0).nnz == 0
    np.testing.assert_allclose(topology_at(6.0).dense(), expected_topology(model, 1.0).dense())


def test_realized_topology_adds_links_over_time():
    model = LinkCreationModel(np.zeros(3), build_topology([(0, 1, 0.4)], 3), ((1, 2), (2, 0)), 0.25)
    events = LinkEvents.from_records([(3.0, 1, 2)], (0.0, 10.0))
    topology_at = realized_topology_at(events, model)
    assert topology_at(2.9).edges == [(0, 1, 0.4)]
    assert sorted(topology_at(3.0).edges) == [(0, 1, 0.4), (1, 2, 0.25)]


def test_expected_network_gives_finite_coefficients():
    topology = build_topology([(0, 1, 0.3), (1, 2, 0.3)], 4)
    model = all_pairs(4, 0.2, topology)
    params = OpinionParams(np.zeros(4), topology, theta=0.2)
    problem = ControlProblem(ObjectiveKind.LSOG, 10.0, 0.0, 5.0, 50, target=np.ones(4))
    static = solve_lsog(problem, params, np.full(4, 0.5))
    dynamic = solve_lsog(problem, params, np.full(4, 0.5), topology_at=expected_topology_at(model))
    assert np.all(np.isfinite(static.v11)) and np.all(np.isfinite(dynamic.v11))
    assert not np.allclose(static.v11[0], dynamic.v11[0])


def test_no_births():
    births = node_birth_to_links([], 5, (0.0, 10.0))
    assert len(births.events) == 0
    assert births.skeleton.candidates == ()
    np.testing.assert_array_equal(births.birth_times, np.zeros(5))


def test_single_birth():
    births = node_birth_to_links([(3.0, 5, 2)], 10, (0.0, 10.0))
    assert births.events.records() == [(3.0, 5, 2)]
    assert births.birth_times[5] == 3.0
    assert np.all(np.delete(births.birth_times, 5) == 0.0)
    assert births.skeleton.candidates == ((5, 2),)


def test_birth_checks():
    with pytest.raises(ValidationError):
        node_birth_to_links([(1.0, 10, 2)], 10, (0.0, 10.0))
    with pytest.raises(ValidationError):
        node_birth_to_links([(3.0, 1, 2), (1.0, 4, 2)], 10, (0.0, 10.0))
    with pytest.raises(ValidationError):
        node_birth_to_links([], 3, (0.0, 10.0), initial_topology=build_topology([], 4))


def test_births_match_hand_written_link_process():
    horizon = (0.0, 10.0)
    births = node_birth_to_links([(3.0, 5, 2), (6.0, 7, 5)], 8, horizon)
    fitted = births.skeleton.with_gamma(fit_gamma(births.events, births.skeleton).gamma)

    gamma = np.zeros(8)
    gamma[5], gamma[7] = 1 / 3.0, 1 / 6.0
    by_hand = LinkCreationModel(gamma, build_topology([], 8), ((5, 2), (7, 5)))
    np.testing.assert_allclose(fitted.gamma, by_hand.gamma, rtol=1e-15)

    params = OpinionParams(np.zeros(8), build_topology([], 8), theta=0.1)
    problem = ControlProblem(ObjectiveKind.LSOG, 10.0, 0.0, 10.0, 50, target=np.ones(8))
    lam = np.full(8, 0.5)
    from_births = solve_lsog(problem, params, lam, topology_at=expected_topology_at(fitted))
    from_links = solve_lsog(problem, params, lam, topology_at=expected_topology_at(by_hand))
    np.testing.assert_allclose(from_births.v11[0], from_links.v11[0], rtol=0, atol=1e-12)
