import numpy as np
import pytest

from src.core.baselines import CostHistory
from src.core.dynnet import LinkEvents
from src.core.errors import ValidationError
from src.core.hjb import solve_lsog, solve_oim
from src.core.network import ControlProblem, ObjectiveKind, OpinionParams, build_topology
from src.core.pointproc import EventLog
from src.core.sdesim import CostBreakdown, Trajectory
from src.utils.data_parser import GuideDataParser


def test_topology_file(tmp_path):
    topology = build_topology([(0, 1, 0.25), (2, 2, 0.5)], 3, allow_self_loops=True)
    path = str(tmp_path / "topology.json")
    GuideDataParser.save_topology(topology, path)
    loaded = GuideDataParser.load_topology(path)
    assert loaded == topology
    assert loaded.allow_self_loops


def test_malformed_topology_is_rejected():
    with pytest.raises(ValidationError):
        GuideDataParser.topology_from_dict({"edges": [[0, 1, 0.2]]})
    with pytest.raises(ValidationError):
        GuideDataParser.topology_from_dict({"num_users": 2, "edges": [[0, 5, 0.2]]})


def test_events_file(tmp_path):
    events = EventLog([0.5, 1.25, 3.0], [1, 0, 1], 0.0, 10.0, 2)
    path = str(tmp_path / "events.csv")
    GuideDataParser.write_events(events, path)
    with open(path) as f:
        assert f.readline().strip() == "t,user"
        assert f.readline().strip() == "0.500000000,1"
    loaded = GuideDataParser.read_events(path, 0.0, 10.0, 2)
    np.testing.assert_array_equal(loaded.times, events.times)
    np.testing.assert_array_equal(loaded.users, events.users)


def test_header_mismatch(tmp_path):
    path = tmp_path / "links.csv"
    path.write_text("time,from,to\n1.0,0,1\n")
    with pytest.raises(ValidationError):
        GuideDataParser.read_links(str(path), (0.0, 10.0))


def test_trajectory_file(tmp_path):
    grid = np.array([0.0, 0.5, 1.0])
    x = np.array([[1.0, 2.0], [1.5, 2.5], [0.1, 0.2]])
    u = np.zeros((3, 2))
    traj = Trajectory(grid, x, u, EventLog.empty(0.0, 1.0, 2))
    path = str(tmp_path / "trajectory.csv")
    GuideDataParser.write_trajectory(traj, path, users=[1])
    rows = GuideDataParser.read_csv(path, GuideDataParser.HEADERS["trajectory"])
    assert rows == [["0.0", "1", "2.0", "0.0"], ["0.5", "1", "2.5", "0.0"], ["1.0", "1", "0.2", "0.0"]]


def test_cost_and_history_files(tmp_path):
    cost_path = str(tmp_path / "cost.json")
    GuideDataParser.write_cost(CostBreakdown(1.0, 0.5, 0.25), cost_path)
    assert GuideDataParser.read_json(cost_path)["total"] == 1.75

    history = CostHistory()
    history.append(0, 3.0, 2.0)
    history.append(1, 2.5, 1.5)
    history_path = str(tmp_path / "history.csv")
    GuideDataParser.write_cost_history(history, history_path)
    assert GuideDataParser.read_csv(history_path, GuideDataParser.HEADERS["cost_history"]) == [
        ["0", "3.0", "2.0"], ["1", "2.5", "1.5"]]


def test_lsog_coefficients_document():
    params = OpinionParams([0.1, -0.3], build_topology([(0, 1, 0.2)], 2), theta=0.2)
    problem = ControlProblem(ObjectiveKind.LSOG, 10.0, 0.0, 1.0, 10, target=[1.0, 1.0])
    coeffs = solve_lsog(problem, params, np.full(2, 0.5))
    data = GuideDataParser.coefficients_to_dict(coeffs)
    assert len(data["v11_lower"][0]) == 3
    loaded = GuideDataParser.coefficients_from_dict(data)
    np.testing.assert_allclose(loaded.v11, coeffs.v11, rtol=1e-14, atol=0)
    np.testing.assert_array_equal(loaded.v1, coeffs.v1)


def test_oim_coefficients_have_no_quadratic_part():
    params = OpinionParams([0.0], build_topology([], 1))
    problem = ControlProblem(ObjectiveKind.OIM, 10.0, 0.0, 1.0, 10, num_users=1)
    data = GuideDataParser.coefficients_to_dict(solve_oim(problem, params, np.zeros(1)))
    assert "v11_lower" not in data
    assert GuideDataParser.coefficients_from_dict(data).v11 is None


def test_links_file(tmp_path):
    events = LinkEvents.from_records([(2.0, 0, 1), (0.5, 1, 2)], (0.0, 10.0))
    path = str(tmp_path / "links.csv")
    GuideDataParser.write_links(events, path)
    assert GuideDataParser.read_links(path, (0.0, 10.0)).records() == [(0.5, 1, 2), (2.0, 0, 1)]
