import csv
import json
import os
from typing import Dict, Any, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.core.dynnet import LinkEvents
from src.core.errors import ValidationError
from src.core.network import NetworkTopology, ObjectiveKind, build_topology
from src.core.pointproc import EventLog
from src.core.hjb import ValueCoefficients


def _num(value: float) -> str:
    """Shortest text that reads back to the same float"""
    return repr(float(value))


class GuideDataParser:
    """Readers and writers for every file the library exchanges"""

    HEADERS = {
        "events": ["t", "user"],
        "trajectory": ["t", "user", "x", "u"],
        "links": ["t", "source", "target"],
        "cost_history": ["iter", "mean_cost", "best_cost"],
        "instantaneous_cost": ["t", "method", "mean", "stddev"],
        "trajectories": ["t", "user", "method", "x", "u"],
    }

    # Topology

    @staticmethod
    def topology_to_dict(topology: NetworkTopology) -> Dict[str, Any]:
        return {
            "num_users": topology.num_users,
            "allow_self_loops": topology.allow_self_loops,
            "edges": [[i, j, w] for i, j, w in topology.edges],
        }

    @staticmethod
    def topology_from_dict(data: Dict[str, Any]) -> NetworkTopology:
        try:
            return build_topology(data["edges"], int(data["num_users"]), bool(data.get("allow_self_loops", False)))
        except (KeyError, TypeError, IndexError) as e:
            raise ValidationError(f"malformed topology document: {e}") from e

    @staticmethod
    def save_topology(topology: NetworkTopology, path: str) -> None:
        GuideDataParser.write_json(GuideDataParser.topology_to_dict(topology), path)

    @staticmethod
    def load_topology(path: str) -> NetworkTopology:
        return GuideDataParser.topology_from_dict(GuideDataParser.read_json(path))

    # Event logs

    @staticmethod
    def write_events(events: EventLog, path: str) -> None:
        rows = ([f"{t:.9f}", str(int(u))] for t, u in zip(events.times, events.users))
        GuideDataParser.write_csv(path, GuideDataParser.HEADERS["events"], rows)

    @staticmethod
    def read_events(path: str, t0: float, horizon_end: float, num_users: int) -> EventLog:
        rows = GuideDataParser.read_csv(path, GuideDataParser.HEADERS["events"])
        times = np.array([float(r[0]) for r in rows])
        users = np.array([int(r[1]) for r in rows], dtype=np.int64)
        return EventLog(times, users, t0, horizon_end, num_users)

    # Trajectories and costs

    @staticmethod
    def trajectory_rows(grid, x: np.ndarray, u: np.ndarray,
                        users: Optional[Sequence[int]] = None) -> List[List[str]]:
        users = range(x.shape[1]) if users is None else users
        return [[_num(t), str(user), _num(x[k, user]), _num(u[k, user])]
                for k, t in enumerate(grid) for user in users]

    @staticmethod
    def write_trajectory(traj, path: str, users: Optional[Sequence[int]] = None) -> None:
        rows = GuideDataParser.trajectory_rows(traj.grid, traj.x, traj.u, users)
        GuideDataParser.write_csv(path, GuideDataParser.HEADERS["trajectory"], rows)

    @staticmethod
    def write_cost(cost, path: str) -> None:
        GuideDataParser.write_json(cost.to_dict(), path)

    @staticmethod
    def write_cost_history(history, path: str) -> None:
        rows = ([str(i), _num(mean), _num(best)] for i, mean, best in history.rows())
        GuideDataParser.write_csv(path, GuideDataParser.HEADERS["cost_history"], rows)

    # Value coefficients, v11 stored as its lower triangle

    @staticmethod
    def coefficients_to_dict(coeffs: ValueCoefficients) -> Dict[str, Any]:
        data = {
            "kind": coeffs.kind.value,
            "num_users": coeffs.num_users,
            "grid": coeffs.grid.tolist(),
            "v0": coeffs.v0.tolist(),
            "v1": coeffs.v1.tolist(),
        }
        if coeffs.v11 is not None:
            rows, cols = np.tril_indices(coeffs.num_users)
            data["v11_lower"] = coeffs.v11[:, rows, cols].tolist()
        return data

    @staticmethod
    def coefficients_from_dict(data: Dict[str, Any]) -> ValueCoefficients:
        kind = ObjectiveKind(data["kind"])
        n = int(data["num_users"])
        grid = np.array(data["grid"], dtype=float)
        v11 = None
        if kind is ObjectiveKind.LSOG:
            lower = np.array(data["v11_lower"], dtype=float)
            rows, cols = np.tril_indices(n)
            v11 = np.zeros((grid.size, n, n))
            v11[:, rows, cols] = lower
            v11[:, cols, rows] = lower
        return ValueCoefficients(grid, np.array(data["v0"], dtype=float), np.array(data["v1"], dtype=float),
                                 v11, kind)

    # Link events

    @staticmethod
    def write_links(events: LinkEvents, path: str) -> None:
        rows = ([f"{t:.9f}", str(u), str(s)] for t, u, s in events.records())
        GuideDataParser.write_csv(path, GuideDataParser.HEADERS["links"], rows)

    @staticmethod
    def read_links(path: str, horizon: Tuple[float, float]) -> LinkEvents:
        rows = GuideDataParser.read_csv(path, GuideDataParser.HEADERS["links"])
        return LinkEvents.from_records(((float(t), int(u), int(s)) for t, u, s in rows), horizon)

    # Plain files

    @staticmethod
    def write_json(data: Dict[str, Any], path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=4)
            f.write("\n")

    @staticmethod
    def read_json(path: str) -> Dict[str, Any]:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)

    @staticmethod
    def write_csv(path: str, header: List[str], rows: Iterable[Sequence[str]]) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)

    @staticmethod
    def read_csv(path: str, header: List[str]) -> List[List[str]]:
        with open(path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.reader(f)
            found = next(reader, None)
            if found != header:
                raise ValidationError(f"{path}: expected header {header}, found {found}")
            return [row for row in reader if row]
