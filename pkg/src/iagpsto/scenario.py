"""Scenario files: a YAML description of robot, obstacles, start and goal."""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import world as W
from .trajgp import ParameterError

SCHEMA_VERSION = 1
CLASSES = ("A", "B", "C")


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario description."""


@dataclass(frozen=True, eq=False)
class Scenario:
    id: str
    robot: W.RobotModel
    grid: W.SdfGrid
    start: np.ndarray
    goal: np.ndarray
    class_hint: str
    repeats: int = 5
    params: W.CollisionParams = field(default_factory=W.CollisionParams)
    source: dict = field(default_factory=dict)

    @property
    def world(self) -> W.World:
        return W.World(self.robot, self.grid, self.params)


def _vec(d: dict, key: str, n: int | None = None) -> np.ndarray:
    if key not in d:
        raise ScenarioError(f"missing field {key!r}")
    v = np.asarray(d[key], dtype=float).ravel()
    if n is not None and v.size != n:
        raise ScenarioError(f"{key!r} needs {n} entries")
    return v


def _primitive(o: dict):
    kind = o.get("type")
    if kind == "disc":
        return W.Disc(_vec(o, "center", 2), float(o["radius"]))
    if kind == "box":
        return W.Box(_vec(o, "center", 2), _vec(o, "half", 2))
    if kind == "capsule":
        return W.Capsule(_vec(o, "a", 2), _vec(o, "b", 2), float(o["radius"]))
    raise ScenarioError(f"unknown obstacle type {kind!r}")


def _robot(r: dict) -> W.RobotModel:
    kind = r.get("kind")
    if kind == "point":
        return W.RobotModel.point(float(r.get("radius", 0.02)), _vec(r, "lo", 2), _vec(r, "hi", 2))
    if kind == "arm":
        links = _vec(r, "links")
        lo = r.get("lo")
        hi = r.get("hi")
        return W.RobotModel.planar_arm(links, int(r.get("balls_per_link", 3)), float(r.get("radius", 0.03)),
                                       r.get("base", (0.0, 0.0)),
                                       None if lo is None else np.asarray(lo, dtype=float),
                                       None if hi is None else np.asarray(hi, dtype=float),
                                       r.get("masses"))
    raise ScenarioError(f"unknown robot kind {kind!r}")


def from_dict(d: dict) -> Scenario:
    if not isinstance(d, dict):
        raise ScenarioError("scenario must be a mapping")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {d.get('schema_version')!r}")
    try:
        robot = _robot(d["robot"])
        w = d["world"]
        prims = [_primitive(o) for o in w.get("obstacles", [])]
        grid = W.SdfGrid.from_primitives(prims, _vec(w, "lo", 2), _vec(w, "hi", 2), float(w.get("cell", 0.01)))
        col = d.get("collision", {})
        params = W.CollisionParams(float(col.get("eps", 0.05)), float(col.get("eps_d", 1e-2)))
        hint = str(d.get("class_hint", "A"))
        if hint not in CLASSES:
            raise ScenarioError("class_hint must be A, B or C")
        sc = Scenario(str(d["id"]), robot, grid, _vec(d, "start", robot.dof), _vec(d, "goal", robot.dof), hint,
                      int(d.get("repeats", 5)), params, d)
    except (KeyError, TypeError) as e:
        raise ScenarioError(f"malformed scenario: {e}") from e
    except ParameterError as e:
        raise ScenarioError(str(e)) from e
    for p in (sc.start, sc.goal):
        if np.any(p < robot.theta_min) or np.any(p > robot.theta_max):
            raise ScenarioError("start or goal outside the joint limits")
        if W.clearances(np.concatenate([p, np.zeros(robot.dof)])[None], robot, grid)[0] < 0:
            raise ScenarioError(f"{sc.id}: start or goal in collision")
    return sc


def load(path) -> Scenario:
    try:
        with open(path) as fh:
            d = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ScenarioError(f"cannot parse {path}: {e}") from e
    return from_dict(d)


def load_dir(path) -> list[Scenario]:
    files = sorted(Path(path).glob("*.yaml"))
    if not files:
        raise ScenarioError(f"no scenario files in {path}")
    return [load(f) for f in files]


def suite_dir() -> Path:
    return Path(str(resources.files("iagpsto") / "suite"))


def load_suite() -> list[Scenario]:
    return load_dir(suite_dir())
