"""Composite objective F = F_gp + F_obs + limit term, penalty schedule and problem classifier."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import world as W
from .trajgp import GPModel, ParameterError, gp_cost, gp_cost_gradient


@dataclass(frozen=True, eq=False)
class Objective:
    """Penalized MAP objective over a full (position, velocity) trajectory vector.

    The first and last waypoints are clamped: their gradient entries are zero.
    """

    gp: GPModel
    world: W.World
    rho: np.ndarray
    dts: np.ndarray
    limit_weight: float = 1.0

    def __post_init__(self):
        n = self.gp.n_support
        object.__setattr__(self, "rho", np.ascontiguousarray(np.broadcast_to(np.asarray(self.rho, dtype=float), (n,)).astype(float)))
        object.__setattr__(self, "dts", np.ascontiguousarray(np.broadcast_to(np.asarray(self.dts, dtype=float), (n - 1,)).astype(float)))
        if np.any(self.rho <= 0):
            raise ParameterError("penalties must be positive")
        if self.gp.model.state_dim != self.world.robot.dof:
            raise ParameterError("GP state dimension does not match the robot")

    @classmethod
    def from_gp(cls, gp: GPModel, world: W.World, rho=0.01, limit_weight: float = 1.0) -> "Objective":
        return cls(gp, world, rho, np.diff(gp.times), limit_weight)

    @property
    def n_support(self) -> int:
        return self.gp.n_support

    @property
    def dof(self) -> int:
        return self.world.robot.dof

    @property
    def size(self) -> int:
        return self.gp.size

    def free_mask(self) -> np.ndarray:
        m = np.ones((self.n_support, 2 * self.dof))
        m[0] = 0.0
        m[-1] = 0.0
        return m.ravel()

    def with_gp(self, gp: GPModel) -> "Objective":
        return replace(self, gp=gp)

    def with_rho(self, rho) -> "Objective":
        return replace(self, rho=np.asarray(rho, dtype=float))

    # --- pieces -----------------------------------------------------------------

    def obstacle(self, theta, rho=None) -> float:
        w = self.world
        return W.obstacle_cost(theta, w.robot, w.grid, w.params, self.rho if rho is None else rho, self.dts)

    def obstacle_free(self, theta) -> float:
        """Unpenalized collision cost (all penalties one)."""
        return self.obstacle(theta, np.ones(self.n_support))

    def limit(self, theta) -> float:
        return self.limit_weight * W.limit_cost(theta, self.world.robot, self.world.params)

    def components(self, theta) -> dict:
        return {"gp": gp_cost(self.gp, theta), "obs": self.obstacle(theta), "limit": self.limit(theta)}

    # --- totals -----------------------------------------------------------------

    def evaluate(self, theta) -> float:
        c = self.components(theta)
        return c["gp"] + c["obs"] + c["limit"]

    def evaluate_free(self, theta) -> tuple[float, float]:
        """(total cost, unpenalized collision cost) from one collision sweep."""
        w = self.world
        terms = W.waypoint_obstacle_costs(theta, w.robot, w.grid, w.params, self.dts)
        f = gp_cost(self.gp, theta) + float(self.rho @ terms) + self.limit(theta)
        return f, float(terms.sum())

    def value_and_grad(self, theta) -> tuple[float, np.ndarray]:
        theta = np.asarray(theta, dtype=float).ravel()
        w = self.world
        r = theta - self.gp.mean
        pr = self.gp.get_precision() @ r
        f_gp = 0.5 * float(r @ pr)
        f_obs, g_obs = W.obstacle_value_grad(theta, w.robot, w.grid, w.params, self.rho, self.dts)
        f_lim = self.limit(theta)
        g = pr + g_obs + self.limit_weight * W.limit_cost_gradient(theta, w.robot, w.params)
        return f_gp + f_obs + f_lim, g * self.free_mask()

    def gradient(self, theta) -> np.ndarray:
        return self.value_and_grad(theta)[1]

    def __call__(self, theta) -> tuple[float, np.ndarray]:
        return self.value_and_grad(theta)


def scale_penalty(obj: Objective, kappa: float) -> Objective:
    """Grow every penalty by 1/kappa (kappa < 1 strengthens the obstacle term)."""
    if not kappa > 0:
        raise ParameterError("kappa must be positive")
    return obj.with_rho(obj.rho / kappa)


# ---------------------------------------------------------------------------
# Difficulty classifier
# ---------------------------------------------------------------------------

F_RANGES = {"A": (0.0, 0.18, False, True), "B": (0.18, 1.40, False, False), "C": (0.60, np.inf, False, False)}
S_RANGES = {"A": (0.0, 0.53, True, False), "B": (0.41, 0.88, False, True), "C": (0.88, 1.0, False, True)}
ORDER = "ABC"


def _in(x: float, lo: float, hi: float, lo_closed: bool, hi_closed: bool) -> bool:
    above = x >= lo if lo_closed else x > lo
    below = x <= hi if hi_closed else x < hi
    return above and below


def _hardest(x: float, ranges: dict) -> str:
    hits = [k for k in ORDER if _in(x, *ranges[k])]
    if not hits:
        return "A" if x <= ranges["A"][1] else "C"
    return hits[-1]


def label_for(f_bar: float, stuck: float) -> str:
    """Each measure picks the hardest class its ranges admit; the label is the harder of the two."""
    a = _hardest(f_bar, F_RANGES)
    b = _hardest(stuck, S_RANGES)
    return max(a, b, key=ORDER.index)


@dataclass(frozen=True)
class ProblemClass:
    f_bar: float
    stuck: float
    label: str

    def caption(self) -> str:
        return f"{self.f_bar:.2f} | {self.stuck:.2f}"


def stuck_fraction(obj: Objective, theta, n_intervals: int = 8) -> float:
    """Max over interior waypoints of the in-collision share of its 2n+1 neighboring states."""
    w = obj.world
    _, dense = W.dense_states(np.asarray(theta).reshape(obj.n_support, -1), obj.gp, n_intervals)
    hit = W.clearances(dense, w.robot, w.grid) < 0.0
    n = obj.n_support
    if n < 3:
        return 0.0
    window = 2 * n_intervals + 1
    best = 0
    for t in range(1, n - 1):
        c = t * n_intervals
        best = max(best, int(hit[c - n_intervals:c + n_intervals + 1].sum()))
    return best / window


def classify(obj: Objective, theta, n_intervals: int = 8) -> ProblemClass:
    unit = obj.with_rho(np.ones(obj.n_support))
    n_p = max(obj.n_support - 2, 1)
    f_bar = unit.evaluate(theta) / n_p
    stuck = stuck_fraction(obj, theta, n_intervals)
    return ProblemClass(float(f_bar), float(stuck), label_for(f_bar, stuck))
