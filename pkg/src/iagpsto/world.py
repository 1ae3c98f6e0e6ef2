"""2D collision world: signed-distance grid, robot bodies, collision and joint-limit costs."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .trajgp import GPModel, ParameterError, upsample

FD_STEP = 1e-6


# ---------------------------------------------------------------------------
# Obstacle primitives and the distance grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Disc:
    center: tuple
    radius: float

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return np.linalg.norm(pts - np.asarray(self.center, dtype=float), axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its center and half extents."""

    center: tuple
    half: tuple

    def distance(self, pts: np.ndarray) -> np.ndarray:
        q = np.abs(pts - np.asarray(self.center, dtype=float)) - np.asarray(self.half, dtype=float)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Capsule:
    a: tuple
    b: tuple
    radius: float

    def distance(self, pts: np.ndarray) -> np.ndarray:
        a = np.asarray(self.a, dtype=float)
        ab = np.asarray(self.b, dtype=float) - a
        t = np.clip(((pts - a) @ ab) / max(ab @ ab, 1e-300), 0.0, 1.0)
        return np.linalg.norm(pts - (a + t[..., None] * ab), axis=-1) - self.radius


@dataclass(frozen=True, eq=False)
class SdfGrid:
    """Signed distances sampled at nodes ``origin + (i, j) * cell``; negative inside."""

    origin: np.ndarray
    cell: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        if vals.ndim != 2 or min(vals.shape) < 2:
            raise ParameterError("SDF grid needs at least 2 x 2 nodes")
        if not self.cell > 0:
            raise ParameterError("cell size must be positive")
        if not np.all(np.isfinite(vals)):
            raise ParameterError("SDF values must be finite")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(2))

    @classmethod
    def from_primitives(cls, primitives, lo, hi, cell: float = 0.01) -> "SdfGrid":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        nx = int(np.ceil((hi[0] - lo[0]) / cell)) + 1
        ny = int(np.ceil((hi[1] - lo[1]) / cell)) + 1
        xs = lo[0] + cell * np.arange(nx)
        ys = lo[1] + cell * np.arange(ny)
        pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
        far = float(np.linalg.norm(hi - lo)) + 1.0
        vals = np.full((nx, ny), far)
        for p in primitives:
            vals = np.minimum(vals, p.distance(pts))
        return cls(lo, cell, vals)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.cell * (np.asarray(self.values.shape) - 1)

    def args(self):
        return self.values, float(self.origin[0]), float(self.origin[1]), float(self.cell)


def signed_distance(grid: SdfGrid, p) -> float | np.ndarray:
    """Bilinear interpolation of the grid; outside points clamp and add the Euclidean gap."""
    pts = np.asarray(p, dtype=float)
    if np.any(pts < grid.origin - 1e-12) or np.any(pts > grid.upper + 1e-12):
        warnings.warn("query outside the SDF grid, clamped to the boundary", RuntimeWarning, stacklevel=2)
    out = K.sdf_eval_np(*grid.args(), pts)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Robot bodies
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RobotModel:
    """Point robot (one ball at the position) or planar serial arm with balls on links.

    ``ccb_links``/``ccb_offsets`` attach each ball to a link at a fraction of its length.
    Inertia parameters are per link: mass, center-of-mass fraction along the link, I_zz.
    """

    kind: str
    theta_min: np.ndarray
    theta_max: np.ndarray
    ccb_radii: np.ndarray
    link_lengths: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ccb_links: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    ccb_offsets: np.ndarray = field(default_factory=lambda: np.zeros(1))
    base: np.ndarray = field(default_factory=lambda: np.zeros(2))
    masses: np.ndarray | None = None
    com: np.ndarray | None = None
    izz: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("point", "arm"):
            raise ParameterError("robot kind must be 'point' or 'arm'")
        f = lambda x: np.asarray(x, dtype=float).ravel()
        for name in ("theta_min", "theta_max", "ccb_radii", "link_lengths", "ccb_offsets", "base"):
            object.__setattr__(self, name, f(getattr(self, name)))
        object.__setattr__(self, "ccb_links", np.asarray(self.ccb_links, dtype=np.int64).ravel())
        if np.any(self.ccb_radii <= 0):
            raise ParameterError("collision ball radii must be positive")
        if not (self.theta_min.shape == self.theta_max.shape == (self.dof,)):
            raise ParameterError("limits must have one entry per joint")
        if np.any(self.theta_min >= self.theta_max):
            raise ParameterError("theta_min must be below theta_max")
        nb = self.ccb_radii.size
        if self.ccb_links.size != nb or self.ccb_offsets.size != nb:
            raise ParameterError("each collision ball needs a link index and an offset")
        if self.kind == "arm":
            if np.any(self.link_lengths <= 0) or np.any(self.ccb_links >= self.link_lengths.size):
                raise ParameterError("invalid arm geometry")
            n = self.link_lengths.size
            m = np.ones(n) if self.masses is None else f(self.masses)
            c = np.full(n, 0.5) if self.com is None else f(self.com)
            i = m * self.link_lengths**2 / 12.0 if self.izz is None else f(self.izz)
            object.__setattr__(self, "masses", m)
            object.__setattr__(self, "com", c)
            object.__setattr__(self, "izz", i)

    @classmethod
    def point(cls, radius: float, lo, hi) -> "RobotModel":
        return cls("point", np.asarray(lo, dtype=float), np.asarray(hi, dtype=float), np.array([radius]))

    @classmethod
    def planar_arm(cls, link_lengths, balls_per_link: int = 3, radius: float = 0.04, base=(0.0, 0.0),
                   lo=None, hi=None, masses=None) -> "RobotModel":
        lengths = np.asarray(link_lengths, dtype=float)
        n = lengths.size
        links = np.repeat(np.arange(n), balls_per_link)
        offs = np.tile((np.arange(balls_per_link) + 0.5) / balls_per_link, n)
        lo = np.full(n, -np.pi) if lo is None else np.asarray(lo, dtype=float)
        hi = np.full(n, np.pi) if hi is None else np.asarray(hi, dtype=float)
        return cls("arm", lo, hi, np.full(links.size, radius), lengths, links, offs,
                   np.asarray(base, dtype=float), masses)

    @property
    def dof(self) -> int:
        return 2 if self.kind == "point" else self.link_lengths.size

    @property
    def kind_code(self) -> int:
        return K.POINT if self.kind == "point" else K.ARM

    def args(self):
        return self.kind_code, self.link_lengths, self.base, self.ccb_links, self.ccb_offsets


@dataclass(frozen=True)
class CollisionParams:
    eps: float = 0.05
    eps_d: float = 1e-2

    def __post_init__(self):
        if not self.eps > 0:
            raise ParameterError("eps must be positive")
        if self.eps_d < 0:
            raise ParameterError("eps_d must be nonnegative")


@dataclass(frozen=True, eq=False)
class World:
    robot: RobotModel
    grid: SdfGrid
    params: CollisionParams = field(default_factory=CollisionParams)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def forward_kinematics(robot: RobotModel, q) -> np.ndarray:
    """Collision-ball centers, shape (..., n_balls, 2)."""
    kind, lengths, base, links, offs = robot.args()
    return K.body_points_np(kind, np.asarray(q, dtype=float), lengths, base, links, offs)


def joint_positions(robot: RobotModel, q) -> np.ndarray:
    """Arm joint origins and tip, shape (n_links + 1, 2); the point itself for a point robot."""
    q = np.asarray(q, dtype=float)
    if robot.kind == "point":
        return q[None, :2].copy()
    ang = np.cumsum(q)
    steps = robot.link_lengths[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    return np.vstack([robot.base, robot.base + np.cumsum(steps, axis=0)])


def _positions(traj, dof: int) -> np.ndarray:
    arr = np.asarray(traj, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 2 * dof)
    return np.ascontiguousarray(arr[:, :dof])


def _vector(x, n: int, what: str) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.shape == (n,) and x.dtype == np.float64 and x.flags.c_contiguous:
        v = x
    else:
        try:
            v = np.ascontiguousarray(np.broadcast_to(np.asarray(x, dtype=float), (n,)).astype(float))
        except ValueError as e:
            raise ParameterError(f"{what} need {n} entries") from e
    if n and not v.min() > 0:
        raise ParameterError(f"{what} must be positive")
    return v


def _dts(dt, n: int) -> np.ndarray:
    return _vector(dt, n - 1, "time steps")


def _check_rho(rho, n: int) -> np.ndarray:
    return _vector(rho, n, "penalties")


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------

def collision_cost(d, eps: float):
    """Quartic-smoothed hinge: linear inside obstacles, zero beyond the margin ``eps``."""
    out = K.collision_cost_np(d, eps)
    return float(out) if np.ndim(out) == 0 else out


def waypoint_obstacle_costs(traj, robot: RobotModel, grid: SdfGrid, params: CollisionParams, dt) -> np.ndarray:
    """Unpenalized per-waypoint term sum_i c(d_i) * |x_i dot|."""
    q = _positions(traj, robot.dof)
    if q.shape[0] < 2:
        raise ParameterError("trajectory needs at least two waypoints")
    kind, lengths, base, links, offs = robot.args()
    return K.waypoint_terms(kind, q, lengths, base, links, offs, robot.ccb_radii, *grid.args(),
                            _dts(dt, q.shape[0]), params.eps)


def obstacle_cost(traj, robot: RobotModel, grid: SdfGrid, params: CollisionParams, rho, dt) -> float:
    terms = waypoint_obstacle_costs(traj, robot, grid, params, dt)
    return float(np.dot(_check_rho(rho, terms.size), terms))


def obstacle_value_grad(traj, robot: RobotModel, grid: SdfGrid, params: CollisionParams, rho, dt,
                        h: float = FD_STEP) -> tuple[float, np.ndarray]:
    """Cost and its gradient over the full state vector (velocities and endpoints are zero)."""
    q = _positions(traj, robot.dof)
    n, d = q.shape
    kind, lengths, base, links, offs = robot.args()
    val, g = K.obstacle_value_grad(kind, q, _check_rho(rho, n), lengths, base, links, offs, robot.ccb_radii,
                                   *grid.args(), _dts(dt, n), params.eps, h)
    full = np.zeros((n, 2 * d))
    full[:, :d] = g
    return float(val), full.ravel()


def obstacle_cost_gradient(traj, robot, grid, params, rho, dt, h: float = FD_STEP) -> np.ndarray:
    return obstacle_value_grad(traj, robot, grid, params, rho, dt, h)[1]


def limit_cost(traj, robot: RobotModel, params: CollisionParams) -> float:
    q = _positions(traj, robot.dof)
    hi = q - robot.theta_max + params.eps_d
    lo = robot.theta_min + params.eps_d - q
    return float(np.maximum(hi, 0.0).sum() + np.maximum(lo, 0.0).sum())


def limit_cost_gradient(traj, robot: RobotModel, params: CollisionParams) -> np.ndarray:
    q = _positions(traj, robot.dof)
    g = (q > robot.theta_max - params.eps_d).astype(float) - (q < robot.theta_min + params.eps_d).astype(float)
    full = np.zeros((q.shape[0], 2 * robot.dof))
    full[:, :robot.dof] = g
    return full.ravel()


def clearances(traj, robot: RobotModel, grid: SdfGrid) -> np.ndarray:
    """Smallest ball clearance (signed distance minus radius) per waypoint."""
    q = _positions(traj, robot.dof)
    kind, lengths, base, links, offs = robot.args()
    return K.ball_clearance(kind, q, lengths, base, links, offs, robot.ccb_radii, *grid.args())


def dense_states(traj, gp: GPModel, n_intervals: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Support states plus ``n_intervals - 1`` GP-interpolated states inside every gap."""
    if gp.model is None or gp.times is None:
        raise ParameterError("dense states need a GP built from an SDE model")
    return upsample(gp.model, gp.times, traj, n_intervals)


def continuous_safe(traj, gp: GPModel, robot: RobotModel, grid: SdfGrid, params: CollisionParams,
                    gtol: float = 1e-4, n_intervals: int = 8) -> bool:
    """Every support and interval state keeps its unpenalized collision term within ``gtol``
    and no collision ball penetrates an obstacle."""
    if n_intervals < 1:
        raise ParameterError("n_intervals must be at least 1")
    if not np.isfinite(gtol):
        return True
    times, states = dense_states(traj, gp, n_intervals)
    terms = waypoint_obstacle_costs(states, robot, grid, params, np.diff(times))
    return bool(np.all(terms <= gtol) and np.all(clearances(states, robot, grid) >= 0.0))
