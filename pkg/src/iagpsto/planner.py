"""Planning drivers: penalized restarted AGD with sampling escapes, and incremental waypoint refinement."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import world as W
from .agd_core import AgdConfig, lreagd
from .asto import AstoConfig, asto_run, interior_index
from .objective import Objective
from .trajgp import GPModel, LtvSdeModel, ParameterError, build_prior, interpolate_states

ALGORITHMS = ("iagpsto", "agpsto", "lreagd", "agd-fixed", "leapfrog", "asto-only")


@dataclass(frozen=True)
class PlannerConfig:
    n_pen: int = 10
    n_lip: int = 10
    kappa: float = 0.4
    g_tol: float = 1e-4
    rho0: float = 0.01
    rho_max: float = 1e3  # penalty ceiling so the prior never loses all influence
    dt: float = 4.0
    qc: float = 1.0
    n_iti: int = 6
    tau_ip: float = 2.0
    n_p0: int | None = None
    n_intervals: int = 8
    n_uf: int = 10
    max_support: int = 64  # iOMP stops densifying beyond this many support states
    n_pen_local: int = 3  # penalty rounds per sub-trajectory before the window is widened
    noisy_z: float = 1.0
    n_support_full: int = 12  # interior waypoints for whole-trajectory planners
    use_asto: bool = True
    agd: AgdConfig = field(default_factory=AgdConfig)
    asto: AstoConfig = field(default_factory=AstoConfig)

    def __post_init__(self):
        if not 0 < self.kappa < 1:
            raise ParameterError("kappa must lie in (0, 1)")
        if not self.tau_ip > 1:
            raise ParameterError("tau_ip must exceed 1")
        for name in ("n_pen", "max_support", "n_pen_local", "n_lip", "n_iti", "n_uf", "n_intervals", "n_support_full"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be at least 1")
        if self.n_p0 is not None and self.n_p0 < 1:
            raise ParameterError("n_p0 must be at least 1")
        if not self.rho_max >= self.rho0:
            raise ParameterError("rho_max must be at least rho0")
        if not self.rho0 > 0 or not self.g_tol > 0 or not self.dt > 0 or not self.qc > 0:
            raise ParameterError("rho0, g_tol, dt and qc must be positive")


@dataclass
class PlanReport:
    algorithm: str = ""
    success: bool = False
    iterations: int = 0
    evaluations: int = 0
    restarts: int = 0
    asto_phases: int = 0
    min_approaches: int = 0
    pen_rounds: int = 0
    iti_rounds: int = 0
    refinements: int = 0
    f_final: float = math.nan
    f_obs: float = math.nan
    continuous_safe: bool = False
    n_support: int = 0
    rho_max: float = math.nan
    events: list = field(default_factory=list)
    cost_trace: list = field(default_factory=list)
    lipschitz_trace: list = field(default_factory=list)

    def absorb(self, lr):
        self.iterations += lr.iterations
        self.evaluations += lr.evaluations
        self.restarts += lr.restarts
        self.min_approaches += lr.min_approaches
        self.cost_trace.extend(float(c) for c in lr.cost_trace)
        self.lipschitz_trace.extend(float(v) for v in lr.lipschitz_trace)


# ---------------------------------------------------------------------------
# Penalized restarted AGD with sampling escapes
# ---------------------------------------------------------------------------

def agpsto_plan(theta0, gp0: GPModel, obj: Objective, cfg: PlannerConfig, rng: np.random.Generator,
                use_asto: bool | None = None, report: PlanReport | None = None):
    """Outer penalty rounds around restarted AGD; a detected local minimum hands over to sampling.

    Returns (trajectory, GP, penalty vector, report). With ``use_asto`` false this is the
    plain penalized restarted AGD baseline.
    """
    use_asto = cfg.use_asto if use_asto is None else use_asto
    rep = PlanReport() if report is None else report
    x = np.asarray(theta0, dtype=float).ravel().copy()
    if x.size != gp0.size:
        raise ParameterError("initial trajectory does not match the GP")
    gp = gp0
    rho = obj.rho.copy()
    for i in range(cfg.n_pen):
        rep.pen_rounds += 1
        cur = obj.with_gp(gp).with_rho(rho)
        holder = {"gp": gp, "obj": cur}

        def escape(xc):
            g_in = holder["gp"].with_mean(xc)
            o_in = holder["obj"].with_gp(g_in)
            th, g_out, ar = asto_run(o_in, g_in, cfg.asto, rng, theta0=xc)
            rep.asto_phases += 1
            rep.evaluations += ar.evaluations
            rep.events.append({"phase": "asto", "pen": i, "reason": ar.reason, "accepted": ar.accepted,
                               "f_in": ar.f_initial, "f_out": ar.f_final})
            holder["gp"] = g_out
            holder["obj"] = o_in.with_gp(g_out)
            return th, holder["obj"].value_and_grad

        x, lr = lreagd(cur.value_and_grad, x, cfg.agd, rng, cfg.n_lip,
                       on_min_approach=escape if use_asto else None)
        gp = holder["gp"]
        rep.absorb(lr)
        f_obs = obj.obstacle_free(x)
        rep.events.append({"phase": "pen", "round": i, "rho_max": float(rho.max()), "f_obs": f_obs,
                           "iterations": lr.iterations, "converged": lr.converged})
        if f_obs < cfg.g_tol or np.all(rho >= cfg.rho_max):
            break
        rho = np.minimum(rho / cfg.kappa, cfg.rho_max)
    return x, gp, rho, rep


# ---------------------------------------------------------------------------
# Waypoint allocation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KineticModel:
    """Per-joint effective inertia from link masses, centers of mass and I_zz."""

    robot: W.RobotModel

    def inertia(self, q) -> np.ndarray:
        r = self.robot
        if r.kind == "point":
            return np.ones(r.dof)
        q = np.asarray(q, dtype=float)[: r.dof]
        joints = W.joint_positions(r, q)
        ang = np.cumsum(q)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        com = joints[:-1] + (r.com * r.link_lengths)[:, None] * dirs
        out = np.empty(r.dof)
        for i in range(r.dof):
            d2 = np.sum((com[i:] - joints[i]) ** 2, axis=1)
            out[i] = r.izz[i] + float(r.masses[i:] @ d2)
        return out

    def gap_energy(self, qa, qb, q_mid) -> float:
        dq = np.asarray(qb, dtype=float)[: self.robot.dof] - np.asarray(qa, dtype=float)[: self.robot.dof]
        return 0.5 * float(dq @ (self.inertia(q_mid) * dq))


def allocate_waypoints(traj, gp: GPModel, kinetic: KineticModel, n_p: int) -> np.ndarray:
    """New waypoints per gap, proportional to the kinetic energy of the gap."""
    st = np.asarray(traj, dtype=float).reshape(gp.n_support, -1)
    gaps = st.shape[0] - 1
    e = np.empty(gaps)
    for t in range(gaps):
        mid = interpolate_states(gp, t, t + 1, [0.5], st)[0]
        e[t] = kinetic.gap_energy(st[t], st[t + 1], mid)
    tot = e.sum()
    if not tot > 0:
        return np.full(gaps, int(round(n_p / gaps)), dtype=int)
    return np.rint(n_p * e / tot).astype(int)


def insert_waypoints(gp: GPModel, traj, counts) -> tuple[np.ndarray, np.ndarray]:
    """GP-interpolated states placed evenly inside each gap; returns (times, states)."""
    st = np.asarray(traj, dtype=float).reshape(gp.n_support, -1)
    times, states = [gp.times[0]], [st[0]]
    for t, c in enumerate(counts):
        c = int(c)
        if c > 0:
            taus = np.arange(1, c + 1) / (c + 1)
            span = gp.times[t + 1] - gp.times[t]
            for tau, x in zip(taus, interpolate_states(gp, t, t + 1, taus, st)):
                times.append(gp.times[t] + tau * span)
                states.append(x)
        times.append(gp.times[t + 1])
        states.append(st[t + 1])
    return np.asarray(times), np.asarray(states)


def initial_waypoint_count(start, goal, robot: W.RobotModel) -> int:
    """Interior waypoints to seed with, from the start-goal distance relative to the limit box."""
    r = float(np.linalg.norm(np.asarray(goal) - np.asarray(start)) / np.linalg.norm(robot.theta_max - robot.theta_min))
    if r <= 0.25:
        return 1
    if r <= 0.5:
        return 2
    if r <= 0.75:
        return 3
    return 4


# ---------------------------------------------------------------------------
# Noisy sub-trajectories
# ---------------------------------------------------------------------------

def waypoint_limit_costs(traj, robot: W.RobotModel, params: W.CollisionParams) -> np.ndarray:
    q = np.asarray(traj, dtype=float).reshape(-1, 2 * robot.dof)[:, : robot.dof]
    hi = q - robot.theta_max + params.eps_d
    lo = robot.theta_min + params.eps_d - q
    return np.sum(np.clip(hi, 0, None) + np.clip(lo, 0, None), axis=1)


def waypoint_costs(traj, obj: Objective) -> np.ndarray:
    w = obj.world
    obs = W.waypoint_obstacle_costs(traj, w.robot, w.grid, w.params, obj.dts)
    return obs + obj.limit_weight * waypoint_limit_costs(traj, w.robot, w.params)


def interval_waypoint_costs(traj, obj: Objective, n_intervals: int) -> np.ndarray:
    """Waypoint costs plus, per waypoint, the worst unpenalized collision term among the
    GP-interpolated states of its two adjacent gaps."""
    c = waypoint_costs(traj, obj)
    if n_intervals < 2:
        return c
    w = obj.world
    n = obj.n_support
    times, states = W.dense_states(np.asarray(traj).reshape(n, -1), obj.gp, n_intervals)
    terms = W.waypoint_obstacle_costs(states, w.robot, w.grid, w.params, np.diff(times))
    inner = terms[1:].reshape(n - 1, n_intervals)[:, :-1].max(axis=1)
    gap = np.zeros(n + 1)
    gap[1:-1] = inner
    return c + np.maximum(gap[:-1], gap[1:])


def ranges_from_marks(marks, n: int) -> list[tuple[int, int]]:
    """Maximal runs of marked waypoints padded by one neighbor; overlapping ranges merge."""
    out: list[list[int]] = []
    t = 0
    while t < n:
        if marks[t]:
            s = t
            while t + 1 < n and marks[t + 1]:
                t += 1
            a, b = max(s - 1, 0), min(t + 1, n - 1)
            if out and a <= out[-1][1]:
                out[-1][1] = max(out[-1][1], b)
            else:
                out.append([a, b])
        t += 1
    return [(a, b) for a, b in out if b - a >= 2]


def select_noisy_subtrajectories(traj, obj: Objective, z: float = 1.0, exclude=()) -> list[tuple[int, int]]:
    """Index ranges around waypoints whose cost exceeds mean + z * std."""
    c = waypoint_costs(traj, obj)
    return noisy_ranges(c, z, exclude)


def noisy_ranges(costs, z: float = 1.0, exclude=()) -> list[tuple[int, int]]:
    c = np.asarray(costs, dtype=float)
    sd = c.std()
    if sd == 0:
        return []
    marks = c > c.mean() + z * sd
    for a, b in exclude:
        marks[a:b + 1] = False
    return widen_ranges(ranges_from_marks(marks, c.size), c)


def widen_ranges(ranges, costs, tol: float = 0.0) -> list[tuple[int, int]]:
    """Push range ends outward until both boundary waypoints are clear; merge overlaps."""
    c = np.asarray(costs, dtype=float)
    out: list[list[int]] = []
    for a, b in ranges:
        while a > 0 and c[a] > tol:
            a -= 1
        while b < c.size - 1 and c[b] > tol:
            b += 1
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def colliding_ranges(costs, g_tol: float, exclude=()) -> list[tuple[int, int]]:
    """Fallback when no waypoint stands out: every run of waypoints with cost above ``g_tol``."""
    marks = np.asarray(costs, dtype=float) > g_tol / max(len(costs), 1)
    for a, b in exclude:
        marks[a:b + 1] = False
    return widen_ranges(ranges_from_marks(marks, marks.size), costs)


# ---------------------------------------------------------------------------
# Incremental planner
# ---------------------------------------------------------------------------

def _model(robot: W.RobotModel, cfg: PlannerConfig) -> LtvSdeModel:
    return LtvSdeModel(robot.dof, cfg.dt, cfg.qc * np.eye(robot.dof))


def _check_endpoints(start, goal, world: W.World):
    r = world.robot
    for p in (start, goal):
        p = np.asarray(p, dtype=float)
        if p.shape != (r.dof,):
            raise ParameterError("start and goal need one entry per joint")
        if np.any(p < r.theta_min) or np.any(p > r.theta_max):
            raise ParameterError("start or goal outside the joint limits")
        if W.clearances(np.concatenate([p, np.zeros(r.dof)])[None], r, world.grid)[0] < 0:
            raise ParameterError("start or goal in collision")


def sub_gp(gp: GPModel, traj, a: int, b: int) -> GPModel:
    """Local prior over waypoints a..b pinned to the two boundary states, mean from ``traj``."""
    st = np.asarray(traj, dtype=float).reshape(gp.n_support, -1)
    times = gp.times[a:b + 1]
    prior = build_prior(gp.model, b - a + 1, st[a], st[b], times=times)
    return prior.with_mean(st[a:b + 1].ravel())


def refine_range(traj, gp: GPModel, obj: Objective, rho, a: int, b: int, cfg: PlannerConfig,
                 rng: np.random.Generator, rep: PlanReport):
    st = np.asarray(traj, dtype=float).reshape(gp.n_support, -1).copy()
    g_loc = sub_gp(gp, st, a, b)
    o_loc = Objective(g_loc, obj.world, rho[a:b + 1], obj.dts[a:b], obj.limit_weight)
    local = replace(cfg, n_pen=min(cfg.n_pen, cfg.n_pen_local)) if b - a < gp.n_support - 1 else cfg
    x, _, rho_loc, _ = agpsto_plan(st[a:b + 1].ravel(), g_loc, o_loc, local, rng, report=rep)
    st[a:b + 1] = x.reshape(b - a + 1, -1)
    st[a], st[b] = np.asarray(traj).reshape(gp.n_support, -1)[[a, b]]
    rho = rho.copy()
    rho[a:b + 1] = np.maximum(rho[a:b + 1], rho_loc)
    return st, rho


def _finish(rep: PlanReport, theta, gp: GPModel, obj: Objective, cfg: PlannerConfig, rho=None):
    w = obj.world
    rep.f_final = float(obj.evaluate(theta))
    rep.f_obs = float(obj.obstacle_free(theta))
    rep.continuous_safe = W.continuous_safe(theta, gp, w.robot, w.grid, w.params, cfg.g_tol, cfg.n_intervals)
    rep.success = bool(rep.f_obs <= cfg.g_tol and rep.continuous_safe)
    rep.n_support = gp.n_support
    if rho is not None:
        rep.rho_max = float(np.max(rho))
    return rep


def iomp_plan(start, goal, world: W.World, cfg: PlannerConfig, rng: np.random.Generator):
    """Grow the support set where the motion carries most kinetic energy and refine noisy stretches."""
    _check_endpoints(start, goal, world)
    robot = world.robot
    model = _model(robot, cfg)
    rep = PlanReport(algorithm="iagpsto")
    kin = KineticModel(robot)
    n_p = cfg.n_p0 or initial_waypoint_count(start, goal, robot)
    total = (n_p + 1) * cfg.dt
    gp = build_prior(model, 2, start, goal, times=np.array([0.0, total]))
    traj = gp.mean.copy()
    rho = np.full(2, cfg.rho0)
    counts = np.array([n_p])
    obj = None
    for it in range(cfg.n_iti):
        rep.iti_rounds += 1
        times, states = insert_waypoints(gp, traj, counts)
        # new waypoints inherit the larger penalty of their gap
        rho_new = []
        for t, c in enumerate(counts):
            rho_new.append(rho[t])
            rho_new.extend([max(rho[t], rho[t + 1])] * int(c))
        rho_new.append(rho[-1])
        rho = np.asarray(rho_new)
        gp = build_prior(model, times.size, start, goal, times=times).with_mean(states.ravel())
        traj = states.ravel().copy()
        obj = Objective.from_gp(gp, world, rho)
        rep.events.append({"phase": "iti", "round": it, "n_support": int(times.size)})
        excluded: list = []
        for k in range(cfg.n_uf):
            costs = interval_waypoint_costs(traj, obj, cfg.n_intervals)
            if costs.sum() <= cfg.g_tol:
                break
            ranges = noisy_ranges(costs, cfg.noisy_z, excluded) or colliding_ranges(costs, cfg.g_tol, excluded)
            if not ranges:
                break
            last = gp.n_support - 1
            for a, b in ranges:
                while True:
                    rep.refinements += 1
                    rep.events.append({"phase": "refine", "round": it, "range": [int(a), int(b)]})
                    st, rho = refine_range(traj, gp, obj, rho, a, b, cfg, rng, rep)
                    traj = st.ravel()
                    # a stretch that stays in collision is retried over a window twice as wide
                    if interval_waypoint_costs(traj, obj, cfg.n_intervals)[a:b + 1].sum() <= cfg.g_tol or (a == 0 and b == last):
                        break
                    half = b - a
                    a, b = max(a - half, 0), min(b + half, last)
            obj = obj.with_rho(rho)
            excluded = ranges
        gp = gp.with_mean(traj)
        obj = Objective.from_gp(gp, world, rho)
        if (obj.obstacle_free(traj) <= cfg.g_tol
                and W.continuous_safe(traj, gp, robot, world.grid, world.params, cfg.g_tol, cfg.n_intervals)):
            break
        n_p = int(round(cfg.tau_ip * n_p))
        if gp.n_support + n_p > cfg.max_support:
            break
        counts = allocate_waypoints(traj, gp, kin, n_p)
    _finish(rep, traj, gp, obj, cfg, rho)
    return traj, gp, rep


# ---------------------------------------------------------------------------
# Whole-trajectory drivers and dispatch
# ---------------------------------------------------------------------------

def initial_problem(start, goal, world: W.World, cfg: PlannerConfig, n_interior: int | None = None):
    n_interior = cfg.n_support_full if n_interior is None else n_interior
    gp = build_prior(_model(world.robot, cfg), n_interior + 2, start, goal)
    return gp, Objective.from_gp(gp, world, cfg.rho0)


def whole_plan(start, goal, world: W.World, cfg: PlannerConfig, rng: np.random.Generator, algorithm: str):
    _check_endpoints(start, goal, world)
    gp, obj = initial_problem(start, goal, world, cfg)
    rep = PlanReport(algorithm=algorithm)
    if algorithm == "asto-only":
        x, gp, rho = asto_only(gp.mean.copy(), gp, obj, cfg, rng, rep)
    else:
        use_asto = algorithm == "agpsto"
        if algorithm == "agd-fixed":
            cfg = replace(cfg, agd=replace(cfg.agd, mode="fixed"))
        elif algorithm == "leapfrog":
            cfg = replace(cfg, agd=replace(cfg.agd, mode="leapfrog"))
        x, gp, rho, rep = agpsto_plan(gp.mean.copy(), gp, obj, cfg, rng, use_asto=use_asto, report=rep)
    _finish(rep, x, gp, obj.with_gp(gp), cfg, rho)
    return x, gp, rep


def asto_only(x, gp, obj: Objective, cfg: PlannerConfig, rng, rep: PlanReport):
    """Repeated sampling rounds under a growing penalty, no gradient steps."""
    rho = obj.rho.copy()
    for i in range(cfg.n_pen):
        rep.pen_rounds += 1
        cur = obj.with_gp(gp).with_rho(rho)
        g_in = gp.with_mean(x)
        x, gp, ar = asto_run(cur.with_gp(g_in), g_in, cfg.asto, rng, theta0=x)
        rep.asto_phases += 1
        rep.evaluations += ar.evaluations
        rep.iterations += ar.iterations
        if obj.obstacle_free(x) < cfg.g_tol or np.all(rho >= cfg.rho_max):
            break
        rho = np.minimum(rho / cfg.kappa, cfg.rho_max)
    return x, gp, rho


def run_algorithm(algorithm: str, start, goal, world: W.World, cfg: PlannerConfig, rng: np.random.Generator):
    """(trajectory, GP, report) for any supported algorithm name."""
    if algorithm not in ALGORITHMS:
        raise ParameterError(f"unknown algorithm {algorithm!r}")
    if algorithm == "iagpsto":
        return iomp_plan(start, goal, world, cfg, rng)
    return whole_plan(start, goal, world, cfg, rng, algorithm)
