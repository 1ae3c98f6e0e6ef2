"""Accelerated gradient descent with a two-sided curvature acceptance band and Lipschitz restarts.

Acceptance convention used throughout. For consecutive middle iterates with cost change
``df = F_k - F_{k-1}``, step ``s`` and previous gradient ``g`` the observed curvature is
``kappa = 2 (df - <g, s>) / |s|^2``. A step is kept while
``c_up * L <= kappa <= c_low * L``; above the band the estimate ``L`` is too small
(``restart_low``), below it ``L`` is too large (``restart_up``).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .trajgp import ParameterError

CONTINUE = "continue"
RESTART_LOW = "restart_low"
RESTART_UP = "restart_up"

Fun = Callable[[np.ndarray], tuple]


class NumericalFailure(ArithmeticError):
    """Cost or gradient became non-finite."""


def feasibility(theta1: float, theta2: float) -> float:
    """Step-rule margin -theta2^2 - theta2 + theta1 - 1; nonnegative means admissible."""
    return -theta2 * theta2 - theta2 + theta1 - 1.0


def bound_constant(theta1: float, theta2: float) -> float:
    return theta1 * theta1 / feasibility(theta1, theta2)


def convergence_bound(lip: float, f_gap: float, n: int, theta1: float = 2.0, theta2: float = 0.25) -> float:
    """Upper bound on min_k |grad F(x_md_k)|^2 after ``n`` steps."""
    return bound_constant(theta1, theta2) * lip * f_gap / n


def leapfrog_bound(lip: float, dist2: float, n: int, theta1: float = 2.0) -> float:
    return 2.0 * theta1 * lip * dist2 / (n * (n + 1))


def gamma_sequence(n: int) -> np.ndarray:
    """Gamma_1 = 1, Gamma_k = (1 - alpha_k) Gamma_{k-1} with alpha_k = 2/(k+1); index 0 unused."""
    g = np.zeros(n + 1)
    g[1] = 1.0
    for k in range(2, n + 1):
        g[k] = (1.0 - 2.0 / (k + 1)) * g[k - 1]
    return g


def step_condition(lip: float, k: int, n: int, theta1: float, theta2: float, lam: float | None = None) -> float:
    """C_k of the step-size condition, with the tail sum of Gamma in closed form."""
    alpha = 2.0 / (k + 1)
    beta = 1.0 / (theta1 * lip)
    lam = (1.0 + theta2 * alpha) * beta if lam is None else lam
    gam = 2.0 / (k * (k + 1))
    tail = 2.0 * (1.0 / k - 1.0 / (n + 1))
    return 1.0 - lip * lam - lip * (lam - beta) ** 2 / (2.0 * alpha * gam * lam) * tail


def varpi(k: int, grad_norm2: float, theta1: float, theta2: float) -> float:
    a = (2.0 * theta2 + k + 1) / (theta1 * (k + 1))
    return a * (1.0 - a - theta2 * theta2 / theta1) * grad_norm2


@dataclass(frozen=True)
class AgdConfig:
    theta1: float = 2.0
    theta2: float = 0.25
    c_low: float = 1.25
    c_up: float = 0.15
    n_ag: int = 300
    f_tol: float = 1e-5
    theta_tol: float = 1e-4
    phi_tol: float = -0.1
    l_tol: float = 1e2
    max_reestimates: int = 25
    shrink_floor: float = 1e-3  # one restart_up divides L by at most 1 / shrink_floor
    mode: str = "restart"  # restart | fixed | leapfrog
    fixed_lipschitz: float = 1e2
    deterministic: bool = False

    def __post_init__(self):
        if self.theta1 < 1 or self.theta2 < 0:
            raise ParameterError("theta1 must be >= 1 and theta2 >= 0")
        if feasibility(self.theta1, self.theta2) < 0:
            raise ParameterError("(theta1, theta2) violates -theta2^2 - theta2 + theta1 - 1 >= 0")
        if not self.c_low > self.c_up > 0:
            raise ParameterError("need c_low > c_up > 0")
        if self.mode not in ("restart", "fixed", "leapfrog"):
            raise ParameterError(f"unknown AGD mode {self.mode!r}")
        if self.n_ag < 1:
            raise ParameterError("n_ag must be positive")
        if not 0 < self.shrink_floor <= 1:
            raise ParameterError("shrink_floor must lie in (0, 1]")


@dataclass
class AgdState:
    x: np.ndarray
    x_md: np.ndarray
    x_ag: np.ndarray
    lipschitz: float
    k: int = 0
    gamma: float = 1.0
    restart_count: int = 0
    history: list = field(default_factory=list)


@dataclass
class AgdReport:
    iterations: int = 0
    reason: str = ""
    f: float = math.inf
    lipschitz: float = 0.0
    accepted: int = 0
    k: int = 0
    # the last accepted middle iterate and the one that followed it
    x_prev: np.ndarray | None = None
    f_prev: float = math.nan
    g_prev: np.ndarray | None = None
    x_new: np.ndarray | None = None
    f_new: float = math.nan
    g_new: np.ndarray | None = None
    history: list = field(default_factory=list)
    evaluations: int = 0


def observed_curvature(df: float, grad_prev: np.ndarray, step: np.ndarray) -> float:
    ss = float(step @ step)
    return 2.0 * (df - float(grad_prev @ step)) / ss


def acc_break(state: AgdState, f_prev: float, f_new: float, grad_prev: np.ndarray, step: np.ndarray,
              cfg: AgdConfig) -> str:
    """Two-sided predicted-reduction test on the last middle-iterate step."""
    ss = float(step @ step)
    if ss == 0.0:
        return CONTINUE
    lin = float(grad_prev @ step)
    df = f_new - f_prev
    lip = state.lipschitz
    if df > lin + 0.5 * cfg.c_low * lip * ss:
        return RESTART_LOW
    if df < lin + 0.5 * cfg.c_up * lip * ss:
        return RESTART_UP
    return CONTINUE


def _lambda(alpha: float, beta: float, cfg: AgdConfig, rng: np.random.Generator | None) -> float:
    if cfg.mode == "leapfrog":
        return beta / alpha
    hi = (1.0 + cfg.theta2 * alpha) * beta
    if cfg.deterministic or rng is None:
        return 0.5 * (beta + hi)
    return float(rng.uniform(beta, hi))


def _check(f, g):
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalFailure("non-finite cost or gradient")


def agd_run(fun: Fun, x0: np.ndarray, lip0: float, cfg: AgdConfig, brk=acc_break,
            rng: np.random.Generator | None = None, n_iter: int | None = None) -> tuple[np.ndarray, AgdReport]:
    """One accelerated run from ``x0`` with constant ``lip0`` until the band test or a stop rule fires.

    Returns the best of the last two middle iterates and a report carrying the data the
    re-estimation rules need.
    """
    if not lip0 > 0:
        raise ParameterError("initial Lipschitz estimate must be positive")
    n_iter = cfg.n_ag if n_iter is None else n_iter
    x0 = np.asarray(x0, dtype=float).copy()
    st = AgdState(x=x0.copy(), x_md=x0.copy(), x_ag=x0.copy(), lipschitz=float(lip0))
    rep = AgdReport(lipschitz=float(lip0))
    f_prev = g_prev = x_prev = None
    for k in range(1, n_iter + 1):
        alpha = 2.0 / (k + 1)
        x_md = (1.0 - alpha) * st.x_ag + alpha * st.x
        f, g = fun(x_md)
        rep.evaluations += 1
        _check(f, g)
        st.k = k
        st.gamma = 1.0 if k == 1 else (1.0 - alpha) * st.gamma
        gn = float(np.linalg.norm(g))
        rep.history.append((float(f), gn))
        rep.iterations = k
        if x_prev is not None:
            step = x_md - x_prev
            decision = brk(st, f_prev, f, g_prev, step, cfg) if brk is not None else CONTINUE
            if decision != CONTINUE:
                rep.reason = decision
                rep.x_prev, rep.f_prev, rep.g_prev = x_prev, f_prev, g_prev
                rep.x_new, rep.f_new, rep.g_new = x_md, float(f), g
                rep.k = k
                best = (x_md, f) if f <= f_prev else (x_prev, f_prev)
                rep.f = float(best[1])
                return best[0].copy(), rep
            rep.accepted += 1
            if abs(f - f_prev) < cfg.f_tol * (1.0 + abs(f)) or float(np.linalg.norm(step)) < cfg.theta_tol:
                rep.reason = "converged"
                rep.f = float(f)
                rep.x_prev, rep.f_prev, rep.g_prev = x_prev, f_prev, g_prev
                rep.x_new, rep.f_new, rep.g_new = x_md, float(f), g
                rep.k = k
                return x_md, rep
        if gn == 0.0 or gn < 1e-3 * cfg.theta_tol:
            rep.reason = "converged"
            rep.f = float(f)
            return x_md, rep
        beta = 1.0 / (cfg.theta1 * st.lipschitz)
        lam = _lambda(alpha, beta, cfg, rng)
        st.x = st.x - lam * g
        st.x_ag = x_md - beta * g
        x_prev, f_prev, g_prev = x_md, float(f), g
    rep.reason = "max_iter"
    rep.f = float(f_prev)
    rep.k = n_iter
    return x_prev.copy(), rep


# ---------------------------------------------------------------------------
# Lipschitz re-estimation
# ---------------------------------------------------------------------------

@dataclass
class ReestimateInfo:
    lipschitz: float
    updates: int = 0
    path: str = "quadratic"
    phi_slope: float | None = None
    trial_ared: float | None = None
    exhausted: bool = False
    trace: list = field(default_factory=list)


def _trial_ok(df: float, grad: np.ndarray, step: np.ndarray, lip: float, c_low: float) -> bool:
    ss = float(step @ step)
    return df <= float(grad @ step) + 0.5 * c_low * lip * ss


def _boundary(df: float, grad: np.ndarray, step: np.ndarray, c_low: float) -> float:
    ss = float(step @ step)
    return (df - float(grad @ step)) / (0.5 * c_low * ss)


def reestimate_low(fun: Fun, x_prev: np.ndarray, f_prev: float, g_prev: np.ndarray, g_new: np.ndarray,
                   lip: float, k: int, cfg: AgdConfig, step: np.ndarray | None = None,
                   df: float | None = None) -> ReestimateInfo:
    """Grow ``L`` after insufficient reduction.

    phi(L) = F(x_prev - c/L g_new) - F(x_prev) with c = (1 + theta2)/theta1. The slope
    ``phi_slope`` (per unit step along -g_new) is measured once by finite difference. A
    negative slope drives the quadratic-model update; otherwise the boundary rule sets L
    to the curvature of the last tested step divided by ``c_low``.
    """
    c = (1.0 + cfg.theta2) / cfg.theta1
    gn = float(np.linalg.norm(g_new))
    info = ReestimateInfo(lipschitz=lip)
    if gn == 0.0:
        info.path = "zero_gradient"
        return info
    h = 1e-7 * max(1.0, float(np.linalg.norm(x_prev))) / gn
    f_h = fun(x_prev - h * g_new)[0]
    slope = (f_h - f_prev) / h
    info.phi_slope = float(slope)
    w = varpi(k, gn * gn, cfg.theta1, cfg.theta2)
    last_step, last_df = step, df
    cur = float(lip)
    for j in range(cfg.max_reestimates):
        if slope < 0:
            trial = x_prev - (c / cur) * g_new
            phi = fun(trial)[0] - f_prev
            denom = -0.5 * (c * slope + w)
            new = cur * (cur * phi - c * slope) / denom if denom > 0 else -1.0
            last_step, last_df = trial - x_prev, phi
        else:
            new = -1.0
        if not (math.isfinite(new) and new > 0) and last_step is not None:
            info.path = "boundary"
            new = _boundary(last_df, g_prev, last_step, cfg.c_low)
        if not (math.isfinite(new) and new > 0):
            warnings.warn("non-positive Lipschitz update, doubling instead", RuntimeWarning, stacklevel=2)
            new = 2.0 * cur
        elif new <= cur:
            new = 2.0 * cur
        cur = new
        info.updates = j + 1
        info.trace.append(cur)
        trial = x_prev - (c / cur) * g_new
        phi = fun(trial)[0] - f_prev
        last_step, last_df = trial - x_prev, phi
        if _trial_ok(phi, g_prev, last_step, cur, cfg.c_low):
            break
    else:
        info.exhausted = True
    info.lipschitz = cur
    info.phi_slope = float(slope * c / cur)
    info.trial_ared = float(-phi)
    return info


def reestimate_up(lip: float, grad_prev: np.ndarray, grad_new: np.ndarray, step: np.ndarray, df: float,
                  cfg: AgdConfig, rng: np.random.Generator | None = None) -> ReestimateInfo:
    """Shrink ``L`` after an over-damped step by sampling inside [lower, upper]."""
    ss = float(step @ step)
    if ss == 0.0:
        raise ParameterError("zero step norm")
    info = ReestimateInfo(lipschitz=lip, path="sample")
    upper = float(np.linalg.norm(grad_new - grad_prev)) / (cfg.c_up * math.sqrt(ss))
    if upper == 0.0:
        warnings.warn("identical gradients, keeping the previous Lipschitz estimate", RuntimeWarning, stacklevel=2)
        info.path = "degenerate"
        return info
    lower = _boundary(df, grad_prev, step, cfg.c_low)
    if lower > upper:
        info.lipschitz = upper
        info.path = "upper"
        info.updates = 1
        return info
    # one re-estimation shrinks L by at most shrink_floor so a flat step cannot collapse it
    lower = max(lower, cfg.shrink_floor * lip)
    upper = max(upper, lower)
    kappa = observed_curvature(df, grad_prev, step)
    if kappa < cfg.c_up * lower:
        info.lipschitz = lower
        info.path = "floor"
        info.updates = 1
        return info
    cur = upper
    for j in range(cfg.max_reestimates):
        if cfg.deterministic or rng is None:
            cur = 0.5 * (lower + upper)
        else:
            cur = float(rng.uniform(lower, upper))
        info.updates = j + 1
        info.trace.append(cur)
        if kappa >= cfg.c_up * cur:
            info.lipschitz = cur
            return info
        upper = cur
    info.lipschitz = cur
    info.exhausted = True
    return info


@dataclass
class RestartTracker:
    """Re-estimation bookkeeping between accepted steps."""

    reference: float | None = None
    latest: float | None = None
    count: int = 0
    updates: int = 0
    exhausted: bool = False

    def reset(self):
        self.reference = None
        self.latest = None
        self.count = 0
        self.updates = 0
        self.exhausted = False

    def record(self, info: ReestimateInfo):
        if self.reference is None:
            self.reference = info.lipschitz
        self.latest = info.lipschitz
        self.count += 1
        self.updates += info.updates
        self.exhausted = self.exhausted or info.exhausted


def min_approach(state: RestartTracker, phi_slope: float | None, ared: float, cfg: AgdConfig) -> bool:
    """Local-minimum detector: non-descending slope, over-expanded L, or an exhausted budget."""
    if phi_slope is not None and phi_slope >= abs(ared) * cfg.phi_tol:
        return True
    if state.count > 1 and state.reference is not None and state.latest >= state.reference * cfg.l_tol:
        return True
    return state.exhausted or state.updates > cfg.max_reestimates


# ---------------------------------------------------------------------------
# Restarted driver
# ---------------------------------------------------------------------------

@dataclass
class LreagdReport:
    iterations: int = 0
    evaluations: int = 0
    restarts: int = 0
    min_approaches: int = 0
    converged: bool = False
    f: float = math.inf
    lipschitz_trace: list = field(default_factory=list)
    cost_trace: list = field(default_factory=list)
    events: list = field(default_factory=list)


def initial_lipschitz(g: np.ndarray) -> float:
    n = float(np.linalg.norm(g))
    return n if n > 0 and math.isfinite(n) else 1.0


def lreagd(fun: Fun, x0: np.ndarray, cfg: AgdConfig, rng: np.random.Generator | None = None, n_lip: int = 10,
           lip0: float | None = None, on_min_approach: Callable | None = None) -> tuple[np.ndarray, LreagdReport]:
    """Restarted AGD loop. ``on_min_approach(x) -> (x, fun) | None`` may replace the iterate."""
    rep = LreagdReport()
    x = np.asarray(x0, dtype=float).copy()
    if cfg.mode == "fixed":
        lip = cfg.fixed_lipschitz
    else:
        lip = initial_lipschitz(fun(x)[1]) if lip0 is None else lip0
        rep.evaluations += 1
    tracker = RestartTracker()
    for _ in range(n_lip):
        brk = None if cfg.mode == "fixed" else acc_break
        x, r = agd_run(fun, x, lip, cfg, brk=brk, rng=rng)
        rep.iterations += r.iterations
        rep.evaluations += r.evaluations
        rep.cost_trace.extend(h[0] for h in r.history)
        rep.lipschitz_trace.append(lip)
        rep.f = r.f
        if r.reason == "converged":
            rep.converged = True
            break
        if r.reason == "max_iter":
            continue
        rep.restarts += 1
        if r.accepted > 0:
            tracker.reset()
        step = r.x_new - r.x_prev
        df = r.f_new - r.f_prev
        if r.reason == RESTART_LOW:
            info = reestimate_low(fun, r.x_prev, r.f_prev, r.g_prev, r.g_new, lip, r.k, cfg, step, df)
            rep.evaluations += info.updates + 1
        else:
            info = reestimate_up(lip, r.g_prev, r.g_new, step, df, cfg, rng)
        tracker.record(info)
        lip = info.lipschitz
        rep.events.append((r.reason, lip))
        ared = info.trial_ared if info.trial_ared is not None else -df
        if min_approach(tracker, info.phi_slope, ared, cfg):
            rep.min_approaches += 1
            if on_min_approach is not None:
                out = on_min_approach(x)
                if out is not None:
                    x, fun = out
                    f0, g0 = fun(x)
                    rep.evaluations += 1
                    rep.f = f0
                    lip = initial_lipschitz(g0)
                rep.events.append(("min_approach", lip))
            tracker.reset()
    return x, rep
