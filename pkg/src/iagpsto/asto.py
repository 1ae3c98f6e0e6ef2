"""Sampling-based escape from local minima: GP/uniform sampling, EM rewarding and moving-average policy learning.

The policy lives in the reduced space of interior waypoint positions (``d * (N-1)``
coordinates); velocities of a sample are rebuilt by central differences and the start
and goal states are never touched.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .objective import Objective
from .trajgp import ConditioningSpec, GPModel, ParameterError, condition, selector

MODES = ("AMA", "EMA", "qAdam")
QADAM_MAX_RATE = (3.0 - math.sqrt(5.0)) / 2.0


@dataclass(frozen=True)
class AstoConfig:
    k_samples: int = 12
    m_star: int = 6
    h_p: float = 10.0
    l_r: float = 10.0
    mode: str = "AMA"
    alpha_mu: float = 0.1
    alpha_kappa: float = 0.1
    k_upper_scale: float = 1.25  # K_upper = |range|^2 * (N-1) / k_upper_scale
    k_lower_tol: float = 1e-2
    n_asto: tuple = (5, 15)
    cf_tol: float = 0.0
    k_eps: float = 0.25  # return-conditioning noise as a multiple of the prior block
    g_tol: float = 1e-4
    density_factors: bool = True
    deterministic: bool = False
    sample_std: float | None = 0.2  # cap on the initial marginal std as a fraction of the joint span

    def __post_init__(self):
        if not 0 < self.m_star < self.k_samples:
            raise ParameterError("need 0 < m_star < k_samples")
        if self.h_p < 0 or not self.l_r > 0:
            raise ParameterError("h_p must be nonnegative and l_r positive")
        if self.mode not in MODES:
            raise ParameterError(f"unknown policy update mode {self.mode!r}")
        if self.mode == "EMA" and not (0 < min(self.alpha_mu, self.alpha_kappa) and max(self.alpha_mu, self.alpha_kappa) < 1):
            raise ParameterError("EMA rates must lie in (0, 1)")
        if self.mode == "qAdam" and not (0 < self.alpha_mu < QADAM_MAX_RATE and 0 < self.alpha_kappa < QADAM_MAX_RATE):
            raise ParameterError("qAdam rates must lie in (0, (3 - sqrt 5)/2)")
        lo, hi = self.n_asto if np.ndim(self.n_asto) else (self.n_asto, self.n_asto)
        if not 1 <= lo <= hi:
            raise ParameterError("n_asto must be a positive count or range")
        if self.k_eps < 0:
            raise ParameterError("k_eps must be nonnegative")


@dataclass
class Policy:
    mean: np.ndarray
    cov: np.ndarray

    def copy(self) -> "Policy":
        return Policy(self.mean.copy(), self.cov.copy())


@dataclass
class AstoState:
    """md / ag / base policy iterates plus the sample pool of the current round."""

    policy_md: Policy
    policy_ag: Policy
    policy: Policy
    samples: np.ndarray | None = None
    costs: np.ndarray | None = None
    weights: np.ndarray | None = None
    n: int = 1

    @classmethod
    def start(cls, mean, cov) -> "AstoState":
        p = Policy(np.asarray(mean, dtype=float).copy(), np.asarray(cov, dtype=float).copy())
        return cls(p.copy(), p.copy(), p.copy())


@dataclass
class AstoReport:
    iterations: int = 0
    evaluations: int = 0
    uniform_rounds: int = 0
    reason: str = ""
    accepted: bool = False
    f_initial: float = math.nan
    f_final: float = math.nan
    best_trace: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sym_factor(cov: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clipped to zero."""
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    if w.min() < -1e-10 * max(1.0, abs(w).max()):
        warnings.warn("covariance not PSD, clipping eigenvalues", RuntimeWarning, stacklevel=2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def sample_batch(policy: Policy, n: int, lo: np.ndarray, hi: np.ndarray, k_upper: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """``n`` samples clamped into [lo, hi]; uniform over the box when |cov|_F >= k_upper."""
    m = policy.mean.size
    uniform = bool(np.linalg.norm(policy.cov) >= k_upper)
    if uniform:
        out = rng.uniform(lo, hi, size=(n, m))
    else:
        out = policy.mean + rng.standard_normal((n, m)) @ sym_factor(policy.cov)
    return np.clip(out, lo, hi), uniform


def log_density(policy: Policy, samples: np.ndarray) -> np.ndarray:
    """Gaussian log-density up to a constant, pseudo-inverse on the support of the covariance."""
    r = np.atleast_2d(samples) - policy.mean
    w, v = np.linalg.eigh(0.5 * (policy.cov + policy.cov.T))
    keep = w > 1e-12 * max(1.0, abs(w).max())
    if not keep.any():
        return np.zeros(r.shape[0])
    z = (r @ v[:, keep]) / np.sqrt(w[keep])
    return -0.5 * np.sum(z * z, axis=1) - 0.5 * np.sum(np.log(w[keep]))


def log_weights(costs, h_p: float, log_dens=None) -> np.ndarray:
    """Unnormalized log-weights -h_p (F - min F)/(max F - min F) plus optional log-densities."""
    f = np.asarray(costs, dtype=float)
    if f.size < 2:
        raise ParameterError("need at least two samples")
    span = f.max() - f.min()
    z = np.zeros_like(f) if span == 0 or h_p == 0 else -h_p * (f - f.min()) / span
    if log_dens is not None:
        z = z + np.asarray(log_dens, dtype=float)
    return z


def normalize_log(z) -> np.ndarray:
    z = np.asarray(z, dtype=float) - np.max(z)
    p = np.exp(z)
    return p / p.sum()


def weights(costs, h_p: float, log_dens=None) -> np.ndarray:
    """Normalized exp(-h_p (F - min F)/(max F - min F)), optionally times sample densities."""
    return normalize_log(log_weights(costs, h_p, log_dens))


def select_important(costs, m_star: int) -> np.ndarray:
    """Indices of the ``m_star`` lowest costs, ties broken by index."""
    return np.argsort(np.asarray(costs), kind="stable")[:m_star]


def em_policy(samples, w, m_star: int | None = None, costs=None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted moments of the selected samples (the reward maximizer)."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    w = np.asarray(w, dtype=float)
    if costs is not None and m_star is not None:
        idx = select_important(costs, m_star)
        x, w = x[idx], w[idx]
    elif m_star is not None:
        x, w = x[:m_star], w[:m_star]
    tot = w.sum()
    if not tot > 0:
        raise ParameterError("weights must have positive mass")
    w = w / tot
    mu = w @ x
    r = x - mu
    cov = (r * w[:, None]).T @ r
    if np.allclose(r, 0.0):
        warnings.warn("degenerate sample set, covariance is zero", RuntimeWarning, stacklevel=2)
    return mu, 0.5 * (cov + cov.T)


def reward_gradient(samples, w, mu, cov) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of sum_m p_m log N(theta_m; mu, cov) for an invertible ``cov``."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    w = np.asarray(w, dtype=float)
    prec = np.linalg.inv(cov)
    r = x - mu
    g_mu = prec @ (w @ r)
    s = (r * w[:, None]).T @ r
    g_cov = 0.5 * prec @ (s - w.sum() * cov) @ prec
    return g_mu, g_cov


# ---------------------------------------------------------------------------
# Policy learning
# ---------------------------------------------------------------------------

def ma_step(state: AstoState, mu_hat, cov_hat, alpha: tuple, beta: tuple, lam: tuple) -> AstoState:
    """Generic moving-average step; each tuple holds (mean rate, covariance rate)."""
    md, base = state.policy_md, state.policy
    g_mu = mu_hat - md.mean
    g_k = cov_hat - md.cov
    ag = Policy(md.mean + beta[0] * g_mu, md.cov + beta[1] * g_k)
    nb = Policy(base.mean + lam[0] * g_mu, base.cov + lam[1] * g_k)
    nmd = Policy((1 - alpha[0]) * ag.mean + alpha[0] * nb.mean, (1 - alpha[1]) * ag.cov + alpha[1] * nb.cov)
    nmd.cov = 0.5 * (nmd.cov + nmd.cov.T)
    return AstoState(nmd, ag, nb, state.samples, state.costs, state.weights, state.n + 1)


def ama_step(state: AstoState, mu_hat, cov_hat, cfg: AstoConfig, rng: np.random.Generator | None = None,
             lam: float | None = None) -> AstoState:
    n = state.n
    alpha = 2.0 / (n + 1)
    beta = 1.0 / cfg.l_r
    if lam is None:
        if cfg.deterministic or rng is None:
            lam = beta * (1.0 + alpha / 8.0)
        else:
            lam = beta * float(rng.uniform(1.0, 1.0 + alpha / 4.0))
    return ma_step(state, mu_hat, cov_hat, (alpha, alpha), (beta, beta), (lam, lam))


def ema_step(state: AstoState, mu_hat, cov_hat, cfg: AstoConfig) -> AstoState:
    a = (cfg.alpha_mu, cfg.alpha_kappa)
    return ma_step(state, mu_hat, cov_hat, a, a, a)


def qadam_step(state: AstoState, mu_hat, cov_hat, cfg: AstoConfig) -> AstoState:
    n = state.n
    a = (cfg.alpha_mu, cfg.alpha_kappa)
    b = ((1 - a[0]) ** n, (1 - a[1]) ** n)
    return ma_step(state, mu_hat, cov_hat, a, b, (1 + b[0], 1 + b[1]))


def policy_step(state: AstoState, mu_hat, cov_hat, cfg: AstoConfig, rng=None) -> AstoState:
    if cfg.mode == "AMA":
        return ama_step(state, mu_hat, cov_hat, cfg, rng)
    if cfg.mode == "EMA":
        return ema_step(state, mu_hat, cov_hat, cfg)
    return qadam_step(state, mu_hat, cov_hat, cfg)


def ama_closed_form(md1, grads, lams, beta: float) -> np.ndarray:
    """md_{n+1} of the accelerated average from its quasi-gradient history.

    md_{n+1} = md_n + (beta + a_n (l_n - beta)) g_n
               + a_n sum_{i=2}^{n-1} (Gamma_{n-1}/Gamma_{i-1}) (l_i - beta) g_i
    with a_n = 2/(n+1) and Gamma_k = 2/(k(k+1)); the i = 1 term vanishes since a_1 = 1.
    ``grads[i-1]`` must be the quasi-gradient evaluated at md_i.
    """
    gam = lambda k: 2.0 / (k * (k + 1))
    md = np.asarray(md1, dtype=float)
    n = len(grads)
    for j in range(1, n + 1):
        a = 2.0 / (j + 1)
        acc = (beta + a * (lams[j - 1] - beta)) * grads[j - 1]
        for i in range(2, j):
            acc = acc + a * gam(j - 1) / gam(i - 1) * (lams[i - 1] - beta) * grads[i - 1]
        md = md + acc
    return md


def qadam_closed_form(mu_hats, md_hist, alpha: float) -> np.ndarray:
    """md_{n+1} = mu_hat_n + alpha sum_{i<n} ((mu_hat_i - md_i) - (mu_hat_n - md_n)) (1-alpha)^{n-i}."""
    n = len(mu_hats)
    g = [np.asarray(mu_hats[i]) - np.asarray(md_hist[i]) for i in range(n)]
    out = np.asarray(mu_hats[-1], dtype=float).copy()
    for i in range(n - 1):
        out = out + alpha * (g[i] - g[-1]) * (1 - alpha) ** (n - 1 - i)
    return out


# ---------------------------------------------------------------------------
# Trajectory plumbing
# ---------------------------------------------------------------------------

def interior_index(n_support: int, dof: int) -> np.ndarray:
    s = 2 * dof
    return np.concatenate([np.arange(t * s, t * s + dof) for t in range(1, n_support - 1)])


def expand(theta_base: np.ndarray, reduced: np.ndarray, times: np.ndarray, dof: int) -> np.ndarray:
    """Full trajectory from interior positions; interior velocities by central differences."""
    n = times.size
    st = np.asarray(theta_base, dtype=float).reshape(n, 2 * dof).copy()
    st[1:-1, :dof] = np.asarray(reduced).reshape(n - 2, dof)
    pos = st[:, :dof]
    st[1:-1, dof:] = (pos[2:] - pos[:-2]) / (times[2:] - times[:-2])[:, None]
    return st.ravel()


def k_upper_tol(robot, n_support: int, scale: float = 1.25) -> float:
    span = robot.theta_max - robot.theta_min
    return float(span @ span) * max(n_support - 2, 1) / scale


def modify_gp_on_return(gp0: GPModel, theta_star, k_eps, index: np.ndarray | None = None) -> GPModel:
    """Condition ``gp0`` on the learned trajectory at ``index`` (interior positions by default).

    A scalar ``k_eps`` is read as a multiple of the prior block C K0 C^T; a matrix is used
    as the observation noise directly.
    """
    if index is None:
        index = interior_index(gp0.n_support, gp0.model.state_dim)
    theta_star = np.asarray(theta_star, dtype=float).ravel()
    if theta_star.size == gp0.size:
        obs = theta_star[index]
    elif theta_star.size == index.size:
        obs = theta_star
    else:
        raise ParameterError("theta_star does not match the GP or the sampled coordinates")
    if np.ndim(k_eps) == 0:
        noise = float(k_eps) * gp0.cov[np.ix_(index, index)]
    else:
        noise = np.asarray(k_eps, dtype=float)
    return condition(gp0, ConditioningSpec(selector(gp0.size, index), obs, noise))


def initial_cov(cov: np.ndarray, span: np.ndarray, sample_std: float | None) -> np.ndarray:
    """Scale ``cov`` down so no marginal std exceeds ``sample_std`` times the joint span."""
    if sample_std is None:
        return cov
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    ratio = float(np.max(sd / (sample_std * span))) if sd.size else 0.0
    return cov / ratio ** 2 if ratio > 1.0 else cov


def draw_n_asto(cfg: AstoConfig, rng: np.random.Generator) -> int:
    if np.ndim(cfg.n_asto) == 0:
        return int(cfg.n_asto)
    lo, hi = cfg.n_asto
    return int(rng.integers(lo, hi + 1))


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def asto_run(objective: Objective, gp0: GPModel, cfg: AstoConfig, rng: np.random.Generator,
             theta0: np.ndarray | None = None) -> tuple[np.ndarray, GPModel, AstoReport]:
    """Sample, reward and learn until a collision-free trajectory or a stop rule.

    ``theta0`` defaults to the mean of ``gp0``. The result never has a higher objective
    than ``theta0`` when ``cf_tol`` is zero.
    """
    rep = AstoReport()
    theta0 = gp0.mean.copy() if theta0 is None else np.asarray(theta0, dtype=float).ravel()
    robot = objective.world.robot
    dof, n = robot.dof, gp0.n_support
    if n < 3:
        rep.reason = "no_interior"
        return theta0, gp0, rep
    idx = interior_index(n, dof)
    times = gp0.times
    lo = np.tile(robot.theta_min, n - 2)
    hi = np.tile(robot.theta_max, n - 2)
    k_up = k_upper_tol(robot, n, cfg.k_upper_scale)

    def full(v):
        return expand(theta0, v, times, dof)

    def done(theta, reason):
        rep.reason = reason
        rep.accepted = True
        rep.f_final = objective.evaluate(theta)
        rep.evaluations += 1
        return theta, modify_gp_on_return(gp0, theta, cfg.k_eps, idx), rep

    f0, free0 = objective.evaluate_free(theta0)
    rep.f_initial = f0
    rep.evaluations += 1
    if free0 <= cfg.g_tol:
        rep.reason = "initial_free"
        rep.accepted = True
        rep.f_final = f0
        return theta0, modify_gp_on_return(gp0, theta0, cfg.k_eps, idx), rep

    state = AstoState.start(theta0[idx], initial_cov(gp0.cov[np.ix_(idx, idx)], hi - lo, cfg.sample_std))
    n_max = draw_n_asto(cfg, rng)
    pool = np.empty((0, idx.size))
    pool_f = np.empty(0)
    md_f = f0
    for it in range(1, n_max + 1):
        rep.iterations = it
        n_new = cfg.k_samples if it == 1 else cfg.k_samples - cfg.m_star
        fresh, uniform = sample_batch(state.policy_md, n_new, lo, hi, k_up, rng)
        rep.uniform_rounds += int(uniform)
        fresh_f = np.empty(n_new)
        for k in range(n_new):
            th = full(fresh[k])
            fresh_f[k], free = objective.evaluate_free(th)
            rep.evaluations += 1
            if free <= cfg.g_tol:
                return done(th, "free_sample")
        pool = np.vstack([pool, fresh])
        pool_f = np.concatenate([pool_f, fresh_f])
        ld = None
        if cfg.density_factors and not uniform:
            ld = log_density(state.policy_md, pool)
        z = log_weights(pool_f, cfg.h_p, ld)
        p = normalize_log(z)
        keep = select_important(pool_f, cfg.m_star)
        # renormalize over the selected set in log space so tiny weights cannot underflow to zero
        mu_hat, k_hat = em_policy(pool[keep], normalize_log(z[keep]))
        state.samples, state.costs, state.weights = pool, pool_f, p
        state = policy_step(state, mu_hat, k_hat, cfg, rng)
        md_theta = full(np.clip(state.policy_md.mean, lo, hi))
        md_f, md_free = objective.evaluate_free(md_theta)
        rep.evaluations += 1
        rep.best_trace.append(float(min(md_f, pool_f.min())))
        if md_free <= cfg.g_tol:
            return done(md_theta, "feasible_policy")
        knorm = float(np.linalg.norm(state.policy_md.cov))
        min_eig = float(np.linalg.eigvalsh(state.policy_md.cov).min())
        pool, pool_f = pool[keep], pool_f[keep]
        if knorm <= cfg.k_lower_tol or min_eig <= 0 or it >= n_max:
            break
    # final selection over the policy mean and the retained samples
    cands = [full(np.clip(state.policy_md.mean, lo, hi))] + [full(v) for v in pool]
    cf = np.concatenate([[md_f], pool_f])
    j = int(np.argmin(cf))
    rep.reason = "budget"
    if cf[j] - f0 <= abs(f0) * cfg.cf_tol:
        rep.accepted = True
        rep.f_final = float(cf[j])
        return cands[j], modify_gp_on_return(gp0, cands[j], cfg.k_eps, idx), rep
    rep.f_final = f0
    return theta0, gp0, rep
