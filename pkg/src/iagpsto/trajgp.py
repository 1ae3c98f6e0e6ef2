"""Gauss-Markov trajectory prior from a constant-velocity SDE.

States are stacked per waypoint as (position, velocity), so a trajectory over ``N+1``
support times with ``d`` joints is a vector of length ``(N+1)*2d``. The prior precision
is assembled from its Markov structure and carried alongside the dense covariance; the
smoothness cost reads the precision, never a dense inverse of a near-singular matrix.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

ENDPOINT_NOISE = 1e-8


class ParameterError(ValueError):
    """Invalid model or problem parameters."""


class NumericalError(ArithmeticError):
    """A linear-algebra step is too ill-conditioned to trust."""


def _is_pd(m: np.ndarray) -> bool:
    if m.ndim != 2 or m.shape[0] != m.shape[1] or not np.allclose(m, m.T, atol=1e-12 * (1 + np.abs(m).max())):
        return False
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return False
    return True


@dataclass(frozen=True)
class LtvSdeModel:
    """Constant-velocity SDE: white-noise acceleration with spectral density ``qc``."""

    state_dim: int
    dt: float = 4.0
    qc: np.ndarray | None = None

    def __post_init__(self):
        if int(self.state_dim) < 1:
            raise ParameterError("state_dim must be a positive integer")
        if not self.dt > 0:
            raise ParameterError("dt must be positive")
        qc = np.eye(self.state_dim) if self.qc is None else np.atleast_2d(np.asarray(self.qc, dtype=float))
        if qc.shape != (self.state_dim, self.state_dim) or not _is_pd(qc):
            raise ParameterError("qc must be a symmetric positive definite d x d matrix")
        object.__setattr__(self, "qc", qc)

    @property
    def size(self) -> int:
        return 2 * self.state_dim

    def transition(self, t: float, s: float) -> np.ndarray:
        d = self.state_dim
        phi = np.eye(2 * d)
        phi[:d, d:] = (t - s) * np.eye(d)
        return phi

    def process_noise(self, dt: float | None = None) -> np.ndarray:
        h = self.dt if dt is None else float(dt)
        blk = np.array([[h**3 / 3.0, h**2 / 2.0], [h**2 / 2.0, h]])
        return np.kron(blk, self.qc)


@dataclass(frozen=True, eq=False)
class GPModel:
    """Gaussian trajectory distribution; ``precision`` is optional and filled lazily."""

    mean: np.ndarray
    cov: np.ndarray
    model: LtvSdeModel | None = None
    times: np.ndarray | None = None
    precision: np.ndarray | None = None
    pinv_used: bool = field(default=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ParameterError("covariance shape does not match mean length")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))
        if self.times is not None:
            object.__setattr__(self, "times", np.asarray(self.times, dtype=float))

    @property
    def size(self) -> int:
        return self.mean.size

    @property
    def n_support(self) -> int:
        return self.size // self.model.size if self.model is not None else 0

    def states(self) -> np.ndarray:
        return self.mean.reshape(-1, self.model.size)

    def get_precision(self) -> np.ndarray:
        if self.precision is None:
            try:
                c, low = linalg.cho_factor(self.cov)
                p = linalg.cho_solve((c, low), np.eye(self.size))
                if not np.all(np.isfinite(p)) or np.linalg.cond(self.cov) > 1e13:
                    raise np.linalg.LinAlgError
            except (np.linalg.LinAlgError, linalg.LinAlgError):
                warnings.warn("singular GP covariance, using the pseudo-inverse", RuntimeWarning, stacklevel=2)
                p = np.linalg.pinv(self.cov, hermitian=True)
                object.__setattr__(self, "pinv_used", True)
            object.__setattr__(self, "precision", 0.5 * (p + p.T))
        return self.precision

    def with_mean(self, mean: np.ndarray) -> "GPModel":
        return GPModel(mean, self.cov, self.model, self.times, self.precision, self.pinv_used)


@dataclass(frozen=True)
class ConditioningSpec:
    obs_matrix: np.ndarray
    obs_values: np.ndarray
    obs_noise: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.obs_matrix, dtype=float))
        v = np.asarray(self.obs_values, dtype=float).ravel()
        k = np.atleast_2d(np.asarray(self.obs_noise, dtype=float))
        if c.shape[0] != v.size or k.shape != (v.size, v.size):
            raise ParameterError("observation matrix, values and noise disagree in size")
        object.__setattr__(self, "obs_matrix", c)
        object.__setattr__(self, "obs_values", v)
        object.__setattr__(self, "obs_noise", 0.5 * (k + k.T))


def selector(n_total: int, index: np.ndarray) -> np.ndarray:
    """Rows of the identity picking ``index`` out of a length ``n_total`` vector."""
    c = np.zeros((len(index), n_total))
    c[np.arange(len(index)), np.asarray(index)] = 1.0
    return c


def condition(gp: GPModel, spec: ConditioningSpec) -> GPModel:
    """Posterior of ``gp`` after observing ``C theta = obs_values`` with noise ``obs_noise``."""
    c, y, kn = spec.obs_matrix, spec.obs_values, spec.obs_noise
    if c.shape[1] != gp.size:
        raise ParameterError("observation matrix width does not match the GP size")
    ck = c @ gp.cov
    innov = ck @ c.T + kn
    innov = 0.5 * (innov + innov.T)
    cond = np.linalg.cond(innov)
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalError(f"innovation matrix is singular (condition number {cond:.3e})")
    gain_t = np.linalg.solve(innov, ck)  # S^-1 C K
    mean = gp.mean + gain_t.T @ (y - c @ gp.mean)
    cov = gp.cov - ck.T @ gain_t
    cov = 0.5 * (cov + cov.T)
    prec = None
    if gp.precision is not None and _is_pd(kn):
        prec = gp.precision + c.T @ np.linalg.solve(kn, c)
    return GPModel(mean, cov, gp.model, gp.times, prec)


def _coerce_state(x, d: int, vel: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 2 * d:
        return x
    if x.size == d:
        return np.concatenate([x, vel])
    raise ParameterError(f"state must have {d} or {2 * d} entries")


def support_times(n_support: int, dt: float) -> np.ndarray:
    return dt * np.arange(n_support, dtype=float)


def build_prior(model: LtvSdeModel, n_support: int, start, goal, k0: np.ndarray | None = None,
                times: np.ndarray | None = None, endpoint_noise: float = ENDPOINT_NOISE) -> GPModel:
    """Constant-velocity prior pinned to ``start`` and ``goal``.

    ``start``/``goal`` may be positions (velocity is then the straight-line average) or
    full states. ``times`` allows non-uniform support spacing; default is ``model.dt``.
    """
    if int(n_support) < 2:
        raise ParameterError("n_support must be at least 2")
    n = int(n_support)
    d, s = model.state_dim, model.size
    t = support_times(n, model.dt) if times is None else np.asarray(times, dtype=float)
    if t.shape != (n,) or np.any(np.diff(t) <= 0):
        raise ParameterError("times must be strictly increasing with one entry per waypoint")
    k0 = np.eye(s) if k0 is None else np.asarray(k0, dtype=float)
    if not _is_pd(k0):
        raise ParameterError("k0 must be symmetric positive definite")
    p0 = np.asarray(start, dtype=float).ravel()[:d]
    pg = np.asarray(goal, dtype=float).ravel()[:d]
    vel = (pg - p0) / (t[-1] - t[0])
    x0 = _coerce_state(start, d, vel)
    xg = _coerce_state(goal, d, vel)

    # Markov factorization: theta = A w with w ~ N(0, blockdiag(k0, Q_1 ... Q_N)).
    a_inv = np.eye(n * s)
    qd = np.zeros((n * s, n * s))
    qd[:s, :s] = k0
    mean = np.zeros(n * s)
    mean[:s] = x0
    for i in range(1, n):
        phi = model.transition(t[i], t[i - 1])
        a_inv[i * s:(i + 1) * s, (i - 1) * s:i * s] = -phi
        qd[i * s:(i + 1) * s, i * s:(i + 1) * s] = model.process_noise(t[i] - t[i - 1])
        mean[i * s:(i + 1) * s] = phi @ mean[(i - 1) * s:i * s]
    a = linalg.solve_triangular(a_inv, np.eye(n * s), lower=True)
    cov = a @ qd @ a.T
    qinv = np.zeros_like(qd)
    for i in range(n):
        blk = qd[i * s:(i + 1) * s, i * s:(i + 1) * s]
        qinv[i * s:(i + 1) * s, i * s:(i + 1) * s] = np.linalg.inv(blk)
    prec = a_inv.T @ qinv @ a_inv
    prior = GPModel(mean, cov, model, t, 0.5 * (prec + prec.T))
    idx = np.concatenate([np.arange(s), np.arange((n - 1) * s, n * s)])
    spec = ConditioningSpec(selector(n * s, idx), np.concatenate([x0, xg]), endpoint_noise * np.eye(2 * s))
    return condition(prior, spec)


def _residual(gp: GPModel, traj) -> np.ndarray:
    x = np.asarray(traj, dtype=float).ravel()
    if x.size != gp.size:
        raise ParameterError("trajectory length does not match the GP")
    return x - gp.mean


def gp_cost(gp: GPModel, traj) -> float:
    r = _residual(gp, traj)
    return 0.5 * float(r @ (gp.get_precision() @ r))


def gp_cost_gradient(gp: GPModel, traj) -> np.ndarray:
    r = _residual(gp, traj)
    return gp.get_precision() @ r


def interpolation_weights(model: LtvSdeModel, span: float, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """(Lambda, Psi) with x(t_a + tau*span) = Lambda x_a + Psi x_b under the prior."""
    dt = tau * span
    q_tau = model.process_noise(dt) if dt > 0 else np.zeros((model.size, model.size))
    psi = q_tau @ model.transition(span, dt).T @ np.linalg.inv(model.process_noise(span))
    lam = model.transition(dt, 0.0) - psi @ model.transition(span, 0.0)
    return lam, psi


def interpolate_states(gp: GPModel, t_a: int, t_b: int, taus, states=None) -> list[np.ndarray]:
    """States at fractions ``taus`` of the way from support index ``t_a`` to ``t_b``.

    Conditioning is on the two bracketing states only, taken from ``states`` (an
    ``(N+1, 2d)`` array) when given, otherwise from the GP mean.
    """
    if gp.model is None or gp.times is None:
        raise ParameterError("interpolation needs a GP built from an SDE model")
    model = gp.model
    src = gp.states() if states is None else np.asarray(states, dtype=float).reshape(-1, model.size)
    span = gp.times[t_b] - gp.times[t_a]
    xa, xb = src[t_a], src[t_b]
    out = []
    for tau in np.atleast_1d(taus):
        lam, psi = interpolation_weights(model, span, float(tau))
        out.append(lam @ xa + psi @ xb)
    return out


def _cv_weights(spans: np.ndarray, taus: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 factors of (Lambda, Psi) for every (span, tau) pair; the full weights are
    their Kronecker products with the identity, independent of Qc."""
    h = spans[:, None]
    s = taus[None, :] * h
    r = h - s
    # Q(s) Phi(h, s)^T Q(h)^{-1} written out for the 2x2 block [[h^3/3, h^2/2], [h^2/2, h]]
    q11, q12, q22 = s**3 / 3.0, s**2 / 2.0, s
    a11, a12, a21, a22 = q11 + q12 * r, q12, q12 + q22 * r, q22
    det = h**4 / 12.0
    i11, i12, i22 = h / det, -h**2 / 2.0 / det, h**3 / 3.0 / det
    psi = np.empty(spans.shape + taus.shape + (2, 2))
    psi[..., 0, 0] = a11 * i11 + a12 * i12
    psi[..., 0, 1] = a11 * i12 + a12 * i22
    psi[..., 1, 0] = a21 * i11 + a22 * i12
    psi[..., 1, 1] = a21 * i12 + a22 * i22
    lam = np.empty_like(psi)
    lam[..., 0, 0] = 1.0 - psi[..., 0, 0]
    lam[..., 0, 1] = s - psi[..., 0, 0] * h - psi[..., 0, 1]
    lam[..., 1, 0] = -psi[..., 1, 0]
    lam[..., 1, 1] = 1.0 - psi[..., 1, 0] * h - psi[..., 1, 1]
    return lam, psi


def upsample(model: LtvSdeModel, times: np.ndarray, states: np.ndarray, n_intervals: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense (times, states) with ``n_intervals`` sub-intervals per support gap."""
    times = np.asarray(times, dtype=float)
    d = model.state_dim
    states = np.asarray(states, dtype=float).reshape(len(times), 2, d)
    n, m = len(times), int(n_intervals)
    taus = np.arange(1, m) / m
    spans = np.diff(times)
    if np.any(spans <= 0):
        raise ParameterError("support times must be strictly increasing")
    lam, psi = _cv_weights(spans, taus)
    inner = lam @ states[:-1, None] + psi @ states[1:, None]
    dense_x = np.empty((n - 1, m, 2, d))
    dense_x[:, 0] = states[:-1]
    dense_x[:, 1:] = inner
    dense_x = np.concatenate([dense_x.reshape(-1, 2 * d), states[-1:].reshape(1, 2 * d)])
    dense_t = np.empty(dense_x.shape[0])
    dense_t[:-1] = (times[:-1, None] + np.concatenate(([0.0], taus))[None, :] * spans[:, None]).ravel()
    dense_t[-1] = times[-1]
    return dense_t, dense_x
