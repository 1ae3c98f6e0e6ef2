"""Hot loops: SDF lookup, planar forward kinematics, collision terms, local obstacle gradient.

Two interchangeable backends live here. The numba backend compiles explicit loops with
``@njit``; the numpy backend vectorizes the same arithmetic. ``IAGPSTO_DISABLE_NUMBA=1``
(or a missing numba install) selects numpy. Both return identical results up to roundoff.
"""
from __future__ import annotations

import math
import os

import numpy as np

_FLAG = os.environ.get("IAGPSTO_DISABLE_NUMBA", "").strip().lower()
_WANT_NUMBA = _FLAG not in ("1", "true", "yes", "on")

try:
    if not _WANT_NUMBA:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"

POINT = 0
ARM = 1


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def collision_cost_np(d, eps):
    d = np.asarray(d, dtype=float)
    r = eps - d
    mid = r**3 / eps**2 - r**4 / (2.0 * eps**3)
    out = np.where(d < 0.0, 0.5 * eps - d, np.where(d <= eps, mid, 0.0))
    return out


def sdf_eval_np(values, ox, oy, cell, pts):
    """Bilinear lookup of many points; outside the grid clamp and add the Euclidean gap."""
    pts = np.asarray(pts, dtype=float)
    flat = pts.reshape(-1, 2)
    nx, ny = values.shape
    fx = (flat[:, 0] - ox) / cell
    fy = (flat[:, 1] - oy) / cell
    cx = np.clip(fx, 0.0, nx - 1.0)
    cy = np.clip(fy, 0.0, ny - 1.0)
    gap = np.hypot(fx - cx, fy - cy) * cell
    i0 = np.minimum(np.floor(cx).astype(np.int64), nx - 2)
    j0 = np.minimum(np.floor(cy).astype(np.int64), ny - 2)
    tx = cx - i0
    ty = cy - j0
    v00 = values[i0, j0]
    v10 = values[i0 + 1, j0]
    v01 = values[i0, j0 + 1]
    v11 = values[i0 + 1, j0 + 1]
    val = (1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v10 + (1 - tx) * ty * v01 + tx * ty * v11
    return (val + gap).reshape(pts.shape[:-1])


def body_points_np(kind, q, lengths, base, ball_link, ball_frac):
    """Ball centers for configurations ``q`` of shape (..., d) -> (..., n_balls, 2)."""
    q = np.asarray(q, dtype=float)
    if kind == POINT:
        return np.repeat(q[..., None, :2], len(ball_link), axis=-2)
    ang = np.cumsum(q, axis=-1)
    c, s = np.cos(ang), np.sin(ang)
    dx = c * lengths
    dy = s * lengths
    jx = np.concatenate([np.zeros(q.shape[:-1] + (1,)), np.cumsum(dx, axis=-1)], axis=-1) + base[0]
    jy = np.concatenate([np.zeros(q.shape[:-1] + (1,)), np.cumsum(dy, axis=-1)], axis=-1) + base[1]
    px = jx[..., ball_link] + ball_frac * dx[..., ball_link]
    py = jy[..., ball_link] + ball_frac * dy[..., ball_link]
    return np.stack([px, py], axis=-1)


def _ball_costs_np(pts, radii, values, ox, oy, cell, eps):
    return collision_cost_np(sdf_eval_np(values, ox, oy, cell, pts) - radii, eps)


def _speeds_np(pts, dts):
    """Per-waypoint, per-ball workspace speed: forward differences, backward at the end."""
    diff = np.linalg.norm(pts[1:] - pts[:-1], axis=-1) / dts[:, None]
    return np.concatenate([diff, diff[-1:]], axis=0)


def waypoint_terms_np(kind, q, lengths, base, ball_link, ball_frac, radii,
                      values, ox, oy, cell, dts, eps):
    pts = body_points_np(kind, q, lengths, base, ball_link, ball_frac)
    cost = _ball_costs_np(pts, radii, values, ox, oy, cell, eps)
    return np.sum(cost * _speeds_np(pts, dts), axis=-1)


def obstacle_value_grad_np(kind, q, rho, lengths, base, ball_link, ball_frac, radii,
                           values, ox, oy, cell, dts, eps, h):
    n, d = q.shape
    pts = body_points_np(kind, q, lengths, base, ball_link, ball_frac)
    cost = _ball_costs_np(pts, radii, values, ox, oy, cell, eps)
    speed = _speeds_np(pts, dts)
    value = float(np.sum(rho * np.sum(cost * speed, axis=-1)))
    grad = np.zeros((n, d))
    if n < 3:
        return value, grad
    t = np.arange(1, n - 1)
    m = t.size
    # perturbed configurations: (m, d, 2, d)
    qp = np.repeat(q[t][:, None, None, :], d, axis=1).repeat(2, axis=2)
    step = np.eye(d)[:, None, :] * np.array([h, -h])[None, :, None]
    qp = qp + step[None]
    pp = body_points_np(kind, qp, lengths, base, ball_link, ball_frac)  # (m,d,2,nb,2)
    cp = _ball_costs_np(pp, radii, values, ox, oy, cell, eps)  # (m,d,2,nb)
    prev_pts = pts[t - 1][:, None, None]
    next_pts = pts[t + 1][:, None, None]
    dt_prev = dts[t - 1][:, None, None, None]
    dt_next = dts[t][:, None, None, None]
    # term t-1 depends on the perturbed point through its forward difference
    term_prev = np.sum(cost[t - 1][:, None, None] * np.linalg.norm(pp - prev_pts, axis=-1) / dt_prev, axis=-1)
    term_self = np.sum(cp * np.linalg.norm(next_pts - pp, axis=-1) / dt_next, axis=-1)
    local = rho[t - 1][:, None, None] * term_prev + rho[t][:, None, None] * term_self
    # the last waypoint uses a backward difference onto waypoint n-2
    last = np.sum(cost[n - 1][None, None] * np.linalg.norm(pts[n - 1][None, None] - pp[-1], axis=-1), axis=-1)
    local[-1] += rho[n - 1] * last / dts[n - 2]
    grad[1:n - 1] = (local[:, :, 0] - local[:, :, 1]) / (2.0 * h)
    return value, grad


def ball_clearance_np(kind, q, lengths, base, ball_link, ball_frac, radii, values, ox, oy, cell):
    pts = body_points_np(kind, q, lengths, base, ball_link, ball_frac)
    return np.min(sdf_eval_np(values, ox, oy, cell, pts) - radii, axis=-1)


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _cc(d, eps):
        if d < 0.0:
            return 0.5 * eps - d
        if d <= eps:
            r = eps - d
            return r * r * r / (eps * eps) - r * r * r * r / (2.0 * eps * eps * eps)
        return 0.0

    @njit(cache=True)
    def _sdf1(values, ox, oy, cell, px, py):
        nx, ny = values.shape
        fx = (px - ox) / cell
        fy = (py - oy) / cell
        cx = min(max(fx, 0.0), nx - 1.0)
        cy = min(max(fy, 0.0), ny - 1.0)
        gap = math.hypot(fx - cx, fy - cy) * cell
        i0 = min(int(math.floor(cx)), nx - 2)
        j0 = min(int(math.floor(cy)), ny - 2)
        tx = cx - i0
        ty = cy - j0
        val = ((1 - tx) * (1 - ty) * values[i0, j0] + tx * (1 - ty) * values[i0 + 1, j0]
               + (1 - tx) * ty * values[i0, j0 + 1] + tx * ty * values[i0 + 1, j0 + 1])
        return val + gap

    @njit(cache=True)
    def _points1(kind, q, lengths, base, ball_link, ball_frac, out):
        nb = ball_link.shape[0]
        if kind == 0:
            for b in range(nb):
                out[b, 0] = q[0]
                out[b, 1] = q[1]
            return
        nl = lengths.shape[0]
        jx = np.empty(nl + 1)
        jy = np.empty(nl + 1)
        dx = np.empty(nl)
        dy = np.empty(nl)
        jx[0] = base[0]
        jy[0] = base[1]
        a = 0.0
        for k in range(nl):
            a += q[k]
            dx[k] = math.cos(a) * lengths[k]
            dy[k] = math.sin(a) * lengths[k]
            jx[k + 1] = jx[k] + dx[k]
            jy[k + 1] = jy[k] + dy[k]
        for b in range(nb):
            k = ball_link[b]
            out[b, 0] = jx[k] + ball_frac[b] * dx[k]
            out[b, 1] = jy[k] + ball_frac[b] * dy[k]

    @njit(cache=True)
    def _costs1(pts, radii, values, ox, oy, cell, eps, out):
        for b in range(pts.shape[0]):
            out[b] = _cc(_sdf1(values, ox, oy, cell, pts[b, 0], pts[b, 1]) - radii[b], eps)

    @njit(cache=True)
    def _moved(ca, pa, pb, dt):
        s = 0.0
        for b in range(pa.shape[0]):
            s += ca[b] * math.hypot(pb[b, 0] - pa[b, 0], pb[b, 1] - pa[b, 1])
        return s / dt

    @njit(cache=True)
    def _prepare(kind, q, lengths, base, ball_link, ball_frac, radii, values, ox, oy, cell, eps):
        n = q.shape[0]
        nb = ball_link.shape[0]
        pts = np.empty((n, nb, 2))
        cost = np.empty((n, nb))
        for t in range(n):
            _points1(kind, q[t], lengths, base, ball_link, ball_frac, pts[t])
            _costs1(pts[t], radii, values, ox, oy, cell, eps, cost[t])
        return pts, cost

    @njit(cache=True)
    def _terms(pts, cost, dts):
        n = pts.shape[0]
        out = np.empty(n)
        for t in range(n - 1):
            out[t] = _moved(cost[t], pts[t], pts[t + 1], dts[t])
        out[n - 1] = _moved(cost[n - 1], pts[n - 2], pts[n - 1], dts[n - 2])
        return out

    @njit(cache=True)
    def waypoint_terms_nb(kind, q, lengths, base, ball_link, ball_frac, radii,
                          values, ox, oy, cell, dts, eps):
        pts, cost = _prepare(kind, q, lengths, base, ball_link, ball_frac, radii, values, ox, oy, cell, eps)
        return _terms(pts, cost, dts)

    @njit(cache=True)
    def obstacle_value_grad_nb(kind, q, rho, lengths, base, ball_link, ball_frac, radii,
                               values, ox, oy, cell, dts, eps, h):
        n, d = q.shape
        nb = ball_link.shape[0]
        pts, cost = _prepare(kind, q, lengths, base, ball_link, ball_frac, radii, values, ox, oy, cell, eps)
        terms = _terms(pts, cost, dts)
        value = 0.0
        for t in range(n):
            value += rho[t] * terms[t]
        grad = np.zeros((n, d))
        qt = np.empty(d)
        pp = np.empty((nb, 2))
        cp = np.empty(nb)
        for t in range(1, n - 1):
            for j in range(d):
                acc = 0.0
                for sgn in (1.0, -1.0):
                    for i in range(d):
                        qt[i] = q[t, i]
                    qt[j] += sgn * h
                    _points1(kind, qt, lengths, base, ball_link, ball_frac, pp)
                    _costs1(pp, radii, values, ox, oy, cell, eps, cp)
                    loc = rho[t - 1] * _moved(cost[t - 1], pts[t - 1], pp, dts[t - 1])
                    loc += rho[t] * _moved(cp, pp, pts[t + 1], dts[t])
                    if t == n - 2:
                        loc += rho[n - 1] * _moved(cost[n - 1], pp, pts[n - 1], dts[n - 2])
                    acc += sgn * loc
                grad[t, j] = acc / (2.0 * h)
        return value, grad

    @njit(cache=True)
    def ball_clearance_nb(kind, q, lengths, base, ball_link, ball_frac, radii, values, ox, oy, cell):
        n = q.shape[0]
        nb = ball_link.shape[0]
        out = np.empty(n)
        pp = np.empty((nb, 2))
        for t in range(n):
            _points1(kind, q[t], lengths, base, ball_link, ball_frac, pp)
            m = 1e300
            for b in range(nb):
                v = _sdf1(values, ox, oy, cell, pp[b, 0], pp[b, 1]) - radii[b]
                if v < m:
                    m = v
            out[t] = m
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    waypoint_terms = waypoint_terms_nb
    obstacle_value_grad = obstacle_value_grad_nb
    ball_clearance = ball_clearance_nb
else:
    waypoint_terms = waypoint_terms_np
    obstacle_value_grad = obstacle_value_grad_np
    ball_clearance = ball_clearance_np
