import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iagpsto import _kernels as K
from iagpsto import world as W
from iagpsto.trajgp import LtvSdeModel, ParameterError, build_prior

EPS = 0.05


def disc_world(center=(0.5, 0.5), r=0.2, robot=None, cell=0.01):
    grid = W.SdfGrid.from_primitives([W.Disc(np.array(center), r)], [0, 0], [1, 1], cell)
    robot = robot or W.RobotModel.point(0.02, [0, 0], [1, 1])
    return W.World(robot, grid, W.CollisionParams(EPS, 1e-2))


def point_traj(pos, vel=None):
    pos = np.asarray(pos, dtype=float)
    vel = np.zeros_like(pos) if vel is None else vel
    return np.hstack([pos, vel]).ravel()


def c_ref(d, eps=EPS):
    if d < 0:
        return eps / 2 - d
    if d <= eps:
        return (eps - d) ** 3 / eps**2 - (eps - d) ** 4 / (2 * eps**3)
    return 0.0


# --- signed distance ---------------------------------------------------------

def test_node_query_is_exact():
    vals = np.arange(12, dtype=float).reshape(3, 4) * 0.1 - 0.3
    g = W.SdfGrid(np.array([1.0, -1.0]), 0.5, vals)
    for i in range(3):
        for j in range(4):
            assert W.signed_distance(g, [1.0 + 0.5 * i, -1.0 + 0.5 * j]) == vals[i, j]


def test_midpoint_interpolates():
    g = W.SdfGrid(np.zeros(2), 1.0, np.array([[0.1, 0.1], [0.3, 0.3]]))
    assert W.signed_distance(g, [0.5, 0.0]) == pytest.approx(0.2, abs=1e-15)


def test_outside_query_warns_and_adds_gap():
    g = W.SdfGrid(np.zeros(2), 1.0, np.full((2, 2), 0.5))
    with pytest.warns(RuntimeWarning, match="outside"):
        d = W.signed_distance(g, [3.0, 0.5])
    assert d == pytest.approx(0.5 + 2.0)


def test_empty_grid_rejected():
    with pytest.raises(ParameterError):
        W.SdfGrid(np.zeros(2), 0.1, np.zeros((1, 5)))


def test_disc_sdf_close_to_analytic():
    w = disc_world()
    rng = np.random.default_rng(0)
    p = rng.uniform(0, 1, (500, 2))
    ref = np.linalg.norm(p - 0.5, axis=1) - 0.2
    assert np.max(np.abs(W.signed_distance(w.grid, p) - ref)) <= 1.5 * w.grid.cell


# --- collision cost ----------------------------------------------------------

def test_collision_cost_values():
    assert W.collision_cost(EPS, EPS) == 0.0
    assert W.collision_cost(0.0, EPS) == pytest.approx(EPS / 2, rel=1e-15)
    assert W.collision_cost(-0.1, 0.05) == pytest.approx(0.125, rel=1e-15)
    # the polynomial piece alone also gives eps/2 at zero distance
    assert EPS**3 / EPS**2 - EPS**4 / (2 * EPS**3) == pytest.approx(EPS / 2)


def test_collision_cost_monotone_and_nonnegative():
    d = np.arange(-0.2, 0.2, 1e-3)
    c = W.collision_cost(d, EPS)
    assert np.all(c >= 0) and np.all(np.diff(c) <= 1e-15)


def one_sided(f, x0, h, side):
    """Value, first and second derivative limits at x0 from one side (second-order stencils)."""
    v = [f(x0 + side * k * h) for k in range(4)]
    d1 = side * (-3 * v[0] + 4 * v[1] - v[2]) / (2 * h)
    d2 = (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / h**2
    return np.array([v[0], d1, d2])


@pytest.mark.parametrize("junction", [0.0, EPS])
def test_collision_cost_c2_at_junctions(junction):
    f = lambda x: float(W.collision_cost(x, EPS))
    left = one_sided(f, junction, 1e-4, -1)
    right = one_sided(f, junction, 1e-4, +1)
    assert np.all(np.abs(left - right) < 1e-4 / EPS)


# --- obstacle cost -----------------------------------------------------------

def test_clear_trajectory_costs_nothing():
    w = disc_world()
    th = point_traj([[0.1, 0.1], [0.2, 0.1], [0.3, 0.1]])
    assert W.obstacle_cost(th, w.robot, w.grid, w.params, np.ones(3), 4.0) == 0.0
    _, g = W.obstacle_value_grad(th, w.robot, w.grid, w.params, np.ones(3), 4.0)
    assert np.all(g == 0)


def test_static_trajectory_costs_nothing():
    w = disc_world()
    th = point_traj([[0.5, 0.5]] * 4)
    assert W.obstacle_cost(th, w.robot, w.grid, w.params, np.ones(4), 4.0) == 0.0


def test_three_waypoint_summation_oracle():
    w = disc_world()
    pos = np.array([[0.1, 0.45], [0.5, 0.5], [0.9, 0.55]])
    rho = np.array([0.3, 2.0, 1.5])
    dt = 4.0
    ref = 0.0
    for t in range(3):
        nxt = pos[t + 1] - pos[t] if t < 2 else pos[t] - pos[t - 1]
        d = W.signed_distance(w.grid, pos[t]) - 0.02
        ref += rho[t] * c_ref(d) * np.linalg.norm(nxt) / dt
    got = W.obstacle_cost(point_traj(pos), w.robot, w.grid, w.params, rho, dt)
    assert got == pytest.approx(ref, rel=1e-10, abs=1e-14)


def test_cost_linear_in_rho():
    w = disc_world()
    rng = np.random.default_rng(1)
    th = point_traj(rng.uniform(0.2, 0.8, (6, 2)))
    rho = rng.uniform(0.1, 3.0, 6)
    a = W.obstacle_cost(th, w.robot, w.grid, w.params, rho, 2.0)
    b = W.obstacle_cost(th, w.robot, w.grid, w.params, 2 * rho, 2.0)
    assert a >= 0 and b == pytest.approx(2 * a, rel=1e-14)


def test_rho_length_and_sign_checked():
    w = disc_world()
    th = point_traj([[0.1, 0.1], [0.2, 0.2], [0.3, 0.3]])
    with pytest.raises(ParameterError):
        W.obstacle_cost(th, w.robot, w.grid, w.params, np.ones(2), 1.0)
    with pytest.raises(ParameterError):
        W.obstacle_cost(th, w.robot, w.grid, w.params, np.array([1.0, 0.0, 1.0]), 1.0)


def test_gradient_matches_independent_fd():
    w = disc_world()
    rng = np.random.default_rng(2)
    for _ in range(10):
        pos = np.linspace([0.1, 0.4], [0.9, 0.6], 7) + 0.05 * rng.standard_normal((7, 2))
        th = point_traj(pos)
        rho = rng.uniform(0.5, 2.0, 7)
        _, g = W.obstacle_value_grad(th, w.robot, w.grid, w.params, rho, 3.0)
        g = g.reshape(7, 4)
        assert np.all(g[[0, -1]] == 0) and np.all(g[:, 2:] == 0)
        h = 1e-6
        fd = np.zeros((7, 2))
        for t in range(1, 6):
            for k in range(2):
                e = np.zeros((7, 4))
                e[t, k] = h
                fd[t, k] = (W.obstacle_cost(th + e.ravel(), w.robot, w.grid, w.params, rho, 3.0)
                            - W.obstacle_cost(th - e.ravel(), w.robot, w.grid, w.params, rho, 3.0)) / (2 * h)
        assert np.linalg.norm(g[:, :2] - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-12)


def test_descent_direction_points_outward():
    w = disc_world()
    # path tangent to the disc so a radial move leaves the speeds unchanged to first order
    mid = np.array([0.5, 0.5 - 0.2 - 0.02 - 0.01])
    pos = np.array([[0.1, mid[1]], mid, [0.9, mid[1]]])
    _, g = W.obstacle_value_grad(point_traj(pos), w.robot, w.grid, w.params, np.ones(3), 1.0)
    outward = (mid - 0.5) / np.linalg.norm(mid - 0.5)
    assert -g.reshape(3, 4)[1, :2] @ outward > 0


# --- limits ------------------------------------------------------------------

def test_limit_cost_values():
    arm = W.RobotModel.planar_arm([0.3, 0.3], lo=[-1.0, -1.0], hi=[1.0, 1.0])
    p = W.CollisionParams(EPS, 1e-2)
    inside = np.r_[0.2, -0.3, 0.0, 0.0]
    assert W.limit_cost(inside, arm, p) == 0.0
    at_max = np.r_[1.0, 0.0, 0.0, 0.0]
    assert W.limit_cost(at_max, arm, p) == pytest.approx(1e-2, rel=1e-12)


def test_limit_gradient_matches_fd_away_from_kinks():
    arm = W.RobotModel.planar_arm([0.3, 0.3, 0.2], lo=[-1.0] * 3, hi=[1.0] * 3)
    p = W.CollisionParams(EPS, 1e-2)
    rng = np.random.default_rng(3)
    for _ in range(50):
        th = rng.uniform(-1.5, 1.5, (4, 6))
        q = th[:, :3]
        kink = np.minimum(np.abs(q - (1.0 - 1e-2)), np.abs(q + (1.0 - 1e-2)))
        if kink.min() < 1e-4:
            continue
        th = th.ravel()
        g = W.limit_cost_gradient(th, arm, p)
        h = 1e-7
        fd = np.array([(W.limit_cost(th + h * e, arm, p) - W.limit_cost(th - h * e, arm, p)) / (2 * h)
                       for e in np.eye(th.size)])
        assert np.max(np.abs(g - fd)) < 1e-6


# --- kinematics --------------------------------------------------------------

def test_zero_angles_lie_on_x_axis():
    arm = W.RobotModel.planar_arm([0.4, 0.3, 0.2], balls_per_link=2, base=(0.1, 0.0))
    pts = W.forward_kinematics(arm, np.zeros(3))
    start = np.r_[0.0, 0.4, 0.7]
    ref_x = 0.1 + np.repeat(start, 2) + np.tile([0.25, 0.75], 3) * np.repeat([0.4, 0.3, 0.2], 2)
    assert np.allclose(pts[:, 0], ref_x) and np.allclose(pts[:, 1], 0.0)


def test_two_link_tip():
    arm = W.RobotModel.planar_arm([1.0, 1.0])
    tip = W.joint_positions(arm, [np.pi / 2, 0.0])[-1]
    assert np.allclose(tip, [0.0, 2.0], atol=1e-15)


def homogeneous_points(lengths, base, q, links, offs):
    def tf(theta, x):
        c, s = np.cos(theta), np.sin(theta)
        return np.array([[c, -s, x * c], [s, c, x * s], [0, 0, 1]])
    frames = []
    m = np.array([[1, 0, base[0]], [0, 1, base[1]], [0, 0, 1.0]])
    for i, l in enumerate(lengths):
        m = m @ tf(q[i], 0.0)
        frames.append(m.copy())
        m = m @ np.array([[1, 0, l], [0, 1, 0], [0, 0, 1.0]])
    return np.array([(frames[k] @ np.array([f * lengths[k], 0, 1]))[:2] for k, f in zip(links, offs)])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2 * np.pi, 2 * np.pi), min_size=3, max_size=3))
def test_fk_matches_homogeneous_products(q):
    arm = W.RobotModel.planar_arm([0.35, 0.3, 0.25], balls_per_link=3, base=(0.1, -0.2))
    ref = homogeneous_points(arm.link_lengths, arm.base, q, arm.ccb_links, arm.ccb_offsets)
    assert np.allclose(W.forward_kinematics(arm, np.array(q)), ref, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.integers(0, 2))
def test_fk_two_pi_periodic(q, j):
    arm = W.RobotModel.planar_arm([0.35, 0.3, 0.25])
    q = np.array(q)
    q2 = q.copy()
    q2[j] += 2 * np.pi
    assert np.allclose(W.joint_positions(arm, q)[-1], W.joint_positions(arm, q2)[-1], atol=1e-12)


# --- continuous safety -------------------------------------------------------

def _gp_for(pos, dt=4.0):
    n = len(pos)
    return build_prior(LtvSdeModel(2), n, pos[0], pos[-1], times=dt * np.arange(n))


def test_empty_world_is_safe():
    grid = W.SdfGrid(np.zeros(2), 0.1, np.full((11, 11), 5.0))
    robot = W.RobotModel.point(0.02, [0, 0], [1, 1])
    gp = _gp_for([[0.1, 0.1], [0.9, 0.9]])
    assert W.continuous_safe(gp.mean, gp, robot, grid, W.CollisionParams())


def test_thin_wall_between_waypoints_is_detected():
    wall = W.Box(np.array([0.5, 0.5]), np.array([0.01, 0.4]))
    grid = W.SdfGrid.from_primitives([wall], [0, 0], [1, 1], 0.005)
    robot = W.RobotModel.point(0.02, [0, 0], [1, 1])
    params = W.CollisionParams(0.02)
    pos = np.array([[0.1, 0.5], [0.3, 0.5], [0.7, 0.5], [0.9, 0.5]])
    gp = _gp_for(pos)
    th = gp.mean
    assert np.all(W.clearances(th, robot, grid) > params.eps)  # every support state is clear
    assert not W.continuous_safe(th, gp, robot, grid, params, 1e-4, 8)
    assert W.continuous_safe(th, gp, robot, grid, params, np.inf, 8)


def test_n_intervals_validated():
    gp = _gp_for([[0.1, 0.1], [0.9, 0.9]])
    w = disc_world()
    with pytest.raises(ParameterError):
        W.continuous_safe(gp.mean, gp, w.robot, w.grid, w.params, 1e-4, 0)


# --- backends ----------------------------------------------------------------

@pytest.mark.skipif(not K.HAS_NUMBA, reason="numba backend disabled")
@pytest.mark.parametrize("kind", ["point", "arm"])
def test_numba_and_numpy_backends_agree(kind):
    rng = np.random.default_rng(4)
    if kind == "point":
        w = disc_world()
        q = rng.uniform(0.2, 0.8, (9, 2))
    else:
        arm = W.RobotModel.planar_arm([0.35, 0.3, 0.25], radius=0.03)
        grid = W.SdfGrid.from_primitives([W.Disc(np.array([0.0, 0.5]), 0.1)], [-1, -1], [1, 1], 0.01)
        w = W.World(arm, grid)
        q = rng.uniform(-2, 2, (9, 3))
    kind_c, lengths, base, links, offs = w.robot.args()
    dts = rng.uniform(0.5, 4.0, 8)
    rho = rng.uniform(0.1, 2.0, 9)
    common = (kind_c, q, lengths, base, links, offs, w.robot.ccb_radii, *w.grid.args())
    assert np.allclose(K.waypoint_terms_np(*common, dts, EPS), K.waypoint_terms_nb(*common, dts, EPS),
                       rtol=1e-12, atol=1e-15)
    assert np.allclose(K.ball_clearance_np(*common), K.ball_clearance_nb(*common), rtol=1e-12, atol=1e-15)
    grad_args = (kind_c, q, rho, lengths, base, links, offs, w.robot.ccb_radii, *w.grid.args(), dts, EPS, 1e-6)
    v_np, g_np = K.obstacle_value_grad_np(*grad_args)
    v_nb, g_nb = K.obstacle_value_grad_nb(*grad_args)
    assert v_np == pytest.approx(v_nb, rel=1e-12, abs=1e-15)
    assert np.allclose(g_np, g_nb, rtol=1e-6, atol=1e-9)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, IAGPSTO_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "import iagpsto; print(iagpsto.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
