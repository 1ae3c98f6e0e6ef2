import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iagpsto.trajgp import (ConditioningSpec, GPModel, LtvSdeModel, NumericalError, ParameterError, build_prior,
                            condition, gp_cost, gp_cost_gradient, interpolate_states, selector, upsample)


def random_spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + n * np.eye(n))


def brute_condition(mu, k, c, y, kn):
    """Joint normal of (theta, y = C theta + e), then the textbook Schur-complement conditional."""
    n, m = mu.size, y.size
    joint = np.zeros((n + m, n + m))
    joint[:n, :n] = k
    joint[:n, n:] = k @ c.T
    joint[n:, :n] = c @ k
    joint[n:, n:] = c @ k @ c.T + kn
    s_yy_inv = np.linalg.inv(joint[n:, n:])
    mean = mu + joint[:n, n:] @ s_yy_inv @ (y - c @ mu)
    cov = joint[:n, :n] - joint[:n, n:] @ s_yy_inv @ joint[n:, :n]
    return mean, cov


# --- model -------------------------------------------------------------------

def test_transition_zero_elapsed_is_identity():
    m = LtvSdeModel(3)
    for t in (0.0, 1.7, 12.0):
        assert np.array_equal(m.transition(t, t), np.eye(6))


def test_process_noise_unit_interval():
    m = LtvSdeModel(2, dt=1.0)
    expect = np.kron(np.array([[1 / 3, 1 / 2], [1 / 2, 1.0]]), np.eye(2))
    assert np.allclose(m.process_noise(), expect, atol=0, rtol=1e-15)


@pytest.mark.parametrize("kw", [dict(state_dim=0), dict(state_dim=2, dt=0.0),
                                dict(state_dim=2, qc=np.array([[1.0, 2.0], [2.0, 1.0]]))])
def test_invalid_model(kw):
    with pytest.raises(ParameterError):
        LtvSdeModel(**kw)


def test_non_pd_k0_rejected():
    with pytest.raises(ParameterError):
        build_prior(LtvSdeModel(2), 3, [0, 0], [1, 1], k0=-np.eye(4))


def test_zero_start_goal_gives_zero_mean():
    gp = build_prior(LtvSdeModel(2), 3, [0.0, 0.0], [0.0, 0.0])
    assert np.allclose(gp.mean, 0.0, atol=1e-12)


def test_prior_interpolates_start_to_goal():
    gp = build_prior(LtvSdeModel(2), 5, [0.0, 0.0], [1.0, 2.0])
    pos = gp.states()[:, :2]
    assert np.allclose(pos, np.linspace([0, 0], [1, 2], 5), atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.floats(-2, 2), st.floats(-2, 2))
def test_same_start_goal_constant_position(n, a, b):
    gp = build_prior(LtvSdeModel(2), n, [a, b], [a, b])
    pos = gp.states()[:, :2]
    assert np.allclose(pos, [a, b], atol=1e-9)


# --- conditioning ------------------------------------------------------------

def test_exact_full_observation():
    rng = np.random.default_rng(0)
    k = random_spd(rng, 4)
    gp = GPModel(rng.standard_normal(4), k)
    y = rng.standard_normal(4)
    post = condition(gp, ConditioningSpec(np.eye(4), y, np.zeros((4, 4))))
    assert np.allclose(post.mean, y, atol=1e-12)
    assert np.allclose(post.cov, 0.0, atol=1e-10)


def test_uninformative_observation_leaves_prior():
    rng = np.random.default_rng(1)
    k = random_spd(rng, 4)
    mu = rng.standard_normal(4)
    post = condition(GPModel(mu, k), ConditioningSpec(selector(4, [0, 2]), [5.0, -3.0], 1e12 * np.eye(2)))
    assert np.allclose(post.mean, mu, rtol=1e-6, atol=1e-6 * np.abs(mu).max())
    assert np.allclose(post.cov, k, rtol=1e-6, atol=1e-6 * np.abs(k).max())


def test_two_of_four_matches_oracle():
    rng = np.random.default_rng(2)
    k = random_spd(rng, 4)
    mu = rng.standard_normal(4)
    c, y, kn = selector(4, [1, 3]), rng.standard_normal(2), 0.1 * np.eye(2)
    post = condition(GPModel(mu, k), ConditioningSpec(c, y, kn))
    m_ref, k_ref = brute_condition(mu, k, c, y, kn)
    assert np.allclose(post.mean, m_ref, atol=1e-10)
    assert np.allclose(post.cov, k_ref, atol=1e-10)


def test_singular_innovation_reports_condition_number():
    k = np.diag([1.0, 0.0])
    gp = GPModel(np.zeros(2), k)
    with pytest.raises(NumericalError, match="condition number"):
        condition(gp, ConditioningSpec(selector(2, [1]), [1.0], np.zeros((1, 1))))


def test_spec_shape_mismatch():
    with pytest.raises(ParameterError):
        ConditioningSpec(np.eye(2), [1.0, 2.0, 3.0], np.eye(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12), st.data())
def test_posterior_psd_and_idempotent(seed, n, data):
    rng = np.random.default_rng(seed)
    m = data.draw(st.integers(1, n))
    k = random_spd(rng, n)
    mu = rng.standard_normal(n)
    idx = rng.choice(n, m, replace=False)
    c = selector(n, idx)
    y = rng.standard_normal(m)
    noise = np.diag(rng.uniform(0.0, 1.0, m))
    post = condition(GPModel(mu, k), ConditioningSpec(c, y, noise))
    assert np.allclose(post.cov, post.cov.T)
    assert np.linalg.eigvalsh(post.cov).min() >= -1e-10 * max(1.0, np.abs(k).max())
    # exact observations: a second pass changes nothing
    exact = ConditioningSpec(c, y, np.zeros((m, m)))
    once = condition(GPModel(mu, k), exact)
    try:
        twice = condition(once, exact)
    except NumericalError:
        return  # the observed block is already exactly zero-variance
    assert np.allclose(twice.mean, once.mean, atol=1e-10)
    assert np.allclose(twice.cov, once.cov, atol=1e-10)


# --- cost --------------------------------------------------------------------

def test_cost_zero_at_mean():
    gp = build_prior(LtvSdeModel(2), 4, [0, 0], [1, 1])
    assert gp_cost(gp, gp.mean) == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(gp_cost_gradient(gp, gp.mean), 0.0)


def test_cost_identity_cov():
    gp = GPModel(np.zeros(2), np.eye(2))
    assert gp_cost(gp, [3.0, 4.0]) == pytest.approx(12.5, rel=1e-15)


def test_gradient_scaled_identity():
    gp = GPModel(np.zeros(3), 2.0 * np.eye(3))
    assert np.allclose(gp_cost_gradient(gp, [1.0, 0.0, 0.0]), [0.5, 0.0, 0.0], atol=1e-15)


def test_cost_matches_quadratic_form():
    rng = np.random.default_rng(3)
    k = random_spd(rng, 6)
    mu, th = rng.standard_normal(6), rng.standard_normal(6)
    r = th - mu
    assert gp_cost(GPModel(mu, k), th) == pytest.approx(0.5 * r @ np.linalg.solve(k, r), rel=1e-12)


def test_cost_length_mismatch():
    with pytest.raises(ParameterError):
        gp_cost(GPModel(np.zeros(3), np.eye(3)), np.zeros(4))


def test_singular_cov_uses_pinv_with_flag():
    gp = GPModel(np.zeros(2), np.diag([1.0, 0.0]))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        c = gp_cost(gp, [2.0, 5.0])
    assert gp.pinv_used and any("pseudo-inverse" in str(x.message) for x in w)
    assert c == pytest.approx(2.0)


def test_gradient_matches_fd_on_random_instances():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        gp = GPModel(rng.standard_normal(n), random_spd(rng, n))
        th = rng.standard_normal(n)
        g = gp_cost_gradient(gp, th)
        h = 1e-5
        fd = np.array([(gp_cost(gp, th + h * e) - gp_cost(gp, th - h * e)) / (2 * h) for e in np.eye(n)])
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-12)


# --- interpolation -----------------------------------------------------------

def joint_cv_cov(model, times, k0):
    """Covariance of states at ``times`` for the constant-velocity SDE started at t = 0 with N(0, k0)."""
    s = model.size
    n = len(times)
    out = np.zeros((n * s, n * s))
    for i, t in enumerate(times):
        for j, u in enumerate(times):
            hi, lo = (t, u) if t >= u else (u, t)
            c = model.transition(hi, 0.0) @ k0 @ model.transition(lo, 0.0).T
            c = c + model.transition(hi, lo) @ model.process_noise(lo) if lo > 0 else c
            out[i * s:(i + 1) * s, j * s:(j + 1) * s] = c if t >= u else c.T
    return out


def test_interpolate_boundary_returns_end_state():
    gp = build_prior(LtvSdeModel(2), 3, [0, 0], [1, 1])
    st0 = gp.states()
    assert np.allclose(interpolate_states(gp, 0, 1, [0.0])[0], st0[0], atol=1e-12)
    assert np.allclose(interpolate_states(gp, 0, 1, [1.0])[0], st0[1], atol=1e-10)


def test_interpolate_midpoint_of_positions():
    gp = build_prior(LtvSdeModel(2), 2, [0.2, -0.4], [1.0, 0.6])
    mid = interpolate_states(gp, 0, 1, [0.5])[0]
    assert np.allclose(mid[:2], [0.6, 0.1], atol=1e-9)


def test_eighths_match_full_conditioning():
    rng = np.random.default_rng(5)
    model = LtvSdeModel(2, qc=np.array([[1.0, 0.3], [0.3, 0.5]]))
    gp = build_prior(model, 3, [0, 0], [1, 1], times=np.array([1.0, 3.5, 6.0]))
    states = rng.standard_normal((3, 4))
    taus = np.arange(1, 8) / 8
    got = interpolate_states(gp, 0, 1, taus, states=states)
    t_a, t_b = 1.0, 3.5
    for tau, g in zip(taus, got):
        t = t_a + tau * (t_b - t_a)
        cov = joint_cv_cov(model, [t_a, t, t_b], np.eye(4))
        obs = np.r_[0:4, 8:12]
        k_oo = cov[np.ix_(obs, obs)]
        k_to = cov[4:8][:, obs]
        ref = k_to @ np.linalg.solve(k_oo, np.r_[states[0], states[1]])
        assert np.allclose(g, ref, atol=1e-10)


def test_upsample_matches_pairwise_interpolation():
    model = LtvSdeModel(3)
    rng = np.random.default_rng(6)
    times = np.cumsum(np.r_[0.0, rng.uniform(0.3, 5.0, 5)])
    states = rng.standard_normal((6, 6))
    gp = GPModel(states.ravel(), np.eye(36), model, times)
    dt, dx = upsample(model, times, states, 8)
    assert dx.shape == (41, 6) and np.allclose(dx[::8], states)
    for i in range(5):
        ref = interpolate_states(gp, i, i + 1, np.arange(1, 8) / 8, states=states)
        assert np.allclose(dx[8 * i + 1:8 * i + 8], ref, atol=1e-10)
        assert np.allclose(dt[8 * i:8 * i + 9], np.linspace(times[i], times[i + 1], 9))
