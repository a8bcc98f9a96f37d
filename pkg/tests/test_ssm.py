import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sr2 import ssm


def _instance(seed, d=None, m=None, T=None):
    rng = np.random.default_rng(seed)
    d = d or int(rng.integers(2, 7))
    m = m or int(rng.integers(1, d))
    T = T or int(rng.integers(1, 51))
    params = ssm.random_params(d, m, rng)
    _, x = ssm.simulate(params, T, seed)
    return params, x


def _scalar(x=2.0):
    one = np.eye(1)
    return ssm.SSMParams(A=one, C=one, Q=one, R=one, P0=one, mu0=np.zeros(1)), np.array([[x]])


def test_params_validation():
    with pytest.raises(ValueError):
        ssm.SSMParams(A=np.eye(2), C=np.eye(2)[:1], Q=np.eye(3), R=np.eye(1), P0=np.eye(2), mu0=np.zeros(2))
    p = ssm.SSMParams(A=np.eye(2), C=np.eye(2)[:1], Q=-np.eye(2), R=np.eye(1), P0=np.eye(2), mu0=np.zeros(2))
    with pytest.raises(ssm.ConditioningError):
        p.check()
    full = ssm.SSMParams(A=np.eye(2), C=np.eye(2), Q=np.eye(2), R=np.eye(2), P0=np.eye(2), mu0=np.zeros(2))
    with pytest.raises(ValueError):
        full.check()
    full.check(require_underdetermined=False)


def test_simulate_noiseless_and_deterministic():
    params, _ = _instance(0, d=3, m=1)
    quiet = ssm.SSMParams(params.A, params.C, np.zeros((3, 3)), np.zeros((1, 1)), np.zeros((3, 3)), params.mu0)
    z, x = ssm.simulate(quiet, 6, 1)
    for t in range(6):
        np.testing.assert_allclose(z[t], np.linalg.matrix_power(params.A, t) @ params.mu0, atol=1e-12)
        np.testing.assert_allclose(x[t], params.C @ z[t], atol=1e-12)
    a, b = ssm.simulate(params, 5, 9), ssm.simulate(params, 5, 9)
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(ValueError):
        ssm.simulate(params, 0, 0)


def test_initial_state_covariance_monte_carlo():
    rng = np.random.default_rng(0)
    P0 = ssm.random_spd(2, rng)
    params = ssm.SSMParams(np.eye(2), np.ones((1, 2)), np.eye(2), np.eye(1), P0, np.array([1.0, -1.0]))
    n = 100_000
    ss = np.random.SeedSequence(5).spawn(n)
    draws = np.array([ssm.simulate(params, 1, s)[0][0] for s in ss])
    emp = np.cov(draws.T)
    # standard error of a sample covariance entry: sqrt((P_ii P_jj + P_ij^2) / n)
    se = np.sqrt((np.outer(np.diag(P0), np.diag(P0)) + P0 ** 2) / n)
    assert (np.abs(emp - P0) < 3 * se).all()
    assert (np.abs(draws.mean(0) - params.mu0) < 3 * np.sqrt(np.diag(P0) / n)).all()


def test_obs_only_reference_rank():
    params = ssm.SSMParams(A=np.eye(2), C=np.array([[1.0, 0.0]]), Q=np.eye(2), R=np.eye(1), P0=np.eye(2),
                           mu0=np.zeros(2))
    B, _, rep = ssm.obs_only_normal_system(params, np.ones((3, 1)))
    assert B.shape == (6, 6) and rep.rank == 3 and rep.deficient


def test_obs_only_identity_case():
    params = ssm.SSMParams(A=np.eye(3), C=np.eye(3), Q=np.eye(3), R=np.eye(3), P0=np.eye(3), mu0=np.zeros(3))
    B, h, rep = ssm.obs_only_normal_system(params, np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(B, np.eye(6))
    assert not rep.deficient


@pytest.mark.parametrize("seed", range(20))
def test_random_underdetermined_b_is_singular(seed):
    params, x = _instance(seed)
    _, _, rep = ssm.obs_only_normal_system(params, x)
    assert rep.sigma_min < 1e-10 * rep.sigma_max
    assert rep.rank <= params.m * x.shape[0] < params.d * x.shape[0]


def test_t1_collapse_and_scalar_posterior():
    params, x = _instance(3, T=1)
    sys_ = ssm.build_map_system(params, x)
    Ri, P0i = np.linalg.inv(params.R), np.linalg.inv(params.P0)
    np.testing.assert_allclose(sys_.H, P0i + params.C.T @ Ri @ params.C, rtol=1e-12)
    np.testing.assert_allclose(sys_.h, P0i @ params.mu0 + params.C.T @ Ri @ x[0], rtol=1e-12)
    p1, x1 = _scalar(2.0)
    assert ssm.solve_map(ssm.build_map_system(p1, x1))[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert ssm.rts_smoother(p1, x1)[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_dynamic_prior_blocks():
    params, _ = _instance(4, d=3, m=2)
    D, h_init = ssm.dynamic_prior(params, 3)
    Qi, P0i, A = np.linalg.inv(params.Q), np.linalg.inv(params.P0), params.A
    blk = lambda i, j: D[3 * i:3 * i + 3, 3 * j:3 * j + 3]  # noqa: E731
    np.testing.assert_allclose(blk(0, 0), P0i + A.T @ Qi @ A)
    np.testing.assert_allclose(blk(1, 1), Qi + A.T @ Qi @ A)
    np.testing.assert_allclose(blk(2, 2), Qi)
    np.testing.assert_allclose(blk(0, 1), -A.T @ Qi)
    np.testing.assert_allclose(blk(2, 1), -Qi @ A)
    np.testing.assert_array_equal(blk(0, 2), 0)
    np.testing.assert_allclose(h_init[:3], P0i @ params.mu0)
    assert not h_init[3:].any()


@pytest.mark.parametrize("seed", range(25))
def test_map_equals_smoother_and_dense_solve(seed):
    params, x = _instance(100 + seed)
    system = ssm.build_map_system(params, x)
    assert np.allclose(system.H, system.H.T, atol=1e-12)
    assert ssm.is_positive_definite(system.H)
    z = ssm.solve_map(system)
    assert np.abs(z - ssm.rts_smoother(params, x)).max() < 1e-8
    dense = np.linalg.solve(system.H, system.h).reshape(z.shape)
    assert np.abs(z - dense).max() < 1e-9
    assert np.linalg.norm(system.H @ z.reshape(-1) - system.h) <= 1e-9 * np.linalg.norm(system.h)


def test_objective_minimum_against_perturbations():
    params, x = _instance(7, T=10)
    system = ssm.build_map_system(params, x)
    z = ssm.solve_map(system)
    j0 = system.objective(z)
    rng = np.random.default_rng(0)
    for _ in range(100):
        u = rng.standard_normal(z.shape)
        for eps in (1e-3, -1e-3, 1e-2, -1e-2):
            assert j0 <= system.objective(z + eps * u)


def test_non_pd_system_raises():
    params, x = _instance(8, T=4)
    system = ssm.build_map_system(params, x)
    system.diag[1] = -np.eye(params.d)
    with pytest.raises(ssm.ConditioningError):
        ssm.solve_map(system)


def test_zero_observation_returns_prior_trajectory():
    params, _ = _instance(9, d=3, m=1)
    blind = ssm.SSMParams(params.A, np.zeros((1, 3)), params.Q, params.R, params.P0, params.mu0)
    T = 6
    x = np.random.default_rng(0).normal(size=(T, 1))
    expected = np.array([np.linalg.matrix_power(params.A, t) @ params.mu0 for t in range(T)])
    np.testing.assert_allclose(ssm.rts_smoother(blind, x), expected, atol=1e-12)
    np.testing.assert_allclose(ssm.solve_map(ssm.build_map_system(blind, x)), expected, atol=1e-10)


def test_noiseless_map_beats_min_norm():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        d, m, T = 4, 2, 20
        base = ssm.random_params(d, m, rng)
        quiet = ssm.SSMParams(base.A, base.C, np.zeros((d, d)), np.zeros((m, m)), np.zeros((d, d)), base.mu0)
        z_true, x = ssm.simulate(quiet, T, seed)
        model = ssm.SSMParams(base.A, base.C, 1e-4 * np.eye(d), 1e-6 * np.eye(m), 1e-4 * np.eye(d), base.mu0)
        z_map = ssm.solve_map(ssm.build_map_system(model, x))
        z_obs = ssm.min_norm_obs_only(model, x)
        mse_map = ((z_map - z_true) ** 2).mean()
        assert mse_map <= ((z_obs - z_true) ** 2).mean()
        assert mse_map < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(1, 30), st.integers(0, 2 ** 32 - 1))
def test_map_smoother_property(d, T, seed):
    rng = np.random.default_rng(seed)
    params = ssm.random_params(d, int(rng.integers(1, d)), rng)
    _, x = ssm.simulate(params, T, seed)
    assert np.abs(ssm.solve_map(ssm.build_map_system(params, x)) - ssm.rts_smoother(params, x)).max() < 1e-8


def test_verify_report():
    checks = ssm.verify(20, seed=1)
    assert len(checks) == 20 and all(c.ok for c in checks)
    assert all(c.m < c.d and c.T <= 50 and c.d <= 6 for c in checks)
