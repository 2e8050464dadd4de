import numpy as np
import pytest

from gnda.blocklinalg import residual
from gnda.gauss_newton import GNConfig, gn_step, run
from gnda.models import linear_test, lorenz63
from gnda.params import (ParamConfig, ParamTermination, RankDeficient, affine_bounds,
                         param_jacobian, param_update, run_joint, state_update)
from gnda.window import (BACKGROUND, NOISE, TRUTH, ObservationOperator, SeededRng,
                         generate_truth, make_background, observe, random_initial_state)


def l63_data(seed, N=300, gamma=0.0, sigma_b=0.005):
    m = lorenz63()
    r = SeededRng(seed)
    tr = generate_truth(m, random_initial_state(m, r.generator(TRUTH)), N)
    H = ObservationOperator.regular(3, N, 10, [0, 1])
    y = observe(tr, H, gamma, r.generator(NOISE))
    ub = make_background(tr, rng=r.generator(BACKGROUND), sigma=sigma_b)
    return m, tr, H, y, ub


def test_state_update_fixed_point_and_q0():
    m, tr, H, y, ub = l63_data(0)
    np.testing.assert_allclose(state_update(m, tr, [10.0], y, H, 0.01), tr, atol=1e-10)
    np.testing.assert_array_equal(state_update(m, ub, [], y, H, 0.01), gn_step(m, ub, y, H, 0.01))


def test_state_update_uses_theta():
    m, tr, H, y, ub = l63_data(1)
    np.testing.assert_array_equal(state_update(m, ub, [7.0], y, H, 0.01),
                                  gn_step(m.with_params((7.0, 28.0, 8 / 3)), ub, y, H, 0.01))


def test_param_update_scalar_formula():
    m, tr, H, y, ub = l63_data(2)
    u = tr + 0.01 * np.random.default_rng(0).standard_normal(tr.shape)
    theta = 6.0
    mt = m.with_params((theta, 28.0, 8 / 3))
    a = -m.step_param_derivative(u[:-1], "sigma").ravel()
    r = residual(mt, u).ravel()
    new = param_update(m, u, [theta], ["sigma"])
    assert new[0] == pytest.approx(theta - a @ r / (a @ a), rel=1e-12)
    # least-squares optimality: residual orthogonal to the sensitivity column
    r_new = residual(m.with_params((new[0], 28.0, 8 / 3)), u).ravel()
    assert abs(a @ r_new) <= 1e-10 * np.linalg.norm(a) * np.linalg.norm(r)


def test_param_update_keeps_optimal_theta():
    m, tr, *_ = l63_data(3)
    assert param_update(m, tr, [10.0], ["sigma"])[0] == pytest.approx(10.0, abs=1e-10)


def test_param_update_rank_deficient():
    m = lorenz63()
    with pytest.raises(RankDeficient, match="sigma"):
        param_update(m, np.ones((5, 3)), [10.0], ["sigma"])


def test_param_jacobian_shape():
    m = lorenz63()
    G = param_jacobian(m, np.ones((4, 3)), (0, 1, 2))
    assert G.shape == (9, 3)


def test_run_joint_q0_matches_gn_run():
    m, tr, H, y, ub = l63_data(4)
    cfg = ParamConfig((), estimate=(), gn_inner=GNConfig(alpha=0.01, monitor=False))
    rec = run_joint(m, cfg, y, H, ub, tr)
    ref = run(m, cfg.gn_inner, y, H, ub, tr)
    assert rec.gn_record.records == ref.records
    assert rec.state_err_history == [r.err_total for r in ref.records]


def test_run_joint_from_true_theta_stays():
    m, tr, H, y, _ = l63_data(5)
    rec = run_joint(m, ParamConfig((10.0,)), y, H, tr, tr, [10.0])
    assert np.abs(rec.theta_history - 10.0).max() <= 1e-8
    assert rec.termination is ParamTermination.PARAM_TOL


def test_run_joint_recovers_sigma():
    m, tr, H, y, ub = l63_data(6)
    rec = run_joint(m, ParamConfig((5.0,)), y, H, ub, tr, [10.0])
    assert rec.termination is ParamTermination.PARAM_TOL
    assert abs(rec.theta[0] - 10.0) < 0.1
    assert len(rec.state_err_history) == len(rec.theta_history)
    assert rec.bound_b is None  # sigma sensitivity depends on the state


def test_run_joint_respects_max_outer():
    m, tr, H, y, ub = l63_data(7)
    rec = run_joint(m, ParamConfig((5.0,), param_tol=1e-12, max_outer=3), y, H, ub, tr)
    assert rec.outer_iterations == 3
    assert rec.termination is ParamTermination.MAX_OUTER


def test_affine_model_bound_diagnostics():
    M = np.array([[0.6, 0.1], [0.0, 0.5]])
    m = linear_test(M, forcing=[[1.0], [0.5]], theta=[2.0])
    N = 30
    tr = generate_truth(m, np.array([1.0, -1.0]), N)
    H = ObservationOperator(2, N, range(N + 1), [0])
    y = H.apply_H(tr)
    ub = tr + 0.1
    cfg = ParamConfig((0.5,), estimate=(0,), param_tol=1e-10, gn_inner=GNConfig(alpha=1.0, monitor=False), L3=1e3)
    rec = run_joint(m, cfg, y, H, ub, tr, [2.0])
    assert rec.theta[0] == pytest.approx(2.0, abs=1e-6)
    L0 = np.linalg.norm(_dense_jacobian(M, N), 2)
    assert rec.bound_b == pytest.approx(L0 / 1e3, rel=1e-6)
    b, sb, tb = affine_bounds(m, tr, (0,), rec.c, L3=1e3)
    assert sb == pytest.approx((b / 2) / (1 - b / rec.c))
    A = np.tile([-1.0, -0.5], N)[:, None]
    assert tb == pytest.approx(L0 * np.linalg.norm(np.linalg.pinv(A), 2) * sb, rel=1e-6)
    # without a Jacobian Lipschitz constant the diagnostic is omitted
    assert affine_bounds(m, tr, (0,), rec.c) == (None, None, None)


def _dense_jacobian(M, N):
    n = M.shape[0]
    D = np.zeros((n * N, n * (N + 1)))
    for j in range(N):
        D[j * n:(j + 1) * n, j * n:(j + 1) * n] = -M
        D[j * n:(j + 1) * n, (j + 1) * n:(j + 2) * n] = np.eye(n)
    return D


def test_config_validation():
    with pytest.raises(ValueError):
        ParamConfig((5.0, 1.0), estimate=("sigma",))
    with pytest.raises(ValueError):
        ParamConfig((5.0,), param_tol=0)
    assert ParamConfig(5.0, estimate="rho").estimate == ("rho",)
