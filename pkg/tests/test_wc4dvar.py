import numpy as np
import pytest

from gnda.blocklinalg import residual
from gnda.models import linear_test, lorenz63
from gnda.wc4dvar import (LMConfig, LMFlag, WCConfig, lm_minimize, lm_step, wc_cost, wc_gradient,
                          wc_residual)
from gnda.window import NOISE, ObservationOperator, SeededRng, generate_truth, observe


@pytest.fixture
def l63():
    m = lorenz63()
    tr = generate_truth(m, np.array([1.0, 3.0, 20.0]), 60)
    H = ObservationOperator.regular(3, 60, 10, [0])
    y = observe(tr, H, 0.1, SeededRng(1).generator(NOISE))
    return m, tr, H, y


def test_residual_zero_at_truth(l63):
    m, tr, H, _ = l63
    y = H.apply_H(tr)
    assert not np.any(wc_residual(m, tr, y, H, WCConfig(0.3, 7.0)))


def test_unit_weights(l63):
    m, tr, H, y = l63
    u = tr + np.random.default_rng(0).standard_normal(tr.shape)
    r = wc_residual(m, u, y, H, WCConfig())
    expected = np.sum(residual(m, u) ** 2) + np.sum((y.values - H.apply_H(u)) ** 2)
    assert r @ r == pytest.approx(expected, rel=1e-12)


def test_residual_matches_loop(l63):
    m, tr, H, y = l63
    u = tr + np.random.default_rng(1).standard_normal(tr.shape)
    cfg = WCConfig(0.04, 2.5)
    obs, pos = [], 0
    for t, sel in zip(H.obs_times, H.selectors):
        for comp in sel:
            obs.append((y.values[pos] - u[t, comp]) / np.sqrt(0.04))
            pos += 1
    mod = [(u[j + 1] - m.step(u[j])) / np.sqrt(2.5) for j in range(60)]
    np.testing.assert_array_equal(wc_residual(m, u, y, H, cfg),
                                  np.concatenate([obs, np.ravel(mod)]))


def test_gradient_matches_fd(l63):
    m, tr, H, y = l63
    cfg = WCConfig(0.5, 2.0)
    rng = np.random.default_rng(2)
    u = tr + 0.1 * rng.standard_normal(tr.shape)
    d = rng.standard_normal(tr.shape)
    h = 1e-6
    fd = (wc_cost(m, u + h * d, y, H, cfg) - wc_cost(m, u - h * d, y, H, cfg)) / (2 * h)
    g = wc_gradient(m, u, y, H, cfg)
    assert np.sum(g * d) == pytest.approx(fd, rel=1e-6)


def test_linear_problem_reaches_least_squares():
    M = np.array([[0.8, 0.3], [-0.2, 0.9]])
    m = linear_test(M)
    N = 8
    tr = generate_truth(m, np.array([1.0, 2.0]), N)
    H = ObservationOperator.regular(2, N, 2, [0])
    y = H.apply_H(tr) + 0.05 * np.random.default_rng(3).standard_normal(H.size)
    cfg = WCConfig(0.01, 1.0)
    res = lm_minimize(m, np.zeros_like(tr), y, H, cfg)
    assert res.flag in (LMFlag.GRAD_TOL, LMFlag.STEP_TOL)
    assert np.linalg.norm(wc_gradient(m, res.state, y, H, cfg)) <= 1e-8
    # dense oracle: stacked weighted linear least squares
    n = 2
    Jd = np.zeros((n * N, n * (N + 1)))
    for j in range(N):
        Jd[j * n:(j + 1) * n, j * n:(j + 1) * n] = -M
        Jd[j * n:(j + 1) * n, (j + 1) * n:(j + 2) * n] = np.eye(n)
    A = np.vstack([H.dense() / 0.1, Jd])
    b = np.concatenate([y / 0.1, np.zeros(n * N)])
    u_star = np.linalg.lstsq(A, b, rcond=None)[0]
    np.testing.assert_allclose(res.state.ravel(), u_star, atol=1e-8)


def test_accepted_costs_decrease(l63):
    m, tr, H, y = l63
    u0 = tr + np.random.default_rng(4).standard_normal(tr.shape)
    res = lm_minimize(m, u0, y, H, WCConfig(0.01, 1.0))
    costs = res.costs
    assert all(b < a for a, b in zip(costs, costs[1:]))
    assert res.log[0].cost == pytest.approx(wc_cost(m, u0, y, H, WCConfig(0.01, 1.0)))


def test_large_damping_follows_gradient(l63):
    m, tr, H, y = l63
    cfg = WCConfig(0.01, 1.0)
    u = tr + np.random.default_rng(5).standard_normal(tr.shape)
    d = lm_step(m, u, y, H, cfg, 1e8).ravel()
    g = wc_gradient(m, u, y, H, cfg).ravel()
    angle = np.degrees(np.arccos(np.clip(d @ g / np.linalg.norm(d) / np.linalg.norm(g), -1, 1)))
    assert angle <= 1.0


def test_weight_scaling_invariance(l63):
    m, tr, H, y = l63
    u0 = tr + 0.5 * np.random.default_rng(6).standard_normal(tr.shape)
    # damping is absolute, so it is scaled with the weights to keep the path fixed
    a = lm_minimize(m, u0, y, H, WCConfig(0.01, 1.0, LMConfig(grad_tol=1e-10))).state
    b = lm_minimize(m, u0, y, H, WCConfig(0.04, 4.0, LMConfig(lambda0=2.5e-4, grad_tol=2.5e-11))).state
    assert np.linalg.norm(a - b) <= 1e-8


def test_max_iter_flag(l63):
    m, tr, H, y = l63
    u0 = tr + np.random.default_rng(7).standard_normal(tr.shape)
    res = lm_minimize(m, u0, y, H, WCConfig(0.01, 1.0, LMConfig(max_iter=1)))
    assert res.flag is LMFlag.MAX_ITER
    assert len(res.log) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        WCConfig(0.0, 1.0)
    with pytest.raises(ValueError):
        LMConfig(up_factor=0)
    assert WCConfig.for_noise(0.1).r_var == pytest.approx(0.01)
    assert WCConfig.for_noise(0.0).r_var == 1.0
