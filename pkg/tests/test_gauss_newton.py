import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnda.blocklinalg import IllPosed, assemble_normal, dense_opnorm_solve_Jt, jacobian
from gnda.gauss_newton import (GNConfig, NoAlphaFound, Termination, error_metrics,
                               find_alpha_noisefree, find_alpha_noisy, gn_step, run,
                               theoretical_bound)
from gnda.models import linear_test, lorenz63
from gnda.window import (BACKGROUND, NOISE, TRUTH, ObservationOperator, SeededRng,
                         generate_truth, initial_guess, make_background, observe,
                         random_initial_state)


def l63_problem(seed, N=500, gamma=0.0, sigma_b=0.005, comps=(0,)):
    m = lorenz63()
    r = SeededRng(seed)
    tr = generate_truth(m, random_initial_state(m, r.generator(TRUTH)), N)
    H = ObservationOperator.regular(3, N, 10, list(comps))
    y = observe(tr, H, gamma, r.generator(NOISE))
    ub = make_background(tr, rng=r.generator(BACKGROUND), sigma=sigma_b)
    return m, tr, H, y, ub


def test_truth_is_fixed_point():
    m, tr, H, y, _ = l63_problem(0, N=100)
    np.testing.assert_allclose(gn_step(m, tr, y, H, 0.01), tr, rtol=0, atol=1e-10)


def test_linear_one_step_matches_least_squares():
    rng = np.random.default_rng(1)
    M = np.array([[0.9, 0.2], [-0.1, 0.7]])
    m = linear_test(M)
    N = 6
    tr = generate_truth(m, np.array([1.0, -2.0]), N)
    H = ObservationOperator.regular(2, N, 3, [0])
    y = H.apply_H(tr) + 0.1 * rng.standard_normal(H.size)
    u0 = rng.standard_normal(tr.shape)
    alpha = 0.3
    # dense oracle: minimise ||G(u)||^2 + alpha ||y - H u||^2 with G(u) = J u
    Jd = jacobian(m, u0).to_dense()
    Hd = H.dense()
    lhs = Jd.T @ Jd + alpha * Hd.T @ Hd
    u_star = np.linalg.solve(lhs, alpha * Hd.T @ y)
    np.testing.assert_allclose(gn_step(m, u0, y, H, alpha).ravel(), u_star, atol=1e-10)


def test_linear_full_observation_recovers_truth():
    m = linear_test(n=3)
    tr = generate_truth(m, np.array([1.0, 2.0, 3.0]), 5)
    H = ObservationOperator(3, 5, range(6), [0, 1, 2])
    u1 = gn_step(m, np.zeros_like(tr), H.apply_H(tr), H, 0.5)
    assert np.linalg.norm(u1 - tr) <= 1e-10


def test_theoretical_bound():
    assert theoretical_bound(0.5, 2) == 2
    assert theoretical_bound(0.004, 10) == pytest.approx(0.0401606425702811, rel=1e-12)
    assert theoretical_bound(1e-12, 1) < 1e-11
    with pytest.raises(ValueError):
        theoretical_bound(1.0, 1)


def test_error_metrics_hand_example():
    m = linear_test(n=2)
    H = ObservationOperator(2, 1, [0], [0])
    truth = np.array([[1.0, 2.0], [0.5, 1.0]])
    u = np.array([[1.5, 2.0], [0.0, 3.0]])
    y = np.array([1.0])
    cost, e, eo, eu = error_metrics(m, u, truth, y, H, alpha=2.0)
    # G(u) = u1 - 0.5 u0 = (-0.75, 2.0); y - Hu = -0.5
    assert cost == pytest.approx(np.hypot(0.75, 2.0) + 2.0 * 0.5)
    assert e == pytest.approx(np.sqrt(0.25 + 0.25 + 4.0))
    assert eo == pytest.approx(0.5)
    assert eu == pytest.approx(np.sqrt(0.25 + 4.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_error_split_is_orthogonal(seed):
    rng = np.random.default_rng(seed)
    m = lorenz63()
    H = ObservationOperator(3, 4, range(5), [0, 2])
    tr, u = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    _, e, eo, eu = error_metrics(m, u, tr, H.apply_H(tr), H, 0.1)
    assert e ** 2 == pytest.approx(eo ** 2 + eu ** 2, rel=1e-12)
    cost, *zeros = error_metrics(m, tr, tr, H.apply_H(tr), H, 0.1)
    assert zeros == [0.0, 0.0, 0.0]


def test_noise_free_run_converges_quadratically():
    m, tr, H, y, ub = l63_problem(3)
    rec = run(m, GNConfig(), y, H, ub, tr)
    assert rec.termination is Termination.STEP_TOL
    errs = rec.column("err_total")
    c = rec.c
    assert errs[0] == pytest.approx(c)
    assert np.all(np.diff(errs) < 0)
    assert errs[-1] <= 1e-8
    floor = 64 * np.finfo(float).eps * np.linalg.norm(tr)
    for k, r in enumerate(rec.records[:-1]):
        assert r.cond1_holds
        assert errs[k + 1] <= 1.05 * errs[k] ** 2 / (2 * c) + floor
        assert errs[k] <= 0.5 ** (2 ** k - 1) * c + floor


def test_run_is_deterministic_and_truth_optional():
    m, tr, H, y, ub = l63_problem(4, N=200, gamma=0.01)
    cfg = GNConfig(alpha=0.01, c=1.0, max_iter=4)
    a = run(m, cfg, y, H, ub, tr)
    b = run(m, cfg, y, H, ub, tr)
    assert a.records == b.records
    np.testing.assert_array_equal(a.final_state, b.final_state)
    blind = run(m, cfg, y, H, ub)
    assert blind.records[0].err_total is None
    assert [r.cost for r in blind.records] == [r.cost for r in a.records]
    with pytest.raises(ValueError):
        run(m, GNConfig(alpha=0.01), y, H, ub)


def test_noisy_run_stops_at_max_iter():
    m, tr, H, y, ub = l63_problem(5, N=200, gamma=0.01)
    rec = run(m, GNConfig(alpha=0.01, monitor=False), y, H, ub, tr)
    assert rec.termination is Termination.MAX_ITER
    assert rec.iterations == 20
    assert rec.records[-1].bound == pytest.approx(theoretical_bound(0.01, rec.c))


def test_condition_violation_stops_run():
    m, tr, H, y, ub = l63_problem(6, N=200, sigma_b=1.0)
    rec = run(m, GNConfig(alpha=0.01), y, H, ub, tr)
    assert rec.termination is Termination.CONDITION_VIOLATED
    assert len(rec.records) == 1 and not rec.records[0].cond1_holds
    rec = run(m, GNConfig(alpha=0.01, stop_on_violation=False), y, H, ub, tr)
    assert rec.termination is Termination.STEP_TOL


def test_ill_posed_start_raises():
    m = linear_test(n=2)
    tr = generate_truth(m, np.ones(2), 4)
    H = ObservationOperator.empty(2, 4)
    with pytest.raises(IllPosed):
        run(m, GNConfig(alpha=1.0, c=1.0), np.zeros(0), H, tr)


def test_config_validation():
    with pytest.raises(ValueError):
        GNConfig(alpha=-1.0)
    with pytest.raises(ValueError):
        GNConfig(alpha="best")
    with pytest.raises(ValueError):
        GNConfig(step_tol=0)
    assert GNConfig().resolved_max_iter(lorenz63(), noisy=True) == 20
    assert GNConfig().resolved_max_iter(lorenz63(), noisy=False) == 200


def test_alpha_search_returns_alpha0_when_satisfied():
    m, tr, H, y, ub = l63_problem(7)
    u0 = initial_guess(y, H, ub)
    res = find_alpha_noisefree(m, u0, H, m.lipschitz_G(), 1e-3, alpha0=0.001)
    assert res.alpha == 0.001 and res.doublings == 0 and res.cond1_holds


def test_alpha_search_matches_dense_scan():
    m = lorenz63()
    N = 20
    r = SeededRng(8)
    tr = generate_truth(m, 5 * random_initial_state(m, r.generator(TRUTH)), N)
    H = ObservationOperator.regular(3, N, 5, [0])
    u0 = tr + 0.1 * r.generator(BACKGROUND).standard_normal(tr.shape)
    J = jacobian(m, u0)
    alphas = 1e-3 * 2.0 ** np.arange(16)
    dense = np.array([dense_opnorm_solve_Jt(J, assemble_normal(J, a, H)) for a in alphas])
    # threshold midway between two consecutive scan values
    target = 6
    thr = 0.5 * (dense[target - 1] + dense[target])
    L = m.lipschitz_G()
    res = find_alpha_noisefree(m, u0, H, L, 1 / (L * thr), alpha0=1e-3, rel_tol=1e-10,
                               max_iter=5000)
    expected = int(np.argmax(dense <= thr))
    assert res.alpha == alphas[expected]
    assert res.alpha == 1e-3 * 2 ** res.doublings
    assert dense[expected] <= thr < dense[expected - 1]


def test_noisy_search_with_zero_noise_stops_at_once():
    m, tr, H, y, ub = l63_problem(9, sigma_b=1.0)
    u0 = initial_guess(y, H, ub)
    res = find_alpha_noisy(m, u0, H, m.lipschitz_G(), 50.0, 0.0, alpha0=0.001)
    assert res.alpha == 0.001 and res.cond2_lhs == 0.0
    assert not res.cond1_holds and not res.both_hold


def test_noisy_search_never_exceeds_one():
    m, tr, H, y, ub = l63_problem(10, gamma=0.5, sigma_b=1.0)
    u0 = initial_guess(y, H, ub)
    with pytest.raises(NoAlphaFound, match="exceeds 1") as info:
        find_alpha_noisy(m, u0, H, m.lipschitz_G(), 50.0, y.Ht_eta_norm, alpha0=0.001)
    alphas = [h[0] for h in info.value.history]
    assert max(alphas) <= 1
    assert alphas == [0.001 * 2 ** k for k in range(len(alphas))]


def test_noisy_search_result_form():
    m, tr, H, y, ub = l63_problem(11, gamma=0.01)
    u0 = initial_guess(y, H, ub)
    c = float(np.linalg.norm(u0 - tr))
    res = find_alpha_noisy(m, u0, H, m.lipschitz_G(), c, y.Ht_eta_norm)
    assert 0 < res.alpha <= 1
    assert res.alpha == 0.001 * 2 ** res.doublings
