import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wmdetect import WatermarkConfig
from wmdetect.plant import AttackModel
from wmdetect.theory import (
    baseline_variance_scale,
    delta_lqg,
    delta_lqg_gap,
    inverse_threshold_transform,
    kld_post_pre,
    lqg_intermediates,
    optimize_watermark,
    theoretical_add,
    theoretical_far,
    threshold_transform,
    top_generalized_direction,
)

SIGMAS = (0.0, 0.5, 1.19, 2.0)


def test_kld_reduces_to_variance_ratio_when_q_a_is_sigma0(system_a):
    # with Q_a = Sigma0 the log-det term vanishes, so kld = 0 iff Sigma_gamma_tilde = Sigma0
    model, _ = system_a
    attack = AttackModel(np.zeros((1, 1)), model.Sigma0, 0.001)
    kld, inter = kld_post_pre(model, attack, np.zeros((2, 2)))
    S0 = model.Sigma0[0, 0]
    Sg = inter.Sigma_gamma_tilde[0, 0]
    assert kld == pytest.approx(0.5 * (Sg / S0 - 1), abs=1e-12)
    assert kld >= 0


def test_kld_reference_values(system_a, system_b):
    want_a = (0.2154, 0.2846, 0.3799, 0.4919)
    want_b = (0.0981, 0.1339, 0.1834, 0.2414)
    for (model, attack), want in ((system_a, want_a), (system_b, want_b)):
        got = [kld_post_pre(model, attack, s2 * np.eye(model.p))[0] for s2 in SIGMAS]
        np.testing.assert_allclose(got, want, atol=1e-4)
        assert np.all(np.diff(got) > 0)


def test_kld_affine_in_sigma_e_with_h_kld_slope(system_a):
    model, attack = system_a
    Hk = lqg_intermediates(model).H_kld
    base = kld_post_pre(model, attack, np.zeros((2, 2)))[0]
    rng = np.random.default_rng(0)
    for _ in range(5):
        F = rng.standard_normal((2, 2))
        S = F @ F.T
        assert kld_post_pre(model, attack, S)[0] - base == pytest.approx(0.5 * np.trace(Hk @ S), rel=1e-9)


def test_h_matrix_system_a(system_a):
    H = lqg_intermediates(system_a[0]).H
    np.testing.assert_allclose(H, [[1.381, 0.847], [0.847, 4.508]], atol=2e-3)
    assert np.trace(H @ (1.19 * np.eye(2))) == pytest.approx(7.008, abs=2e-3)


def test_threshold_transform_examples():
    assert threshold_transform(0.5, 1.0 - 1e-16) == pytest.approx(0.0, abs=1e-12)
    assert threshold_transform(0.99, 0.001) == pytest.approx(np.log(99_000), abs=1e-12)
    assert threshold_transform(0.99, 0.001) == pytest.approx(11.5029, abs=1e-4)
    with pytest.raises(ValueError):
        threshold_transform(1.0, 0.001)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-5, 0.5))
def test_threshold_roundtrip(th, rho):
    assert inverse_threshold_transform(threshold_transform(th, rho), rho) == pytest.approx(th, abs=1e-12)


def test_theoretical_add_examples():
    assert theoretical_add(11.5029, 1.0, 0.001) == pytest.approx(11.5029 / (1 + 0.0010005), abs=1e-4)
    assert theoretical_add(11.5029, 1.0, 0.001) == pytest.approx(11.491, abs=1e-3)
    a1 = theoretical_add(10.0, 0.5, 1e-9)
    a2 = theoretical_add(10.0, 1.0, 1e-9)
    assert a1 == pytest.approx(2 * a2, rel=1e-8)
    assert theoretical_add(10.0, 1.0, 0.001, r_bar=2.0, l_bar=0.5) > theoretical_add(10.0, 1.0, 0.001)
    with pytest.raises(ValueError):
        theoretical_add(10.0, 0.0, 0.001)


def test_theoretical_far_examples():
    for rho in (0.001, 0.01, 0.3):
        Th = threshold_transform(0.99, rho)
        assert theoretical_far(Th, rho) == pytest.approx(0.01 / 0.99, rel=1e-10)
        assert theoretical_far(Th, rho, xi=0.5) == pytest.approx(0.0050505, abs=1e-7)
    with pytest.raises(ValueError):
        theoretical_far(5.0, 0.001, xi=1.5)


def test_delta_lqg_examples(system_a):
    model = system_a[0]
    assert delta_lqg(np.zeros((2, 2)), model, 10.0, 0.001) == 0.0
    S = 1.19 * np.eye(2)
    tr = np.trace(lqg_intermediates(model).H @ S)
    assert delta_lqg(S, model, 1000.0, 0.001) == pytest.approx(tr)
    assert delta_lqg_gap(S, model, 6.0, 0.001) == pytest.approx((1 - 0.006) * tr)
    assert baseline_variance_scale(0.001, 6.0) == pytest.approx(0.006)
    with pytest.raises(ValueError):
        baseline_variance_scale(0.001, 2000.0)


def test_top_direction_trivial():
    v = top_generalized_direction(np.diag([2.0, 1.0]), np.eye(2))
    np.testing.assert_allclose(v, [1.0, 0.0], atol=1e-12)


def test_optimizer_rank_one_active_budget(system_a, system_b):
    for model, attack in (system_a, system_b):
        H = lqg_intermediates(model).H
        budget, anw, rho = 0.05, 6.0, attack.rho
        S, kld = optimize_watermark(model, attack, budget, anw, rho)
        assert np.linalg.matrix_rank(S, tol=1e-9 * np.abs(S).max()) == 1
        assert np.trace(H @ S) == pytest.approx(budget / (rho * anw), abs=1e-9)
        diag = WatermarkConfig.diagonal(model.p, budget / (rho * anw) / np.trace(H))
        assert kld >= kld_post_pre(model, attack, diag.Sigma_e)[0]


def test_optimizer_zero_budget(system_a):
    S, kld = optimize_watermark(*system_a, 0.0, 6.0, 0.001)
    assert not S.any()
    assert kld == pytest.approx(kld_post_pre(*system_a, np.zeros((2, 2)))[0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_optimal_direction_beats_random(seed):
    from wmdetect import load_fixture

    model, _ = load_fixture("system-a")
    lq = lqg_intermediates(model)
    v = top_generalized_direction(lq.H_kld, lq.H)
    v = v / np.sqrt(v @ lq.H @ v)
    w = np.random.default_rng(seed).standard_normal(2)
    w = w / np.sqrt(w @ lq.H @ w)
    assert v @ lq.H_kld @ v >= w @ lq.H_kld @ w - 1e-12
