import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from drwbc.oracle import (
    FinitePolicyClass, OracleMixture, clean_risk, delta_d, enumerate_trajectories, exact_dstar,
    exact_eclip, exact_wstar, rademacher_exact, rademacher_mc, random_mixture, t1_bound_check, t1_rhs,
    t2_rhs, tabular_policy_class, train_item_discriminator, weighted_empirical_risk, clipped_weights,
)
from drwbc.ratio import SCORE_CLAMP, ratio_from_score


def three_item(alpha=0.6):
    return OracleMixture(["a", "b", "c"], [0.5, 0.5, 0.0], [0.0, 0.5, 0.5], alpha)


def test_mixture_validation():
    with pytest.raises(ValueError):
        OracleMixture([0, 1], [0.6, 0.6], [0.5, 0.5], 0.2)
    with pytest.raises(ValueError):
        OracleMixture([0, 1], [0.5, 0.5], [0.5, 0.5], 1.0)
    assert len(enumerate_trajectories(2, 2, 3)) == 64


def test_no_contamination_gives_unit_ratio():
    m = random_mixture(np.random.default_rng(0), 0.0)
    w = exact_wstar(m)
    on = m.p_clean > 0
    assert np.allclose(w[on], 1.0, rtol=0, atol=1e-15)
    assert np.all(exact_dstar(m)[on] == 0.5)


def test_disjoint_supports():
    m = OracleMixture([0, 1, 2, 3], [0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5], 0.5)
    assert exact_wstar(m).tolist() == [2.0, 2.0, 0.0, 0.0]
    d = exact_dstar(m)
    assert d[0] == pytest.approx(2 / 3, rel=1e-15)
    assert ratio_from_score(d[0]) == pytest.approx(2.0, rel=1e-15)


@given(seed=st.integers(0, 10**6), alpha=st.floats(0, 0.95), overlap=st.booleans())
def test_identity_chain_and_ratio_ceiling(seed, alpha, overlap):
    m = random_mixture(np.random.default_rng(seed), alpha, horizon=3, overlap=overlap)
    w, d = exact_wstar(m), exact_dstar(m)
    r = ratio_from_score(d)
    # scores are clamped to [1e-7, 1 - 1e-7] before the odds are taken
    inside = (d >= SCORE_CLAMP) & (d <= 1 - SCORE_CLAMP)
    assert np.max(np.abs(r[inside] - w[inside]), initial=0.0) <= 1e-12
    assert np.all(r[~inside] == ratio_from_score(SCORE_CLAMP))
    assert w.max() <= 1 / (1 - alpha) + 1e-12


@given(seed=st.integers(0, 10**6), alpha=st.floats(0, 0.9))
def test_importance_weighting_identity(seed, alpha):
    rng = np.random.default_rng(seed)
    m = random_mixture(rng, alpha, horizon=3)
    loss = rng.uniform(0, 10, m.K)
    assert abs(np.sum(m.p * exact_wstar(m) * loss) - np.sum(m.p_clean * loss)) <= 1e-12


def test_eclip_hand_computed():
    m = three_item(0.6)
    # w* = [2.5, 1, 0], p = [0.2, 0.5, 0.3]
    assert np.allclose(exact_wstar(m), [2.5, 1.0, 0.0])
    assert exact_eclip(m, 1e-3, 2.0) == pytest.approx(0.2 * 0.5 + 0.3 * 1e-3, rel=1e-14)
    assert exact_eclip(m, 0.0, math.inf) == 0.0
    assert exact_eclip(m, 0.0, 2.5) == 0.0


def test_eclip_vanishes_when_cap_covers_ceiling():
    rng = np.random.default_rng(1)
    for alpha in np.arange(0, 0.55, 0.1):
        m = random_mixture(rng, alpha)
        w = exact_wstar(m)
        eps = w[m.p_clean > 0].min()
        for cap in (1 / (1 - alpha), 2.0, 4.0):
            if cap >= 1 / (1 - alpha):
                # the eps-side term needs eps <= w* on all of supp(p)
                eps_all = min(eps, w[m.p > 0].min())
                assert exact_eclip(m, eps_all, cap) == 0.0


def test_delta_d_examples():
    m = random_mixture(np.random.default_rng(2), 0.3)
    d = exact_dstar(m)
    assert delta_d(m, d) == 0.0
    shifted = np.clip(d + 0.1, 0, 1)
    assert delta_d(m, shifted) == pytest.approx(np.sum(m.p * (shifted - d)), rel=1e-12)
    assert abs(delta_d(m, d + 0.1) - 0.1) < 1e-12


def test_trained_discriminator_close_to_bayes():
    rng = np.random.default_rng(3)
    p_clean = rng.dirichlet(np.ones(10))
    p_bad = rng.dirichlet(np.ones(10))
    m = OracleMixture(list(range(10)), p_clean, p_bad, 0.4)
    scores = train_item_discriminator(m, 10_000, seed=0)
    assert delta_d(m, scores) < 0.05


def test_constant_loss_risks():
    m = random_mixture(np.random.default_rng(4), 0.3)
    fc = FinitePolicyClass(np.full((1, m.K), 3.0))
    assert clean_risk(m, fc, 0) == pytest.approx(3.0, rel=1e-15)
    w = np.array([0.5, 1.5, 2.0])
    assert weighted_empirical_risk([0, 1, 2], w, fc, 0) == pytest.approx(3.0 * w.mean(), rel=1e-15)
    with pytest.raises(ValueError):
        FinitePolicyClass(np.array([[11.0]]))


@pytest.mark.parametrize("clipped", [False, True])
def test_weighted_risk_converges(clipped):
    rng = np.random.default_rng(5)
    alpha = 0.4
    m = random_mixture(rng, alpha, horizon=3)
    fc = tabular_policy_class(m.trajectory_space, 20, rng)
    N = 100_000
    cap = 1 / (1 - alpha)
    if clipped:
        w_items = clipped_weights(exact_dstar(m), 0.0, cap)
    else:
        w_items = exact_wstar(m)
    sample = m.sample(N, rng)
    gap = np.abs(weighted_empirical_risk(sample, w_items[sample], fc) - clean_risk(m, fc))
    assert gap.max() < 3 * fc.B / math.sqrt(N) * cap


def test_rademacher_singleton_constant():
    fc = FinitePolicyClass(np.full((1, 4), 2.0))
    est, se = rademacher_mc(fc, np.arange(4).repeat(50), 2000, np.random.default_rng(0))
    assert abs(est) < 3 * se


def test_rademacher_two_function_class_exact():
    B, N = 10.0, 8
    fc = FinitePolicyClass(np.array([[0.0, 0.0], [B, 0.0]]), B)
    sample = np.array([0, 1, 0, 0, 1, 0, 1, 1])
    k = int(np.sum(sample == 0))
    # E max(0, (B/N) * S_k), S_k a sum of k independent signs
    closed = sum(math.comb(k, j) * max(0, 2 * j - k) for j in range(k + 1)) / 2**k * B / N
    assert rademacher_exact(fc, sample) == pytest.approx(closed, rel=1e-14)
    est, se = rademacher_mc(fc, sample, 20_000, np.random.default_rng(1))
    assert abs(est - closed) < 4 * se
    with pytest.raises(ValueError):
        rademacher_exact(fc, np.zeros(17, int))


def test_rademacher_scales_like_inverse_sqrt_n():
    rng = np.random.default_rng(6)
    m = random_mixture(rng, 0.3)
    fc = tabular_policy_class(m.trajectory_space, 10, rng)
    est = {}
    for N in (64, 256, 1024):
        est[N] = np.mean([rademacher_mc(fc, m.sample(N, rng), 200, rng)[0] for _ in range(20)])
    for lo, hi in ((64, 256), (256, 1024)):
        assert abs(est[lo] / est[hi] / 2.0 - 1.0) < 0.3


def test_rhs_formulas():
    r = t1_rhs(0.1, 10, 2, 100, 0.1, 0.0, 0.0)
    assert r == pytest.approx(2 * 2 * 0.1 + 10 * math.sqrt(8 * math.log(20) / 100))
    dd = 0.037
    assert t1_rhs(0.1, 10, 2, 100, 0.1, dd, 0.01) - t1_rhs(0.1, 10, 2, 100, 0.1, 0.0, 0.01) == pytest.approx(10 * 9 * dd)
    assert t2_rhs(0.1, 10, 2, 100, 0.1, 0, 0, eta=0.5) == pytest.approx(
        4 * 0.2 + 20 * math.sqrt(8 * math.log(40) / 100) + 0.5)


def test_bound_check_delta_one_never_violated():
    rng = np.random.default_rng(7)
    m = random_mixture(rng, 0.3)
    fc = tabular_policy_class(m.trajectory_space, 8, rng)
    rep = t1_bound_check(m, fc, 1e-3, 2.0, 256, 1.0, 30, seed=1, n_sign_draws=50)
    assert rep.violations.sum() == 0
    assert len(list(rep.rows())) == 30


def test_perturbed_scores_raise_rhs_by_lipschitz_term():
    rng = np.random.default_rng(8)
    m = random_mixture(rng, 0.3)
    fc = tabular_policy_class(m.trajectory_space, 8, rng)
    d = exact_dstar(m)
    noisy = np.clip(d + 0.05 * rng.standard_normal(m.K), 1e-6, 1 - 1e-6)
    eps, cap = 1e-3, 2.0
    a = t1_bound_check(m, fc, eps, cap, 128, 0.1, 3, seed=2, n_sign_draws=50)
    b = t1_bound_check(m, fc, eps, cap, 128, 0.1, 3, seed=2, scores=noisy, n_sign_draws=50)
    assert b.delta_d == pytest.approx(delta_d(m, noisy))
    np.testing.assert_allclose(b.bounds - a.bounds, fc.B * (1 + cap) ** 2 * b.delta_d, rtol=1e-10)
