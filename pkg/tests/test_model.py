import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TOY_X, oracle_hp
from oracles import (data_log_lik, dm_log_prob, invchi2_log_marginal, niw_log_marginal,
                     quad_left_d1, quad_right_col)
from spectralsbm.model import (ClusterStats, HyperParams, build_state, log_crp_z, log_joint,
                               log_marg_left, log_marg_right, log_pred_left, log_pred_right,
                               log_prior_d, log_prior_H, log_prior_K, log_prior_v)


def hp_for(m, **kw):
    return HyperParams(delta_diag=np.full(m, 0.05), sigma0_sq=np.full(m, 0.05), **kw)


def test_hyperparams_defaults_and_validation():
    hp = HyperParams()
    assert (hp.kappa0, hp.nu0, hp.lambda0, hp.alpha, hp.beta) == (1, 1, 1, 1, 1)
    assert hp.omega == hp.delta_geom == 0.1
    for bad in (dict(kappa0=0), dict(omega=1.0), dict(d_prior="flat"), dict(m_cap=0),
                dict(delta_diag=[1.0, -1.0])):
        with pytest.raises(ValueError):
            HyperParams(**bad)


def test_m_cap_defaults_to_thirty():
    assert HyperParams().cap(100) == 30
    assert HyperParams().cap(7) == 7
    assert HyperParams(m_cap=4).cap(100) == 4


def test_scalar_scales_broadcast():
    hp = HyperParams(delta_diag=0.2, sigma0_sq=0.3)
    delta, sig = hp.view_arrays(4)
    assert np.array_equal(delta, np.full(4, 0.2)) and np.array_equal(sig, np.full(4, 0.3))


@pytest.mark.parametrize("d", [1, 2, 3])
def test_marginals_match_closed_form_oracle(d):
    rng = np.random.default_rng(d)
    X = rng.normal(size=(9, 5)) * 0.3
    hp = HyperParams(kappa0=0.7, nu0=1.5, lambda0=2.0, delta_diag=rng.uniform(0.05, 0.5, 5),
                     sigma0_sq=rng.uniform(0.05, 0.5, 5))
    st_ = ClusterStats.from_rows(X)
    want_left = niw_log_marginal(X, d, 0.7, 1.5, hp.delta_diag)
    want_right = sum(invchi2_log_marginal(X[:, j], 2.0, hp.sigma0_sq[j]) for j in range(d, 5))
    assert log_marg_left(st_, d, hp) == pytest.approx(want_left, abs=1e-10)
    assert log_marg_right(st_, d, hp) == pytest.approx(want_right, abs=1e-10)


def test_empty_cluster_marginals_are_zero():
    hp = hp_for(3)
    empty = ClusterStats(3, 3)
    assert log_marg_left(empty, 2, hp) == 0.0
    assert log_marg_right(empty, 2, hp) == 0.0


def test_single_point_left_marginal_is_student_t():
    # one observation: the marginal equals the prior predictive t density
    from scipy import stats
    hp = HyperParams(kappa0=2.0, nu0=3.0, delta_diag=[0.4], sigma0_sq=[1.0])
    x = 0.3
    scale = math.sqrt((2.0 + 1) / (2.0 * 3.0) * 0.4)
    want = stats.t.logpdf(x, df=3.0, scale=scale)
    assert log_marg_left(ClusterStats.from_rows([[x]]), 1, hp) == pytest.approx(want, abs=1e-12)


def test_quadrature_spot_check():
    x = np.array([0.3, -0.2, 0.5])
    hp = HyperParams(kappa0=0.5, nu0=2.0, lambda0=1.0, delta_diag=[1.0], sigma0_sq=[0.5])
    st_ = ClusterStats.from_rows(x[:, None])
    assert log_marg_left(st_, 1, hp) == pytest.approx(quad_left_d1(x, 0.5, 2.0, 1.0), abs=1e-6)
    st0 = ClusterStats.from_rows(np.column_stack([np.zeros(3), x]))
    assert log_marg_right(st0, 1, hp) == pytest.approx(quad_right_col(x, 1.0, 0.5), abs=1e-6)


def test_predictive_identity_small_grid():
    rng = np.random.default_rng(5)
    for _ in range(50):
        m = int(rng.integers(1, 8))
        d = int(rng.integers(1, m + 1))
        rows = rng.normal(size=(int(rng.integers(0, 6)), m))
        x = rng.normal(size=m)
        hp = HyperParams(delta_diag=rng.uniform(0.1, 2, m), sigma0_sq=rng.uniform(0.1, 2, m))
        before = ClusterStats.from_rows(rows, m) if len(rows) else ClusterStats(m, m)
        after = before.copy()
        after.add_row(x)
        dl = log_marg_left(after, d, hp) - log_marg_left(before, d, hp)
        dr = log_marg_right(after, d, hp) - log_marg_right(before, d, hp)
        assert log_pred_left(x, before, d, hp) == pytest.approx(dl, abs=1e-10)
        assert log_pred_right(x, before, d, hp) == pytest.approx(dr, abs=1e-10)


def test_outlier_lowers_marginal_per_point():
    rng = np.random.default_rng(0)
    tight = rng.normal(0.5, 0.01, size=(20, 2))
    hp = hp_for(2)
    base = ClusterStats.from_rows(tight)
    near = base.copy()
    near.add_row([0.5, 0.5])
    far = base.copy()
    far.add_row([5.0, -5.0])
    assert log_marg_left(far, 2, hp) < log_marg_left(near, 2, hp)


def test_marginal_invariant_to_row_order():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(8, 4))
    hp = hp_for(4)
    a = ClusterStats.from_rows(X)
    b = ClusterStats.from_rows(X[rng.permutation(8)])
    for d in (1, 2, 4):
        assert log_marg_left(a, d, hp) == pytest.approx(log_marg_left(b, d, hp), abs=1e-10)
        assert log_marg_right(a, d, hp) == pytest.approx(log_marg_right(b, d, hp), abs=1e-10)


def test_remove_from_empty_cluster_raises():
    with pytest.raises(ValueError):
        ClusterStats(2, 2).remove_row([0.0, 0.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.lists(st.tuples(st.booleans(), st.integers(0, 10**6)),
                                   min_size=1, max_size=40))
def test_add_remove_matches_fresh_recompute(m, ops):
    rows = []
    stats = ClusterStats(m, m)
    for add, seed in ops:
        if add or not rows:
            x = np.random.default_rng(seed).normal(size=m) * 10
            rows.append(x)
            stats.add_row(x)
        else:
            x = rows.pop(seed % len(rows))
            stats.remove_row(x)
    fresh = ClusterStats.from_rows(np.array(rows), m) if rows else ClusterStats(m, m)
    assert stats.n == fresh.n
    for a, b in ((stats.sum_x, fresh.sum_x), (stats.sum_sq, fresh.sum_sq),
                 (stats.outer, fresh.outer)):
        np.testing.assert_allclose(a, b, atol=1e-9 * max(1.0, np.abs(b).max()))


def test_allocation_prior_matches_oracle():
    for counts in ([3, 0, 2], [6], [1, 1, 1, 1], [0, 0, 5]):
        K = len(counts)
        assert log_crp_z(counts, K, 1.3) == pytest.approx(dm_log_prob(counts, 1.3), abs=1e-12)


def test_allocation_prior_sums_to_one():
    n, K, alpha = 4, 3, 0.8
    total = sum(math.exp(log_crp_z(np.bincount(z, minlength=K), K, alpha))
                for z in itertools.product(range(K), repeat=n))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_second_level_prior_sums_to_one():
    K, H, beta = 4, 2, 1.5
    total = sum(math.exp(log_prior_v(v, K, H, beta)) for v in itertools.product(range(H), repeat=K))
    assert total == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        log_prior_v([0, 2], 2, 2, 1.0)


def test_scalar_priors():
    assert log_prior_K(1, 0.1) == pytest.approx(math.log(0.1))
    assert log_prior_K(3, 0.1) == pytest.approx(2 * math.log(0.9) + math.log(0.1))
    assert log_prior_K(0, 0.1) == -math.inf
    assert log_prior_H(2, 3) == pytest.approx(-math.log(3))
    assert log_prior_H(4, 3) == -math.inf
    con = HyperParams()
    assert log_prior_d(2, 3, con, 10) == pytest.approx(-math.log(3))
    assert log_prior_d(4, 3, con, 10) == -math.inf
    unc = HyperParams(d_prior="unconstrained")
    assert log_prior_d(4, 3, unc, 10) == pytest.approx(3 * math.log(0.9) + math.log(0.1))


def _toy_state(z, K, d, hp, **kw):
    return build_state([[TOY_X]], [np.asarray(z)], [K], d, hp, **kw)


@pytest.mark.parametrize("z,K,d", [([0, 0, 0, 1, 1, 1], 2, 2), ([0, 1, 2, 0, 1, 2], 3, 1),
                                   ([0, 0, 0, 0, 0, 0], 2, 1), ([2, 2, 0, 0, 1, 1], 3, 3)])
def test_log_joint_matches_enumeration_component(z, K, d):
    hp = hp_for(3)
    ohp = oracle_hp(3)
    counts = np.bincount(z, minlength=K)
    knz = np.count_nonzero(counts)
    want = (data_log_lik(TOY_X, np.array(z), d, ohp) + dm_log_prob(counts, 1.0)
            + (K - 1) * math.log(0.9) + math.log(0.1))
    if d > knz:
        want = -math.inf
    else:
        want += -math.log(min(knz, 3))
    got = log_joint(_toy_state(z, K, d, hp), hp, k_max=3)
    assert got == pytest.approx(want, abs=1e-9)


def test_log_joint_second_level_component():
    hp = hp_for(3, second_level=True)
    z, v = np.array([0, 0, 1, 1, 2, 2]), np.array([0, 1, 0])
    st_ = _toy_state(z, 3, 1, hp, v_list=[v], H_list=[2])
    ohp = oracle_hp(3)
    want = (data_log_lik(TOY_X, z, 1, ohp, v=v) + dm_log_prob([2, 2, 2], 1.0)
            + dm_log_prob([2, 1], 1.0) - math.log(3) + 2 * math.log(0.9) + math.log(0.1)
            - math.log(3))
    assert log_joint(st_, hp, k_max=3) == pytest.approx(want, abs=1e-9)


def test_log_joint_invariant_to_label_permutation():
    hp = hp_for(3)
    z = np.array([0, 0, 1, 1, 2, 2])
    base = log_joint(_toy_state(z, 3, 2, hp), hp)
    for perm in itertools.permutations(range(3)):
        perm = np.array(perm)
        assert log_joint(_toy_state(perm[z], 3, 2, hp), hp) == pytest.approx(base, abs=1e-10)
