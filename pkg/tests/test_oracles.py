import itertools

import numpy as np
import pytest

from stitchsmc.core import make_rng
from stitchsmc.oracles import (
    DiscreteHMM,
    LinearGaussianModel,
    TooLarge,
    empirical_path_table,
    hmm_exact_fixed_lag_joint,
    hmm_exact_joint,
    hmm_forward_backward,
    kalman_filter,
    path_marginals,
    random_hmm,
    rts_smoother,
    total_variation,
)


def dense_gaussian(model, y, upto=None):
    """Condition the joint Gaussian of (x_0..x_T, y_0..y_upto) on the observations."""
    T = len(y) - 1
    upto = T if upto is None else upto
    cov = np.empty((T + 1, T + 1))
    var = [model.p0v]
    for t in range(1, T + 1):
        var.append(model.a ** 2 * var[-1] + model.q)
    for s in range(T + 1):
        for t in range(T + 1):
            lo, hi = min(s, t), max(s, t)
            cov[s, t] = model.a ** (hi - lo) * var[lo]
    mean = model.m0 * model.a ** np.arange(T + 1)
    obs = slice(0, upto + 1)
    c = model.c
    s_yy = c * c * cov[obs, obs] + model.r * np.eye(upto + 1)
    s_xy = c * cov[:, obs]
    gain = s_xy @ np.linalg.inv(s_yy)
    post_mean = mean + gain @ (np.asarray(y[:upto + 1]) - c * mean[obs])
    post_cov = cov - gain @ s_xy.T
    return post_mean, np.diag(post_cov)


class TestKalman:
    def test_hand_example(self):
        m, v = kalman_filter(LinearGaussianModel(a=1, q=1, c=1, r=1, m0=0, p0v=1), [1.0])
        assert m[0] == pytest.approx(0.5)
        assert v[0] == pytest.approx(0.5)

    def test_noiseless_limit(self):
        model = LinearGaussianModel(a=0.7, q=1, c=2.0, r=1e-12)
        y = np.array([1.0, -0.4, 2.2])
        m, _ = kalman_filter(model, y)
        assert np.allclose(m, y / 2.0, atol=1e-6)

    def test_dense_oracle(self):
        model = LinearGaussianModel(a=0.8, q=0.6, c=1.3, r=0.9, m0=0.4, p0v=2.0)
        y = make_rng(1).standard_normal(6)
        fm, fv = kalman_filter(model, y)
        for t in range(6):
            pm, pv = dense_gaussian(model, y, upto=t)
            assert fm[t] == pytest.approx(pm[t])
            assert fv[t] == pytest.approx(pv[t])

    def test_invalid(self):
        with pytest.raises(ValueError):
            LinearGaussianModel(q=0.0)


class TestRts:
    def test_single_time(self):
        model = LinearGaussianModel()
        assert np.allclose(rts_smoother(model, [0.7]), kalman_filter(model, [0.7]))

    def test_dense_oracle_and_ordering(self):
        model = LinearGaussianModel(a=0.8, q=0.6, c=1.3, r=0.9, m0=0.4, p0v=2.0)
        y = make_rng(2).standard_normal(6)
        sm, sv = rts_smoother(model, y)
        pm, pv = dense_gaussian(model, y)
        assert np.allclose(sm, pm)
        assert np.allclose(sv, pv)
        assert np.all(sv <= kalman_filter(model, y)[1] + 1e-12)

    def test_transition_bound(self):
        model = LinearGaussianModel(q=0.3)
        x = make_rng(3).normal(size=(2, 1000)) * 3
        assert np.all(np.exp(model.transition_log_density(x[0], x[1])) <= model.transition_bound())


class TestHmmTables:
    def test_uniform(self):
        k = 3
        u = np.full((k, k), 1 / k)
        model = DiscreteHMM(np.full(k, 1 / k), u, u)
        assert np.allclose(hmm_exact_joint(model, [0, 1, 2]), 1 / 27)

    def test_hand_two_state(self):
        pi = np.array([0.6, 0.4])
        A = np.array([[0.7, 0.3], [0.2, 0.8]])
        B = np.array([[0.9, 0.1], [0.3, 0.7]])
        y = [0, 1]
        table = hmm_exact_joint(DiscreteHMM(pi, A, B), y)
        raw = np.array([[pi[a] * B[a, 0] * A[a, b] * B[b, 1] for b in range(2)] for a in range(2)])
        # entries by hand: 0.6*.9*.7*.1, 0.6*.9*.3*.7, 0.4*.3*.2*.1, 0.4*.3*.8*.7
        assert raw[0, 0] == pytest.approx(0.0378)
        assert raw[1, 1] == pytest.approx(0.0672)
        assert np.allclose(table, raw / raw.sum())

    def test_forward_backward(self, small_hmm):
        model, y = small_hmm
        table = hmm_exact_joint(model, y)
        assert table.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.allclose(path_marginals(table), hmm_forward_backward(model, y))

    def test_too_large(self):
        model = random_hmm(4, 2, make_rng(0))
        with pytest.raises(TooLarge):
            hmm_exact_joint(model, [0] * 12)

    def test_rows_validated(self):
        with pytest.raises(ValueError):
            DiscreteHMM(np.array([0.5, 0.6]), np.eye(2), np.eye(2))

    def test_lag_covers_everything(self, small_hmm):
        model, y = small_hmm
        assert np.allclose(hmm_exact_fixed_lag_joint(model, y, 6), hmm_exact_joint(model, y))
        assert np.allclose(hmm_exact_fixed_lag_joint(model, y, 9), hmm_exact_joint(model, y))

    def test_lag_zero_by_hand(self):
        pi = np.array([0.6, 0.4])
        A = np.array([[0.7, 0.3], [0.2, 0.8]])
        B = np.array([[0.9, 0.1], [0.3, 0.7]])
        y = [0, 1, 1]
        model = DiscreteHMM(pi, A, B)
        table = hmm_exact_fixed_lag_joint(model, y, 0)
        p0 = pi * B[:, 0]
        p0 /= p0.sum()
        step = A * B[:, 1][None, :]
        step /= step.sum(axis=1, keepdims=True)
        expected = p0[:, None, None] * step[:, :, None] * step[None, :, :]
        assert np.allclose(table, expected)

    def test_tv_decreases_with_lag(self):
        for seed in range(5):
            r = make_rng(seed)
            model = random_hmm(3, 3, r, stickiness=0.0, clarity=1.0)
            _, y = model.simulate(6, r)
            exact = hmm_exact_joint(model, y)
            tv = [total_variation(hmm_exact_fixed_lag_joint(model, y, L), exact) for L in range(7)]
            assert all(b <= a + 1e-12 for a, b in zip(tv, tv[1:]))
            assert tv[-1] == pytest.approx(0.0, abs=1e-12)

    def test_final_block_conditional_exact(self, small_hmm):
        model, y = small_hmm
        L, T = 2, 6
        fixed = hmm_exact_fixed_lag_joint(model, y, L)
        exact = hmm_exact_joint(model, y)

        def block_given_prev(table):
            # law of x_{T-L:T} given x_{T-L-1}
            marg = table.sum(axis=tuple(range(T - L - 1)))
            return marg / marg.sum(axis=tuple(range(1, L + 2)), keepdims=True)

        assert np.allclose(block_given_prev(fixed), block_given_prev(exact))

    def test_fixed_lag_sums_to_one(self, small_hmm):
        model, y = small_hmm
        for L in range(7):
            assert hmm_exact_fixed_lag_joint(model, y, L).sum() == pytest.approx(1.0, abs=1e-9)


def test_empirical_table():
    paths = np.array([[0, 1], [0, 1], [1, 1], [1, 0]])
    table = empirical_path_table(paths, 2)
    assert table[0, 1] == 0.5 and table[1, 1] == 0.25 and table[1, 0] == 0.25


def test_hmm_transition_sampler(rng):
    model = random_hmm(3, 2, make_rng(5))
    draws = model.transition_sample(np.zeros(10 ** 5, dtype=int), rng)
    freq = np.bincount(draws, minlength=3) / len(draws)
    assert np.allclose(freq, model.transition[0], atol=0.01)
    pairs = list(itertools.product(range(3), repeat=2))
    a, b = np.array(pairs).T
    assert np.all(np.exp(model.transition_log_density(a, b)) <= model.transition_bound())
