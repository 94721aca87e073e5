import numpy as np
import pytest
from hypothesis import given, strategies as st

from surprise_rl.dist import (
    LOG_2PI, LOG_STD_MAX, LOG_STD_MIN, Categorical, DiagGaussian, categorical_entropy,
    categorical_kl, categorical_log_prob, fisher_metric, gaussian_entropy, gaussian_kl,
    gaussian_log_prob,
)


def test_standard_normal_at_zero():
    p = DiagGaussian(np.zeros((1, 1)), np.zeros((1, 1)))
    assert gaussian_log_prob(p, np.zeros((1, 1)))[0] == pytest.approx(-0.91893853320467, abs=1e-12)


def test_log_prob_at_mean(rng):
    mu = rng.standard_normal((4, 3))
    ls = rng.uniform(-1, 1, (4, 3))
    p = DiagGaussian(mu, ls)
    np.testing.assert_allclose(gaussian_log_prob(p, mu), -ls.sum(1) - 1.5 * LOG_2PI, atol=1e-12)


def test_surprisal_identity(rng):
    for _ in range(20):
        n = rng.integers(1, 6)
        mu, ls = rng.standard_normal((50, n)), rng.uniform(-3, 1.5, (50, n))
        x = rng.standard_normal((50, n))
        p = DiagGaussian(mu, ls)
        rest = -gaussian_log_prob(p, x) - np.sum((x - mu) ** 2 / (2 * np.exp(2 * ls)) + ls, axis=1)
        np.testing.assert_allclose(rest, 0.5 * n * LOG_2PI, atol=1e-10)


def test_log_std_clamped():
    p = DiagGaussian(np.zeros((1, 2)), np.array([[-50.0, 50.0]]))
    np.testing.assert_array_equal(p.log_std, [[LOG_STD_MIN, LOG_STD_MAX]])


def test_kl_examples():
    p = DiagGaussian(np.ones((1, 1)), np.zeros((1, 1)))
    q = DiagGaussian(np.zeros((1, 1)), np.zeros((1, 1)))
    assert gaussian_kl(p, q)[0] == pytest.approx(0.5)
    assert gaussian_kl(p, p)[0] == 0.0


@given(st.integers(0, 10_000))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = DiagGaussian(rng.standard_normal((5, 3)), rng.uniform(-2, 1, (5, 3)))
    q = DiagGaussian(rng.standard_normal((5, 3)), rng.uniform(-2, 1, (5, 3)))
    assert np.all(gaussian_kl(p, q) >= 0)
    la, lb = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    assert np.all(categorical_kl(Categorical(la), Categorical(lb)) >= -1e-15)
    assert np.all(categorical_kl(Categorical(la), Categorical(la)) == 0)


def test_cross_entropy_decomposition(rng):
    p = DiagGaussian(rng.standard_normal((1, 3)), rng.uniform(-1, 0.5, (1, 3)))
    q = DiagGaussian(rng.standard_normal((1, 3)), rng.uniform(-1, 0.5, (1, 3)))
    x = p.mean + p.std * rng.standard_normal((200_000, 3))
    qq = DiagGaussian(np.repeat(q.mean, len(x), 0), np.repeat(q.log_std, len(x), 0))
    ce = -gaussian_log_prob(qq, x)
    se = ce.std() / np.sqrt(len(x))
    assert abs(ce.mean() - (gaussian_kl(p, q)[0] + gaussian_entropy(p)[0])) < 4 * se


def test_entropies():
    p = DiagGaussian(np.zeros((1, 1)), np.zeros((1, 1)))
    assert gaussian_entropy(p)[0] == pytest.approx(1.4189385332046727)
    assert categorical_entropy(Categorical(np.zeros((1, 5))))[0] == pytest.approx(np.log(5))


def test_categorical_probs_and_logprob(rng):
    c = Categorical(rng.standard_normal((6, 4)) * 5)
    np.testing.assert_allclose(c.probs.sum(1), 1.0, atol=1e-12)
    idx = np.array([0, 1, 2, 3, 0, 1])
    np.testing.assert_allclose(categorical_log_prob(c, idx), np.log(c.probs[np.arange(6), idx]))


def test_log_prob_permutation_invariant(rng):
    mu, ls, x = rng.standard_normal((7, 2)), rng.uniform(-1, 1, (7, 2)), rng.standard_normal((7, 2))
    perm = rng.permutation(7)
    a = gaussian_log_prob(DiagGaussian(mu, ls), x)[perm]
    b = gaussian_log_prob(DiagGaussian(mu[perm], ls[perm]), x[perm])
    np.testing.assert_array_equal(a, b)


def test_fisher_gaussian_identity_mean_block():
    F = fisher_metric(DiagGaussian(np.zeros((1, 2)), np.zeros((1, 2))))
    np.testing.assert_allclose(F[0], np.diag([1, 1, 2, 2]))


def test_fisher_categorical_peaked():
    F = fisher_metric(Categorical(np.array([[30.0, 0.0, 0.0]])))
    assert np.max(np.abs(F[0])) < 1e-10


def test_fisher_matches_kl_second_derivative(rng):
    # Gaussian: parameters (mean, log_std)
    m, s = rng.standard_normal(2), rng.uniform(-1, 0.5, 2)
    F = fisher_metric(DiagGaussian(m[None], s[None]))[0]
    v = rng.standard_normal(4)
    h = 1e-4

    def kl(t):
        return gaussian_kl(DiagGaussian(m[None], s[None]),
                           DiagGaussian((m + t * v[:2])[None], (s + t * v[2:])[None]))[0]

    second = (kl(h) - 2 * kl(0.0) + kl(-h)) / h ** 2
    assert second == pytest.approx(v @ F @ v, rel=1e-5)
    # categorical: parameters are logits
    z = rng.standard_normal(4)
    F = fisher_metric(Categorical(z[None]))[0]
    u = rng.standard_normal(4)

    def ckl(t):
        return categorical_kl(Categorical(z[None]), Categorical((z + t * u)[None]))[0]

    second = (ckl(h) - 2 * ckl(0.0) + ckl(-h)) / h ** 2
    assert second == pytest.approx(u @ F @ u, rel=1e-5)


def test_sampling_moments(rng):
    p = DiagGaussian(np.full((100_000, 1), 2.0), np.full((100_000, 1), np.log(0.5)))
    x = p.sample(rng)
    assert abs(x.mean() - 2.0) < 0.01 and abs(x.std() - 0.5) < 0.01
    c = Categorical(np.log(np.tile([0.2, 0.8], (100_000, 1))))
    assert abs(c.sample(rng).mean() - 0.8) < 0.01
