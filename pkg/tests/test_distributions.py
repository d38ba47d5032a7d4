import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from qosclust import distributions as qd
from qosclust.errors import InsufficientDataError, InvariantError, NumericalDomainError

from conftest import random_gaussian


def gaussians(max_d=3):
    @st.composite
    def _g(draw):
        d = draw(st.integers(1, max_d))
        seed = draw(st.integers(0, 2**31 - 1))
        return random_gaussian(np.random.default_rng(seed), d)

    return _g()


# -- kernel ---------------------------------------------------------------------


def test_kernel_identical_is_e(rng):
    p = random_gaussian(rng, 3)
    assert qd.hellinger_kernel(p, p) == pytest.approx(math.e, abs=1e-12)


def test_kernel_1d_against_high_precision():
    mpmath.mp.dps = 40
    p = qd.GaussianParams([0.0], [[1.0]])
    q = qd.GaussianParams([2.0], [[1.0]])
    # (s1 s2)^(1/4) / ((s1+s2)/2)^(1/2) * exp(-(1/8) dmu^2 / ((s1+s2)/2))
    s1, s2, dmu = mpmath.mpf(1), mpmath.mpf(1), mpmath.mpf(2)
    mid = (s1 + s2) / 2
    aff = (s1 * s2) ** mpmath.mpf(0.25) / mpmath.sqrt(mid) * mpmath.exp(-dmu**2 / (8 * mid))
    assert qd.bhattacharyya_affinity(p, q) == pytest.approx(float(aff), rel=1e-14)
    assert qd.hellinger_kernel(p, q) == pytest.approx(float(mpmath.exp(aff)), rel=1e-14)
    assert qd.hellinger_kernel(p, q) == pytest.approx(1.834057, abs=1e-6)


def test_plain_variant_is_affinity(rng):
    p, q = random_gaussian(rng, 2), random_gaussian(rng, 2)
    assert qd.hellinger_kernel(p, q, "plain_affinity") == qd.bhattacharyya_affinity(p, q)
    with pytest.raises(ValueError):
        qd.hellinger_kernel(p, q, "cosine")


def test_kernel_singular_midpoint():
    p = qd.GaussianParams([0.0, 0.0], np.zeros((2, 2)))
    with pytest.raises(NumericalDomainError):
        qd.hellinger_kernel(p, p)


@settings(max_examples=60, deadline=None)
@given(gaussians(), st.integers(0, 2**31 - 1))
def test_kernel_symmetric_and_maximal_at_identity(p, seed):
    q = random_gaussian(np.random.default_rng(seed), p.dim)
    kpq, kqp = qd.hellinger_kernel(p, q), qd.hellinger_kernel(q, p)
    assert abs(kpq - kqp) <= 1e-12
    assert kpq <= qd.hellinger_kernel(p, p) + 1e-12


# -- Laplacian --------------------------------------------------------------------


def test_laplacian_2x2():
    e = math.e
    D = qd.laplacian_distance([[e, e], [e, e]])
    np.testing.assert_allclose(D, [[e, -e], [-e, e]], rtol=0, atol=1e-15)


def test_laplacian_rejects_asymmetric():
    with pytest.raises(InvariantError):
        qd.laplacian_distance([[1.0, 2.0], [1.5, 1.0]])


def test_laplacian_five_random_psd(rng):
    D = qd.distance_matrix([random_gaussian(rng, 3) for _ in range(5)])
    assert np.linalg.eigvalsh(D)[0] >= -1e-8
    np.testing.assert_allclose(D.sum(axis=1), 0.0, atol=1e-12)
    off = D[~np.eye(5, dtype=bool)]
    assert np.all(off <= 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 20), st.integers(1, 3), st.integers(0, 2**31 - 1), st.sampled_from(qd.KERNEL_VARIANTS))
def test_laplacian_properties(n, d, seed, variant):
    rng = np.random.default_rng(seed)
    D = qd.distance_matrix([random_gaussian(rng, d) for _ in range(n)], variant)
    assert np.array_equal(D, D.T)
    assert np.max(np.abs(D.sum(axis=1))) <= 1e-12
    assert np.linalg.eigvalsh(D)[0] >= -1e-8


def test_ideal_block_kernel_spectrum():
    """Paper kernel with perfect groups: spectrum 0, N (k-1 times), N + (e-1) m_g."""
    sizes = [2, 2, 2, 2, 4]
    labels = np.repeat(np.arange(len(sizes)), sizes)
    N, k = labels.size, len(sizes)
    K = np.where(labels[:, None] == labels[None, :], math.e, 1.0)
    ev = np.linalg.eigvalsh(qd.laplacian_distance(K))
    expected = sorted([0.0] + [N] * (k - 1) + sum([[N + (math.e - 1) * m] * (m - 1) for m in sizes], []))
    np.testing.assert_allclose(ev, expected, atol=1e-10)
    # even this noise-free limit stays below a gap ratio of 2
    assert ev[k] / ev[k - 1] == pytest.approx(1 + (math.e - 1) * min(sizes) / N)
    assert ev[k] / ev[k - 1] < 2


# -- Cholesky parameterisation ---------------------------------------------------------


def test_tilde_examples():
    np.testing.assert_array_equal(qd.tilde_to_chol([0.0, 0.0, 0.0], 2), np.eye(2))
    L = qd.tilde_to_chol([math.log(2.0)], 1)
    assert (L @ L.T)[0, 0] == pytest.approx(4.0)


def test_tilde_random_pd(rng):
    t = rng.normal(scale=2.0, size=(1000, 6))
    L = qd.tilde_to_chol(t, 3)
    assert np.linalg.eigvalsh(L @ np.swapaxes(L, 1, 2)).min() > 0


def test_cov_tilde_roundtrip(rng):
    for _ in range(20):
        p = random_gaussian(rng, 3)
        L = qd.tilde_to_chol(qd.cov_to_tilde(p.cov), 3)
        np.testing.assert_allclose(L @ L.T, p.cov, rtol=1e-12, atol=1e-12)


def test_tilde_overflow_guard():
    with pytest.raises(NumericalDomainError):
        qd.tilde_to_chol([800.0], 1)


# -- likelihood --------------------------------------------------------------------


def test_nll_examples():
    assert qd.nll(qd.GaussianParams([0.0], [[1.0]]), [0.0]) == pytest.approx(0.5 * math.log(2 * math.pi))
    p = qd.GaussianParams([1.0, -1.0], np.eye(2))
    assert qd.nll(p, [1.0, -1.0]) == pytest.approx(math.log(2 * math.pi))


def test_nll_matches_scipy(rng):
    for d in (1, 2, 3):
        p = random_gaussian(rng, d)
        x = rng.normal(size=d)
        ref = -stats.multivariate_normal(p.mean, p.cov).logpdf(x)
        assert qd.nll(p, x) == pytest.approx(ref, rel=1e-12)


def test_nll_non_pd():
    p = qd.GaussianParams([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(NumericalDomainError):
        qd.nll(p, [0.0, 0.0])


def test_expected_nll_equals_sample_average(rng):
    p = random_gaussian(rng, 3)
    x = rng.normal(size=(50, 3)) * 2 + 1
    emp = qd.fit_gaussian(x, eps=0.0)
    got = qd.expected_nll(p.mean[None], p.cov[None], emp.mean[None], emp.cov[None])[0]
    assert got == pytest.approx(np.mean([qd.nll(p, xi) for xi in x]), rel=1e-12)


def test_expected_nll_standard_normal():
    v = qd.expected_nll(np.zeros((1, 1)), np.ones((1, 1, 1)), np.zeros((1, 1)), np.ones((1, 1, 1)))[0]
    assert v == pytest.approx(1.41894, abs=1e-5)


# -- fitting ------------------------------------------------------------------------


def test_fit_constant_window():
    spec = qd.default_kpis()
    g = qd.fit_gaussian(np.tile([5.0, 2.0, -90.0], (10, 1)), spec)
    np.testing.assert_allclose(g.mean, [math.log(5.0), math.log(2.0), -90.0])
    np.testing.assert_allclose(g.cov, 1e-6 * np.eye(3), atol=1e-18)


def test_fit_two_samples():
    g = qd.fit_gaussian([[0.0], [2.0]])
    assert g.mean[0] == 1.0
    assert g.cov[0, 0] == pytest.approx(1.0 + 1e-6, rel=1e-15)


def test_fit_needs_two_samples():
    with pytest.raises(InsufficientDataError):
        qd.fit_gaussian([[1.0, 2.0]])


def test_fit_log_needs_positive():
    with pytest.raises(InvariantError):
        qd.fit_gaussian([[0.0, 1.0, 1.0], [1.0, 1.0, 1.0]], qd.default_kpis())


def test_fit_recovers_parameters(rng):
    p = random_gaussian(rng, 3, scale=3.0)
    x = rng.multivariate_normal(p.mean, p.cov, size=10_000)
    g = qd.fit_gaussian(x)
    np.testing.assert_allclose(g.mean, p.mean, rtol=0.05, atol=0.05 * np.abs(p.mean).max())
    np.testing.assert_allclose(g.cov, p.cov, rtol=0.05, atol=0.05 * np.abs(p.cov).max())


def test_log_transform_removes_skew(rng):
    raw = np.exp(rng.normal(3.0, 0.4, size=(100_000, 1)))
    spec = qd.KpiSpec(("latency",), ("log",))
    assert stats.skew(raw[:, 0]) > 0.5
    assert abs(stats.skew(spec.forward(raw)[:, 0])) < 0.1


def test_rolling_fit_matches_direct(rng):
    z = rng.normal(size=(200, 3)) + 50.0
    ends = np.array([30, 77, 200])
    means, covs = qd.rolling_fit(z, ends, 30)
    for k, e in enumerate(ends):
        g = qd.fit_gaussian(z[e - 30:e])
        np.testing.assert_allclose(means[k], g.mean, rtol=1e-12)
        np.testing.assert_allclose(covs[k], g.cov, atol=1e-10)


def test_moment_match_of_identical_components(rng):
    p = random_gaussian(rng, 2)
    g = qd.moment_match([p.mean] * 4, [p.cov] * 4)
    np.testing.assert_allclose(g.mean, p.mean)
    np.testing.assert_allclose(g.cov, p.cov)


# -- SLA probability -----------------------------------------------------------------


def test_sla_trivial_cases():
    assert qd.sla_probability(qd.GaussianParams([3.0], [[2.0]]), [3.0]) == pytest.approx(0.5)
    p = qd.GaussianParams([1.0, 2.0], np.diag([0.5, 3.0]))
    assert qd.sla_probability(p, [1.0, 2.0]) == pytest.approx(0.25, abs=1e-12)


def test_sla_correlated_monte_carlo():
    p = qd.GaussianParams([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]])
    got = qd.sla_probability(p, [0.0, 0.0])
    x = np.random.default_rng(7).multivariate_normal(p.mean, p.cov, size=10_000_000)
    hits = np.all(x <= 0.0, axis=1)
    mc, se = hits.mean(), hits.std() / math.sqrt(hits.size)
    assert abs(got - mc) <= 3 * se
    assert got == pytest.approx(1 / 3, abs=1e-10)


def test_sla_3d_against_scipy(rng):
    for _ in range(3):
        p = random_gaussian(rng, 3)
        t = p.mean + rng.normal(size=3)
        got, se = qd.sla_probability(p, t, return_error=True)
        assert se <= 1e-4
        ref = stats.multivariate_normal(p.mean, p.cov).cdf(t)
        assert got == pytest.approx(ref, abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**31 - 1), st.integers(0, 2), st.floats(0.01, 2.0))
def test_sla_monotone_in_thresholds(d, seed, k, bump):
    rng = np.random.default_rng(seed)
    p = random_gaussian(rng, d)
    t = p.mean + rng.normal(size=d)
    t2 = t.copy()
    t2[k % d] += bump
    lo = qd.sla_probability(p, t, target_se=1e-5)
    hi = qd.sla_probability(p, t2, target_se=1e-5)
    assert hi >= lo - (5e-5 if d >= 3 else 1e-12)
