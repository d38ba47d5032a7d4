"""Gaussian QoS distributions: fitting, kernels, distances, likelihoods, SLA probabilities.

Latency-like KPIs are lognormal; they are carried in the log domain so that
every KPI vector is modelled by one multivariate Gaussian.
"""
from dataclasses import dataclass, field
import math

import numpy as np
from scipy import integrate, special
from scipy.stats import qmc

from .errors import InsufficientDataError, InvariantError, NumericalDomainError

COV_FLOOR = 1e-6
DET_FLOOR = 1e-300
KERNEL_VARIANTS = ("paper", "plain_affinity")

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianParams:
    """Mean vector and covariance of a d-dimensional Gaussian."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if mean.ndim != 1:
            raise InvariantError("mean must be a vector")
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise InvariantError(f"cov must be {d}x{d}, got {cov.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise InvariantError("non-finite Gaussian parameters")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10:
            raise InvariantError("cov is not symmetric")
        if d and np.linalg.eigvalsh(cov)[0] < -1e-9:
            raise InvariantError("cov is not positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def std(self):
        return np.sqrt(np.diag(self.cov))

    def marginal(self, k):
        return GaussianParams(self.mean[[k]], self.cov[np.ix_([k], [k])])


@dataclass(frozen=True)
class KpiSpec:
    """KPI labels with a per-KPI ``identity`` or ``log`` transform."""

    names: tuple
    transforms: tuple = field(default=None)

    def __post_init__(self):
        names = tuple(self.names)
        transforms = tuple(self.transforms) if self.transforms is not None else ("identity",) * len(names)
        if len(names) != len(transforms):
            raise InvariantError("names and transforms must have equal length")
        if not names:
            raise InvariantError("at least one KPI is required")
        bad = [t for t in transforms if t not in ("identity", "log")]
        if bad:
            raise InvariantError(f"unknown transform(s) {bad}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "transforms", transforms)

    @property
    def dim(self):
        return len(self.names)

    @property
    def log_mask(self):
        return np.array([t == "log" for t in self.transforms])

    def forward(self, raw):
        """Map raw KPI samples (..., d) into the Gaussian domain."""
        x = np.array(raw, dtype=np.float64, copy=True)
        mask = self.log_mask
        if mask.any():
            if np.any(x[..., mask] <= 0):
                raise InvariantError("log-transformed KPIs must be strictly positive")
            x[..., mask] = np.log(x[..., mask])
        return x

    def inverse(self, z):
        x = np.array(z, dtype=np.float64, copy=True)
        mask = self.log_mask
        x[..., mask] = np.exp(x[..., mask])
        return x


def default_kpis():
    return KpiSpec(("latency", "jitter", "rsrp"), ("log", "log", "identity"))


# -- fitting ---------------------------------------------------------------


def fit_gaussian(window, spec=None, eps=COV_FLOOR):
    """MLE Gaussian (divisor n) of a window of raw KPI samples, plus ``eps*I``."""
    x = np.atleast_2d(np.asarray(window, dtype=np.float64))
    if spec is not None:
        if x.shape[1] != spec.dim:
            raise InvariantError(f"expected {spec.dim} KPIs, got {x.shape[1]}")
        x = spec.forward(x)
    n, d = x.shape
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {n}")
    mean = x.mean(axis=0)
    r = x - mean
    cov = r.T @ r / n
    cov = 0.5 * (cov + cov.T) + eps * np.eye(d)
    return GaussianParams(mean, cov)


def rolling_fit(z, ends, width, eps=COV_FLOOR):
    """Fit Gaussians to the windows ``z[e - width:e]`` for every index in ``ends``.

    ``z`` is already in the Gaussian domain, shape (T, d). Returns
    ``(means, covs)`` with shapes (m, d) and (m, d, d). Uses centred cumulative
    sums so each window costs O(d^2).
    """
    z = np.asarray(z, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.int64)
    if width < 2:
        raise InsufficientDataError("window width must be >= 2")
    if ends.size and (ends.min() < width or ends.max() > z.shape[0]):
        raise InvariantError("window falls outside the stream")
    d = z.shape[1]
    c = z - z.mean(axis=0)
    s1 = np.vstack([np.zeros((1, d)), np.cumsum(c, axis=0)])
    outer = (c[:, :, None] * c[:, None, :]).reshape(len(c), d * d)
    s2 = np.vstack([np.zeros((1, d * d)), np.cumsum(outer, axis=0)])
    m1 = (s1[ends] - s1[ends - width]) / width
    m2 = ((s2[ends] - s2[ends - width]) / width).reshape(-1, d, d)
    cov = m2 - m1[:, :, None] * m1[:, None, :]
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    # cumulative-sum cancellation can leave -1e-12 on a zero-variance window
    idx = np.arange(d)
    cov[:, idx, idx] = np.maximum(cov[:, idx, idx], 0.0)
    cov += eps * np.eye(d)
    return m1 + z.mean(axis=0), cov


def moment_match(means, covs, eps=0.0):
    """Single Gaussian with the mean and covariance of an equal-weight mixture."""
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    mu = means.mean(axis=0)
    r = means - mu
    cov = covs.mean(axis=0) + r.T @ r / len(means)
    cov = 0.5 * (cov + cov.T) + eps * np.eye(mu.shape[0])
    return GaussianParams(mu, cov)


# -- Cholesky parameterisation ----------------------------------------------


def tril_size(d):
    return d * (d + 1) // 2


def dim_from_output(q):
    """Recover d from an output width d + d(d+1)/2."""
    d = int(round((math.sqrt(9 + 8 * q) - 3) / 2))
    if d + tril_size(d) != q:
        raise InvariantError(f"output width {q} is not d + d(d+1)/2")
    return d


def tilde_to_chol(tilde_l, d):
    """Lower-triangular L from unconstrained entries; the diagonal is exp-mapped.

    Works on stacked inputs of shape (..., d(d+1)/2).
    """
    t = np.asarray(tilde_l, dtype=np.float64)
    if np.any(np.abs(t) > 700.0):
        raise NumericalDomainError("Cholesky entry magnitude exceeds 700; exp would overflow")
    rows, cols = np.tril_indices(d)
    L = np.zeros(t.shape[:-1] + (d, d))
    vals = np.where(rows == cols, np.exp(t), t)
    L[..., rows, cols] = vals
    return L


def cov_to_tilde(cov):
    """Inverse map: Cholesky-factor ``cov`` and log its diagonal."""
    cov = np.asarray(cov, dtype=np.float64)
    d = cov.shape[-1]
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalDomainError("covariance is not positive definite") from exc
    rows, cols = np.tril_indices(d)
    vals = L[..., rows, cols]
    diag = rows == cols
    vals[..., diag] = np.log(vals[..., diag])
    return vals


def params_to_vector(p):
    """Flatten a Gaussian to the target layout ``[mean, tilde_l]``."""
    return np.concatenate([p.mean, cov_to_tilde(p.cov)])


def vector_to_params(y, d=None):
    y = np.asarray(y, dtype=np.float64)
    d = dim_from_output(y.shape[-1]) if d is None else d
    L = tilde_to_chol(y[d:], d)
    return GaussianParams(y[:d], L @ L.T)


def vectors_to_moments(y, d=None):
    """Stacked version of :func:`vector_to_params`: returns (means, covs)."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    d = dim_from_output(y.shape[-1]) if d is None else d
    L = tilde_to_chol(y[:, d:], d)
    return y[:, :d].copy(), L @ np.swapaxes(L, 1, 2)


# -- kernels and distances ---------------------------------------------------


def _slogdet_pd(m, what):
    sign, logdet = np.linalg.slogdet(m)
    if sign <= 0 or logdet <= math.log(DET_FLOOR):
        raise NumericalDomainError(f"{what} is singular (determinant below {DET_FLOOR})")
    return logdet


def bhattacharyya_affinity(p, q):
    """Closed-form affinity of two Gaussians, in (0, 1]."""
    if p.dim != q.dim:
        raise InvariantError("dimension mismatch")
    mid = 0.5 * (p.cov + q.cov)
    ld_mid = _slogdet_pd(mid, "midpoint covariance")
    ld_p = _slogdet_pd(p.cov, "covariance")
    ld_q = _slogdet_pd(q.cov, "covariance")
    delta = p.mean - q.mean
    maha = float(delta @ np.linalg.solve(mid, delta))
    return math.exp(0.25 * (ld_p + ld_q) - 0.5 * ld_mid - 0.125 * maha)


def hellinger_kernel(p, q, variant="paper"):
    """Hellinger-type kernel between two Gaussians.

    ``variant="paper"`` returns ``exp(affinity)`` (the affinity wrapped in an
    exponential); ``"plain_affinity"`` returns the affinity itself.
    """
    aff = bhattacharyya_affinity(p, q)
    if variant == "paper":
        return math.exp(aff)
    if variant == "plain_affinity":
        return aff
    raise ValueError(f"unknown kernel variant {variant!r}")


def kernel_matrix(gaussians, variant="paper"):
    n = len(gaussians)
    K = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            K[i, j] = K[j, i] = hellinger_kernel(gaussians[i], gaussians[j], variant)
    return K


def laplacian_distance(K):
    """Graph Laplacian ``diag(K 1) - K`` used as the pairwise distance matrix."""
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise InvariantError("kernel matrix must be square")
    if not np.array_equal(K, K.T):
        if np.max(np.abs(K - K.T)) > 1e-12:
            raise InvariantError("kernel matrix is not symmetric")
        K = 0.5 * (K + K.T)
    if np.any(K <= 0):
        raise InvariantError("kernel entries must be strictly positive")
    D = -K.copy()
    # off-diagonal sum per row keeps the row sums at exactly zero
    off = K.sum(axis=1) - np.diag(K)
    np.fill_diagonal(D, off)
    return D


def distance_matrix(gaussians, variant="paper"):
    return laplacian_distance(kernel_matrix(gaussians, variant))


# -- likelihoods -------------------------------------------------------------


def _chol(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalDomainError("covariance is not positive definite") from exc


def nll(p, sample):
    """Negative log density of ``sample`` under ``p``."""
    x = np.asarray(sample, dtype=np.float64)
    L = _chol(p.cov)
    r = np.linalg.solve(L, x - p.mean)
    return 0.5 * (p.dim * _LOG_2PI + float(r @ r)) + float(np.sum(np.log(np.diag(L))))


def expected_nll(means, covs, emp_means, emp_covs):
    """Average NLL of samples with the given empirical moments under N(means, covs).

    The average of ``-log N(x; mu, S)`` over a sample set depends on the set
    only through its mean and (divisor-n) covariance, so this equals the mean
    per-sample NLL of the realised window. Inputs are stacked: (m, d), (m, d, d).
    """
    means = np.atleast_2d(means)
    covs = np.asarray(covs, dtype=np.float64).reshape(means.shape[0], means.shape[1], means.shape[1])
    emp_means = np.atleast_2d(emp_means)
    emp_covs = np.asarray(emp_covs, dtype=np.float64).reshape(covs.shape)
    d = means.shape[1]
    try:
        L = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError as exc:
        raise NumericalDomainError("predicted covariance is not positive definite") from exc
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    inv = np.linalg.inv(covs)
    delta = emp_means - means
    trace = np.einsum("nij,nji->n", inv, emp_covs)
    maha = np.einsum("ni,nij,nj->n", delta, inv, delta)
    return 0.5 * (d * _LOG_2PI + logdet + trace + maha)


# -- SLA probability ---------------------------------------------------------


def _bvn_cdf(h, k, rho):
    """P(X <= h, Y <= k) for standard bivariate normal with correlation rho."""
    if h == -np.inf or k == -np.inf:
        return 0.0
    if h == np.inf:
        return float(special.ndtr(k))
    if k == np.inf:
        return float(special.ndtr(h))
    if rho >= 1.0:
        return float(special.ndtr(min(h, k)))
    if rho <= -1.0:
        return max(0.0, float(special.ndtr(h) + special.ndtr(k) - 1.0))
    base = float(special.ndtr(h) * special.ndtr(k))
    if rho == 0.0:
        return base
    hk = h * k
    hs = h * h + k * k

    # |asin(rho)| < pi/2 here, so cos^2 stays positive on the whole interval
    def integrand(theta):
        s = math.sin(theta)
        return math.exp(-(hs - 2.0 * hk * s) / (2.0 * (1.0 - s * s)))

    val, _ = integrate.quad(integrand, 0.0, math.asin(rho), epsabs=1e-14, epsrel=1e-12, limit=200)
    return min(1.0, max(0.0, base + val / (2.0 * math.pi)))


def _genz_qmc(b, L, target_se, seed, max_points=2**20, n_rand=16):
    """Genz separation-of-variables estimate of P(X <= b), X ~ N(0, L L^T).

    Randomised Sobol' replicates supply the standard error.
    """
    d = len(b)
    n = 2**10
    while True:
        estimates = np.empty(n_rand)
        for r in range(n_rand):
            w = qmc.Sobol(d=max(d - 1, 1), scramble=True, seed=seed + r).random(n)
            e = np.full(n, special.ndtr(b[0] / L[0, 0]))
            f = e.copy()
            y = np.zeros((n, d))
            for i in range(1, d):
                u = np.clip(w[:, i - 1] * e, 1e-300, 1.0 - 1e-16)
                y[:, i - 1] = special.ndtri(u)
                e = special.ndtr((b[i] - y[:, :i] @ L[i, :i]) / L[i, i])
                f *= e
            estimates[r] = f.mean()
        se = estimates.std(ddof=1) / math.sqrt(n_rand)
        if se <= target_se or n >= max_points:
            return float(estimates.mean()), float(se)
        n *= 4


def sla_probability(p, thresholds, return_error=False, target_se=1e-4, seed=0):
    """Probability that every KPI stays at or below its threshold.

    ``thresholds`` must be in the same (possibly log-transformed) domain as
    ``p``. One and two dimensions use deterministic quadrature; three and more
    use randomised quasi-Monte Carlo with standard error at most ``target_se``.
    """
    t = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    if t.shape != (p.dim,):
        raise InvariantError("threshold length must equal the distribution dimension")
    std = p.std
    if np.any(std <= 0):
        raise NumericalDomainError("degenerate marginal variance")
    z = (t - p.mean) / std
    se = 0.0
    if p.dim == 1:
        prob = float(special.ndtr(z[0]))
    elif p.dim == 2:
        rho = float(p.cov[0, 1] / (std[0] * std[1]))
        prob = _bvn_cdf(float(z[0]), float(z[1]), rho)
    else:
        corr = p.cov / np.outer(std, std)
        finite = np.isfinite(z)
        if np.any(z[~finite] < 0):
            prob = 0.0
        elif not finite.any():
            prob = 1.0
        else:
            sub = np.flatnonzero(finite)
            L = _chol(corr[np.ix_(sub, sub)])
            prob, se = _genz_qmc(z[sub], L, target_se, seed)
    return (prob, se) if return_error else prob
