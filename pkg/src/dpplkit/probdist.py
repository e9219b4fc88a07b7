"""Multivariate Gaussian values, reparameterized sampling and CRPS.

The closed-form Gaussian CRPS is the training loss of the whole toolkit, so
its derivatives are provided analytically.  The Monte-Carlo estimator is kept
only as an independent check of the closed form.

Randomness: every stochastic routine takes an explicit 64-bit seed and builds
a fresh ``numpy.random.Generator`` backed by PCG64 (see :func:`make_rng`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .errors import GradientUndefinedError, InvalidArgumentError

PRNG_NAME = "PCG64"

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_SYM_RTOL = 1e-12
_PSD_RTOL = 1e-10


def make_rng(seed, *stream):
    """Deterministic PCG64 generator for ``seed`` and an optional stream path.

    ``stream`` entries (e.g. a sample index) are mixed into the seed sequence,
    so per-item generators are independent of the order they are created in.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) & 0xFFFFFFFFFFFFFFFF for s in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def norm_cdf(z):
    """Standard normal CDF through erfc (absolute error below 1e-15)."""
    return 0.5 * erfc(-np.asarray(z, dtype=float) / _SQRT2)


def norm_pdf(z):
    z = np.asarray(z, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


@dataclass(frozen=True, eq=False)
class GaussianVec:
    """Multivariate Gaussian with diagonal or dense covariance.

    ``cov`` is either a length-``n`` vector of variances (diagonal
    covariance) or an ``n x n`` symmetric PSD matrix.  Dense input is stored
    symmetrized.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float)
        n = mean.size
        if n < 1:
            raise InvalidArgumentError("GaussianVec needs at least one coordinate")
        if not np.all(np.isfinite(mean)):
            raise InvalidArgumentError("mean has non-finite entries")
        if cov.ndim == 1:
            if cov.shape != (n,):
                raise InvalidArgumentError(f"diagonal covariance has length {cov.size}, expected {n}")
            if not np.all(np.isfinite(cov)) or np.any(cov < 0):
                raise InvalidArgumentError("variances must be finite and non-negative")
        elif cov.ndim == 2:
            if cov.shape != (n, n):
                raise InvalidArgumentError(f"dense covariance has shape {cov.shape}, expected {(n, n)}")
            if not np.all(np.isfinite(cov)):
                raise InvalidArgumentError("covariance has non-finite entries")
            scale = max(float(np.max(np.abs(cov))), np.finfo(float).tiny)
            if np.max(np.abs(cov - cov.T)) > _SYM_RTOL * scale:
                raise InvalidArgumentError("dense covariance is not symmetric")
            cov = 0.5 * (cov + cov.T)
            eig = np.linalg.eigvalsh(cov)
            if eig[0] < -_PSD_RTOL * max(abs(eig[-1]), abs(eig[0])):
                raise InvalidArgumentError(f"dense covariance is indefinite (min eigenvalue {eig[0]:.3e})")
        else:
            raise InvalidArgumentError("covariance must be a vector or a square matrix")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def n(self):
        return self.mean.size

    @property
    def is_diagonal(self):
        return self.cov.ndim == 1

    @property
    def variances(self):
        """Marginal variances, diag(Sigma)."""
        return self.cov if self.is_diagonal else np.diag(self.cov).copy()

    @property
    def std(self):
        return np.sqrt(np.maximum(self.variances, 0.0))

    def dense_cov(self):
        return np.diag(self.cov) if self.is_diagonal else self.cov.copy()


@dataclass(frozen=True)
class CrpsGrad:
    """Gradient of the summed CRPS w.r.t. means and marginal std deviations."""

    d_mu: np.ndarray
    d_sigma: np.ndarray


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidArgumentError("non-finite input")


def crps_gaussian(mu, sigma, y):
    """Elementwise Gaussian CRPS; broadcasts like numpy.

    ``sigma == 0`` gives the point-mass limit ``|y - mu|``.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_finite(mu, sigma, y)
    if np.any(sigma < 0):
        raise InvalidArgumentError("sigma must be non-negative")
    diff = y - mu
    pos = sigma > 0
    safe = np.where(pos, sigma, 1.0)
    # Beyond |z| = 40, 2P(z) - 1 = sign(z) and p(z) = 0 in double precision.
    tail = np.abs(diff) > 40.0 * safe
    z = np.where(tail, 0.0, diff) / safe
    val = safe * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z) - _INV_SQRT_PI)
    val = np.where(tail, np.abs(diff) - safe * _INV_SQRT_PI, val)
    # Rounding can push the value a hair below zero for |z| >> 1.
    return np.where(pos, np.maximum(val, 0.0), np.abs(diff))


def crps_gaussian_scalar(mu, sigma, y):
    return float(crps_gaussian(float(mu), float(sigma), float(y)))


def crps_gaussian_sum(dist, y):
    """Sum of the marginal Gaussian CRPS values of ``dist`` at ``y``."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != dist.n:
        raise InvalidArgumentError(f"observation has length {y.size}, expected {dist.n}")
    return float(np.sum(crps_gaussian(dist.mean, dist.std, y)))


def crps_gaussian_grad_arrays(mu, sigma, y):
    """Elementwise (dCRPS/dmu, dCRPS/dsigma); sigma must be strictly positive."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise GradientUndefinedError("CRPS gradient is undefined for sigma == 0")
    z = (np.asarray(y, dtype=float) - np.asarray(mu, dtype=float)) / sigma
    return 1.0 - 2.0 * norm_cdf(z), 2.0 * norm_pdf(z) - _INV_SQRT_PI


def crps_gaussian_grad(dist, y):
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != dist.n:
        raise InvalidArgumentError(f"observation has length {y.size}, expected {dist.n}")
    d_mu, d_sigma = crps_gaussian_grad_arrays(dist.mean, dist.std, y)
    return CrpsGrad(d_mu=d_mu, d_sigma=d_sigma)


def nll_gaussian(dist, y):
    """Diagonal Gaussian negative log-likelihood (marginals only)."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != dist.n:
        raise InvalidArgumentError(f"observation has length {y.size}, expected {dist.n}")
    var = dist.variances
    if np.any(var <= 0):
        raise InvalidArgumentError("NLL needs strictly positive variances")
    r = y - dist.mean
    return float(np.sum(0.5 * np.log(2.0 * np.pi * var) + r * r / (2.0 * var)))


def covariance_root(cov):
    """Square root ``L`` with ``L @ L.T == cov``.

    Lower Cholesky factor when it exists; otherwise (singular PSD, which is
    what projected covariances look like) a clipped eigen-root.  Eigenvalues
    below ``-1e-10 * ||cov||`` are a hard error.
    """
    cov = 0.5 * (cov + cov.T)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(cov)
    tol = _PSD_RTOL * max(abs(w[-1]), abs(w[0]))
    if w[0] < -tol:
        raise InvalidArgumentError(f"covariance is indefinite (min eigenvalue {w[0]:.3e})")
    return v * np.sqrt(np.clip(w, 0.0, None))


def sample(dist, count, seed):
    """Reparameterized draws ``mu + Sigma^{1/2} xi``, shape ``(count, n)``."""
    count = int(count)
    if count < 1:
        raise InvalidArgumentError("count must be positive")
    xi = make_rng(seed).standard_normal((count, dist.n))
    if dist.is_diagonal:
        return dist.mean + xi * np.sqrt(dist.cov)
    return dist.mean + xi @ covariance_root(dist.cov).T


def _pairwise_abs_stats(s):
    """For each column of the sorted array ``s`` (m x n) return
    (sum over i<j of |s_i - s_j|, per-row sums of |s_i - s_j| over j)."""
    m = s.shape[0]
    idx = np.arange(m, dtype=float)[:, None]
    pair_total = np.sum(s * (2.0 * idx - m + 1.0), axis=0)
    prefix = np.cumsum(s, axis=0)
    total = prefix[-1]
    below = s * idx - (prefix - s)
    above = (total - prefix) - s * (m - 1.0 - idx)
    return pair_total, below + above


def crps_monte_carlo(dist, y, count, seed, return_stderr=False):
    """Sample estimate of the summed CRPS: ``E|Y-y| - 0.5 E|Y-Y'|``.

    The pair term is the unbiased U-statistic over all sample pairs, computed
    by sorting.  With ``return_stderr`` a (value, standard error) pair is
    returned; the error uses the first-order (Hoeffding) projection of the
    estimator.
    """
    count = int(count)
    if count < 2:
        raise InvalidArgumentError("crps_monte_carlo needs count >= 2")
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != dist.n:
        raise InvalidArgumentError(f"observation has length {y.size}, expected {dist.n}")
    draws = sample(dist, count, seed)
    value, infl = _mc_parts(draws, y)
    if not return_stderr:
        return value
    return value, float(np.std(infl, ddof=1) / math.sqrt(count))


def _mc_parts(draws, y):
    m = draws.shape[0]
    abs_obs = np.abs(draws - y)
    order = np.argsort(draws, axis=0, kind="stable")
    s = np.take_along_axis(draws, order, axis=0)
    pair_total, row_sums = _pairwise_abs_stats(s)
    value = float(np.sum(abs_obs.mean(axis=0) - pair_total / (m * (m - 1.0))))
    g = np.empty_like(row_sums)
    np.put_along_axis(g, order, row_sums / (m - 1.0), axis=0)
    infl = np.sum(abs_obs - g, axis=1)
    return value, infl
