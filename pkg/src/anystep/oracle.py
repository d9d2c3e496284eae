"""Closed-form transition functions and a brute-force sample metric.

The oracles double as evaluators: calling one with ``(x_t, t, r, class_id)``
returns the exact transition output, so they can drive the sampler and the
identity checks in place of a trained network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .transition import _col, _unordered_coeffs
from .transport import DEGENERATE_TOL, TransportSpec, coeffs


@dataclass
class DeltaDataOracle:
    """Data distribution concentrated on a single point ``x0``."""

    x0: np.ndarray
    spec: TransportSpec

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)

    @property
    def dim(self):
        return self.x0.size

    def __call__(self, x_t, t, r, class_id=None):
        cb = coeffs(self.spec, t)
        eps = (x_t - _col(cb.alpha, x_t) * self.x0) / _col(cb.sigma, x_t)
        return delta_exact_f(self, eps, t, r)


def delta_exact_f(oracle: DeltaDataOracle, eps, t, r):
    """Exact f(x_t, t, r) for point-mass data and noise ``eps``.

    Where t == r the diffusion target alpha_hat x0 + sigma_hat eps is returned.
    """
    eps = np.asarray(eps, dtype=np.float64)
    ct, cr = coeffs(oracle.spec, t), coeffs(oracle.spec, r)
    x0 = oracle.x0
    x_t = _col(ct.alpha, eps) * x0 + _col(ct.sigma, eps) * eps
    x_r = _col(cr.alpha, eps) * x0 + _col(cr.sigma, eps) * eps
    tc = _unordered_coeffs(oracle.spec, t, r)
    b = _col(tc.b, eps)
    at_limit = np.abs(b) < DEGENERATE_TOL
    safe_b = np.where(at_limit, 1.0, b)
    jump = (x_r - _col(tc.a, eps) * x_t) / safe_b
    limit = _col(ct.alpha_hat, eps) * x0 + _col(ct.sigma_hat, eps) * eps
    return np.where(at_limit, limit, jump)


@dataclass
class GaussianDataOracle:
    """Axis-aligned Gaussian data N(mean, diag(cov_diag))."""

    mean: np.ndarray
    cov_diag: np.ndarray
    spec: TransportSpec

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov_diag = np.asarray(self.cov_diag, dtype=np.float64)
        if np.any(self.cov_diag < 0):
            raise ValueError("cov_diag must be non-negative")

    @property
    def dim(self):
        return self.mean.size

    def flow(self, x_t, t, r):
        """Exact probability-flow map from time t to time r.

        Per axis the marginals are Gaussian and the flow is the monotone
        affine map between them.
        """
        ct, cr = coeffs(self.spec, t), coeffs(self.spec, r)
        vt = _col(ct.alpha, x_t) ** 2 * self.cov_diag + _col(ct.sigma, x_t) ** 2
        vr = _col(cr.alpha, x_t) ** 2 * self.cov_diag + _col(cr.sigma, x_t) ** 2
        return _col(cr.alpha, x_t) * self.mean + np.sqrt(vr / vt) * (x_t - _col(ct.alpha, x_t) * self.mean)

    def __call__(self, x_t, t, r, class_id=None):
        x_t = np.asarray(x_t, dtype=np.float64)
        tc = _unordered_coeffs(self.spec, t, r)
        b = _col(tc.b, x_t)
        at_limit = np.abs(b) < DEGENERATE_TOL
        x_r = self.flow(x_t, t, r)
        jump = (x_r - _col(tc.a, x_t) * x_t) / np.where(at_limit, 1.0, b)
        if not np.any(at_limit):
            return jump
        ct = coeffs(self.spec, t)
        x_hat = gaussian_exact_xpred(self, x_t, t)
        eps_hat = (x_t - _col(ct.alpha, x_t) * x_hat) / _col(ct.sigma, x_t)
        limit = _col(ct.alpha_hat, x_t) * x_hat + _col(ct.sigma_hat, x_t) * eps_hat
        return np.where(at_limit, limit, jump)

    def sample(self, n, rng):
        return self.mean + np.sqrt(self.cov_diag) * rng.standard_normal((n, self.mean.size))


def gaussian_exact_xpred(oracle: GaussianDataOracle, x_t, t):
    """Posterior mean E[x | x_t] under the Gaussian data model."""
    cb = coeffs(oracle.spec, t)
    a, s = _col(cb.alpha, x_t), _col(cb.sigma, x_t)
    cov, mean = oracle.cov_diag, oracle.mean
    return (a * cov * x_t + s**2 * mean) / (a**2 * cov + s**2)


def energy_distance(samples_a, samples_b):
    """2 E|a-b| - E|a-a'| - E|b-b'| over all pairs (V-statistic, diagonals included)."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("energy distance needs non-empty sample sets")
    # np.mean reduces with pairwise summation, so the value is order-stable.
    return float(2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())
