"""Arbitrary-interval state transitions on the probability-flow trajectory.

A network output ``f`` at (x_t, t, r) is turned into the state at time r by

    x_r = A(t, r) * x_t + B(t, r) * f

and is trained towards the target that keeps ``B(t, r) * (target_t - f)``
constant in t.  Times may be scalars or per-row arrays (one time per batch row).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, DomainError
from .transport import DEGENERATE_TOL, TransportSpec, _check_range, _raw_coeffs, coeffs

DEFAULT_DDE_EPS = 0.005


@dataclass(frozen=True)
class TransitionCoeffs:
    a: np.ndarray | float
    b: np.ndarray | float
    db_dt: np.ndarray | float
    c: np.ndarray | float


class Kernel(str, enum.Enum):
    RECIPROCAL = "reciprocal"
    SOFT_MIN_SNR = "soft-min-snr"
    SQRT = "sqrt"
    SQUARE = "square"


class Warp(str, enum.Enum):
    IDENTITY = "identity"
    RATIONAL = "rational"
    TANGENT = "tangent"


@dataclass(frozen=True)
class WeightScheme:
    kernel: Kernel = Kernel.SQRT
    warp: Warp = Warp.TANGENT
    sigma_data: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kernel", Kernel(self.kernel))
        object.__setattr__(self, "warp", Warp(self.warp))
        if self.sigma_data <= 0:
            raise DomainError("sigma_data must be positive")


def _col(v, like):
    """Broadcast per-row scalars against a (batch, dim) array."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1 and np.ndim(like) == 2:
        return v[:, None]
    return v


def _coeffs_from_bundles(ct, cr):
    c = ct.sigma_hat * ct.alpha - ct.alpha_hat * ct.sigma
    if np.any(np.abs(c) < DEGENERATE_TOL):
        raise DegenerateError("sigma_hat*alpha - alpha_hat*sigma vanished")
    num_a = cr.alpha * ct.sigma_hat - cr.sigma * ct.alpha_hat
    num_b = cr.sigma * ct.alpha - cr.alpha * ct.sigma
    d_num_b = cr.sigma * ct.d_alpha - cr.alpha * ct.d_sigma
    d_c = (ct.d_sigma_hat * ct.alpha + ct.sigma_hat * ct.d_alpha
           - ct.d_alpha_hat * ct.sigma - ct.alpha_hat * ct.d_sigma)
    db_dt = (d_num_b * c - num_b * d_c) / c**2
    return TransitionCoeffs(num_a / c, num_b / c, db_dt, c)


def _unordered_coeffs(spec, t, r):
    # No r <= t requirement; finite-difference probes straddle t == r.
    t = _check_range(spec, t)
    r = _check_range(spec, r)
    return _coeffs_from_bundles(_raw_coeffs(spec, t), _raw_coeffs(spec, r))


def transition_coeffs(spec: TransportSpec, t, r) -> TransitionCoeffs:
    """A, B, dB/dt and the shared denominator C for the jump t -> r.

    dB/dt comes from the quotient rule on the transport derivatives, so any
    transport with correct first derivatives gets a correct dB/dt.
    """
    if np.any(np.asarray(r) > np.asarray(t)):
        raise DomainError("transition requires r <= t")
    tc = _unordered_coeffs(spec, t, r)
    if np.ndim(t) == 0 and np.ndim(r) == 0:
        tc = TransitionCoeffs(float(tc.a), float(tc.b), float(tc.db_dt), float(tc.c))
    return tc


def x_eps_prediction(x_t, f_out, spec: TransportSpec, t):
    """Recover (x_hat, eps_hat) implied by a diffusion-style output at time t."""
    cb = coeffs(spec, t)
    c = cb.sigma_hat * cb.alpha - cb.alpha_hat * cb.sigma
    if np.any(np.abs(c) < DEGENERATE_TOL):
        raise DegenerateError("degenerate x/eps denominator")
    c = _col(c, x_t)
    x_hat = (_col(cb.sigma_hat, x_t) * x_t - _col(cb.sigma, x_t) * f_out) / c
    eps_hat = (_col(cb.alpha, x_t) * f_out - _col(cb.alpha_hat, x_t) * x_t) / c
    return x_hat, eps_hat


def apply_transition(x_t, f_out, tc: TransitionCoeffs):
    return _col(tc.a, x_t) * x_t + _col(tc.b, x_t) * f_out


def dde(f_frozen, x, eps, t, r, cond, spec: TransportSpec, eps_fd=DEFAULT_DDE_EPS):
    """Central-difference estimate of d f(x_t, t, r) / dt along the noising path.

    ``f_frozen(x_t, t, r, cond)`` is evaluated exactly twice, at t + eps_fd and
    t - eps_fd, with both noisy states rebuilt from the same (x, eps) pair.
    The evaluator is expected to be forward-only (no cached activations).
    """
    if eps_fd <= 0:
        raise DomainError("eps_fd must be positive")
    t = np.asarray(t, dtype=np.float64)
    tp, tm = t + eps_fd, t - eps_fd
    if np.any(tp > spec.t_max) or np.any(tm < spec.t_min):
        raise DomainError(f"t +- {eps_fd} leaves [{spec.t_min}, {spec.t_max}]; clamp t first")
    cp, cm = coeffs(spec, tp), coeffs(spec, tm)
    xp = _col(cp.alpha, x) * x + _col(cp.sigma, x) * eps
    xm = _col(cm.alpha, x) * x + _col(cm.sigma, x) * eps
    fp = np.asarray(f_frozen(xp, tp, r, cond), dtype=np.float64)
    fm = np.asarray(f_frozen(xm, tm, r, cond), dtype=np.float64)
    return (fp - fm) / (2.0 * eps_fd)


def tim_target(x, eps, t, r, df_dt, spec: TransportSpec, tc: TransitionCoeffs | None = None):
    """Regression target for f(x_t, t, r) given the network's time slope ``df_dt``.

    Pass ``tc`` to reuse (or deliberately replace) the transition coefficients.
    """
    cb = coeffs(spec, t)
    if tc is None:
        tc = transition_coeffs(spec, t, r)
    if np.any(np.abs(tc.db_dt) < DEGENERATE_TOL):
        raise DegenerateError("dB/dt vanished; target undefined")
    ratio = _col(tc.b / tc.db_dt, x)
    base = _col(cb.alpha_hat, x) * x + _col(cb.sigma_hat, x) * eps
    slope = _col(cb.d_alpha_hat, x) * x + _col(cb.d_sigma_hat, x) * eps - df_dt
    return base + ratio * slope


def _warp(u, warp):
    u = np.asarray(u, dtype=np.float64)
    if warp is Warp.IDENTITY:
        return u
    if warp is Warp.RATIONAL:
        if np.any(u >= 1.0):
            raise DomainError("rational warp t/(1-t) has a pole at t = 1")
        return u / (1.0 - u)
    if np.any(u >= math.pi / 2):
        raise DomainError("tangent warp has a pole at t = pi/2")
    return np.tan(u)


def interval_weight(t, r, scheme: WeightScheme = WeightScheme()):
    """Loss weight favouring short jumps: kernel(warp(t) - warp(r))."""
    delta = _warp(t, scheme.warp) - _warp(r, scheme.warp)
    if np.any(delta < 0):
        raise DomainError("interval weight needs warp(t) >= warp(r)")
    sd = scheme.sigma_data
    k = scheme.kernel
    if k is Kernel.RECIPROCAL:
        w = 1.0 / (sd + delta)
    elif k is Kernel.SOFT_MIN_SNR:
        w = 1.0 / (sd**2 + delta**2)
    elif k is Kernel.SQRT:
        w = 1.0 / np.sqrt(sd + delta)
    else:
        w = 1.0 / (sd + delta) ** 2
    return float(w) if np.ndim(w) == 0 else w


def identity_residual(f, x, eps, t, r, spec: TransportSpec, h_fd=1e-4):
    """Norm of d/dt [ B(t, r) * (alpha_hat x + sigma_hat eps - f(x_t, t, r)) ].

    Central differences in t with step ``h_fd``; near zero exactly when ``f``
    is a consistent transition function at this point.
    """

    def weighted_residual(s):
        cb = coeffs(spec, s)
        x_s = cb.alpha * x + cb.sigma * eps
        b = _unordered_coeffs(spec, s, r).b
        return b * (cb.alpha_hat * x + cb.sigma_hat * eps - np.asarray(f(x_s, s, r), dtype=np.float64))

    d = (weighted_residual(t + h_fd) - weighted_residual(t - h_fd)) / (2.0 * h_fd)
    return float(np.linalg.norm(d))
