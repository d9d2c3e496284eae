"""Diffusion transports: forward coefficients, target coefficients and time laws.

Every transport is described by four time-dependent scalars,

    x_t    = alpha(t) * x + sigma(t) * eps          (noising)
    target = alpha_hat(t) * x + sigma_hat(t) * eps  (what a diffusion net regresses)

plus their first derivatives in t.  All functions accept python floats or
numpy arrays of times and broadcast elementwise.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import DegenerateError, DomainError

DEGENERATE_TOL = 1e-12


class Kind(str, enum.Enum):
    OT_FM = "ot-fm"
    TRIGFLOW = "trigflow"
    EDM = "edm"
    VP = "vp"
    VE = "ve"


# (t_min, t_max) used when the caller does not pin the range.
_DEFAULT_RANGE = {
    Kind.OT_FM: (1e-4, 1.0 - 1e-4),
    Kind.TRIGFLOW: (1e-4, math.pi / 2 - 1e-4),
    Kind.EDM: (1e-4, 80.0),
    Kind.VP: (1e-4, 1.0),
}


@dataclass(frozen=True)
class TransportSpec:
    """One diffusion transport and its constants.

    ``t_min``/``t_max`` default to a per-kind range; for VE the range is
    ``[ve_sigma_min, ve_sigma_max]``.
    """

    kind: Kind = Kind.OT_FM
    sigma_data: float = 1.0
    t_min: float | None = None
    t_max: float | None = None
    vp_beta_d: float = 19.9
    vp_beta_min: float = 0.1
    vp_T: int = 1000
    ve_sigma_min: float = 0.01
    ve_sigma_max: float = 50.0
    p_mean: float = -0.4
    p_std: float = 1.0

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is Kind.VE:
            lo, hi = self.ve_sigma_min, self.ve_sigma_max
        else:
            lo, hi = _DEFAULT_RANGE[kind]
        if self.t_min is None:
            object.__setattr__(self, "t_min", float(lo))
        if self.t_max is None:
            object.__setattr__(self, "t_max", float(hi))
        if not self.t_min < self.t_max:
            raise DomainError(f"t_min={self.t_min} must be below t_max={self.t_max}")
        if self.sigma_data <= 0 or self.ve_sigma_min <= 0 or self.ve_sigma_max <= 0:
            raise DomainError("sigma bounds must be positive")
        if self.p_std <= 0:
            raise DomainError("p_std must be positive")
        if kind in (Kind.EDM, Kind.VE) and self.t_min <= 0:
            raise DomainError(f"{kind.value} needs t_min > 0 (log time scaling)")
        grid = np.linspace(self.t_min, self.t_max, 65)
        if np.any(np.abs(_denominator(coeffs(self, grid))) < DEGENERATE_TOL):
            raise DegenerateError(f"{kind.value}: sigma_hat*alpha - alpha_hat*sigma vanishes in range")

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class CoeffBundle:
    alpha: np.ndarray | float
    sigma: np.ndarray | float
    alpha_hat: np.ndarray | float
    sigma_hat: np.ndarray | float
    d_alpha: np.ndarray | float
    d_sigma: np.ndarray | float
    d_alpha_hat: np.ndarray | float
    d_sigma_hat: np.ndarray | float


def _denominator(cb):
    return cb.sigma_hat * cb.alpha - cb.alpha_hat * cb.sigma


def _check_range(spec, t):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t_arr)) or np.any(t_arr < spec.t_min) or np.any(t_arr > spec.t_max):
        raise DomainError(f"t outside [{spec.t_min}, {spec.t_max}] for {spec.kind.value}")
    return t_arr


def _vp_exponent(spec, t):
    return 0.5 * spec.vp_beta_d * t**2 + spec.vp_beta_min * t


def vp_beta(spec, t):
    """beta_t = sqrt(exp(beta_d t^2 / 2 + beta_min t) - 1)."""
    return np.sqrt(np.expm1(_vp_exponent(spec, np.asarray(t, dtype=np.float64))))


def _raw_coeffs(spec, t):
    """Closed forms without range checks. Used by coeffs and by finite-difference probes."""
    k = spec.kind
    one = np.ones_like(t)
    zero = np.zeros_like(t)
    if k is Kind.OT_FM:
        return CoeffBundle(1.0 - t, t, -one, one, -one, one, zero, zero)
    if k is Kind.TRIGFLOW:
        c, s = np.cos(t), np.sin(t)
        return CoeffBundle(c, s, -s, c, -s, c, -c, -s)
    if k is Kind.EDM:
        sd = spec.sigma_data
        s = np.sqrt(t**2 + sd**2)
        s3 = s**3
        return CoeffBundle(
            1.0 / s, t / s, t / (sd * s), -sd / s,
            -t / s3, sd**2 / s3, sd / s3, sd * t / s3,
        )
    if k is Kind.VP:
        # alpha = 1/sqrt(beta^2 + 1) = exp(-E/2), sigma = beta * alpha = sqrt(1 - exp(-E))
        e = _vp_exponent(spec, t)
        de = spec.vp_beta_d * t + spec.vp_beta_min
        alpha = np.exp(-0.5 * e)
        sigma = np.sqrt(-np.expm1(-e))
        d_alpha = -0.5 * de * alpha
        d_sigma = 0.5 * de * alpha**2 / sigma
        return CoeffBundle(alpha, sigma, zero, one, d_alpha, d_sigma, zero, zero)
    if k is Kind.VE:
        return CoeffBundle(one, t, zero, -one, zero, one, zero, zero)
    raise ValueError(f"unknown transport kind {k!r}")


def coeffs(spec: TransportSpec, t) -> CoeffBundle:
    """All eight coefficients (values and t-derivatives) at time ``t``."""
    t_arr = _check_range(spec, t)
    cb = _raw_coeffs(spec, t_arr)
    if np.ndim(t) == 0:
        cb = CoeffBundle(*(float(getattr(cb, n)) for n in _FIELDS))
    return cb


_FIELDS = ("alpha", "sigma", "alpha_hat", "sigma_hat", "d_alpha", "d_sigma", "d_alpha_hat", "d_sigma_hat")


def c_noise(spec: TransportSpec, t):
    """Time scaling fed to the network."""
    t_arr = np.asarray(t, dtype=np.float64)
    k = spec.kind
    if k in (Kind.OT_FM, Kind.TRIGFLOW):
        out = t_arr.copy()
    elif k is Kind.VP:
        out = (spec.vp_T - 1) * t_arr
    else:
        if np.any(t_arr <= 0):
            raise DomainError(f"{k.value} c_noise takes a log; got t <= 0")
        out = 0.25 * np.log(t_arr) if k is Kind.EDM else np.log(0.5 * t_arr)
    return float(out) if np.ndim(t) == 0 else out


def time_from_noise_level(spec: TransportSpec, level):
    """Map a drawn noise level to a timestep (unclamped).

    For log-normal kinds ``level`` is sigma; for VP/VE it is the uniform draw.
    VE uses geometric interpolation sigma_max * (sigma_min/sigma_max)^u.
    """
    s = np.asarray(level, dtype=np.float64)
    k = spec.kind
    if k is Kind.OT_FM:
        t = s / (1.0 + s)
    elif k is Kind.TRIGFLOW:
        t = np.arctan(s / spec.sigma_data)
    elif k in (Kind.EDM, Kind.VP):
        t = s
    else:
        t = spec.ve_sigma_max * (spec.ve_sigma_min / spec.ve_sigma_max) ** s
    return float(t) if np.ndim(level) == 0 else t


def sample_time(spec: TransportSpec, rng: np.random.Generator, size=None):
    """Draw training times from the transport's time distribution, clamped to range."""
    if spec.kind in (Kind.OT_FM, Kind.TRIGFLOW, Kind.EDM):
        level = np.exp(rng.normal(spec.p_mean, spec.p_std, size=size))
    elif spec.kind is Kind.VP:
        level = rng.uniform(spec.t_min, 1.0, size=size)
    else:
        level = rng.uniform(0.0, 1.0, size=size)
    t = np.clip(time_from_noise_level(spec, level), spec.t_min, spec.t_max)
    return float(t) if size is None else t


def shift_timestep(t_n, n, m):
    """Resolution-dependent shift of a unit-interval timestep from n to m pixels."""
    k = math.sqrt(m / n)
    t_n = np.asarray(t_n, dtype=np.float64)
    out = k * t_n / (1.0 + (k - 1.0) * t_n)
    return float(out) if out.ndim == 0 else out
