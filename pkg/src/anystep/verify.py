"""Self-check battery behind ``anystep verify``.

Each check measures one property against a closed form or an independent
numerical route and reports a number next to its threshold.  ``fast`` runs in
well under a minute; ``full`` adds the Gaussian-oracle sampling check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import network, sampler
from .network import Backbone, NetworkConfig
from .oracle import DeltaDataOracle, GaussianDataOracle, energy_distance, gaussian_exact_xpred
from .transition import (TransitionCoeffs, dde, identity_residual, tim_target, transition_coeffs)
from .transport import Kind, TransportSpec, coeffs, shift_timestep

ALL_KINDS = tuple(Kind)
X0 = np.array([0.5, -0.5])


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: str
    seconds: float = 0.0


def _coeff_route(corrupt_db_dt):
    """transition_coeffs, optionally with dB/dt scaled (harness mutation hook)."""
    if not corrupt_db_dt:
        return transition_coeffs

    def corrupted(spec, t, r):
        tc = transition_coeffs(spec, t, r)
        return TransitionCoeffs(tc.a, tc.b, tc.db_dt * (1.0 + corrupt_db_dt), tc.c)

    return corrupted


def _pairs(spec, n, rng, margin=1e-3):
    lo, hi = spec.t_min + margin, spec.t_max - margin
    a, b = rng.uniform(lo, hi, n), rng.uniform(lo, hi, n)
    return np.maximum(a, b), np.minimum(a, b)


# -- transport -------------------------------------------------------------

def derivative_error(spec, n=50, h=1e-5, seed=0):
    """Worst relative gap between analytic derivatives and central differences."""
    rng = np.random.default_rng(seed)
    lo, hi = spec.t_min + 10 * h, spec.t_max - 10 * h
    worst = 0.0
    for t in rng.uniform(lo, hi, n):
        c, cp, cm = coeffs(spec, t), coeffs(spec, t + h), coeffs(spec, t - h)
        for name in ("alpha", "sigma", "alpha_hat", "sigma_hat"):
            fd = (getattr(cp, name) - getattr(cm, name)) / (2 * h)
            an = getattr(c, "d_" + name)
            worst = max(worst, abs(fd - an) / max(abs(an), 1e-3))
    return worst


def closed_form_transition(spec, t, r):
    """Hand-derived (A, B, dB/dt) for the transports where they are simple."""
    if spec.kind is Kind.OT_FM:
        return np.ones_like(t), r - t, -np.ones_like(t)
    if spec.kind is Kind.TRIGFLOW:
        return np.cos(t - r), -np.sin(t - r), -np.cos(t - r)
    if spec.kind is Kind.VE:
        return np.ones_like(t), t - r, np.ones_like(t)
    raise ValueError(f"no closed form for {spec.kind.value}")


def closed_form_error(spec, n=100, seed=0, route=transition_coeffs):
    rng = np.random.default_rng(seed)
    t, r = _pairs(spec, n, rng)
    tc = route(spec, t, r)
    a, b, db = closed_form_transition(spec, t, r)
    return float(max(np.max(np.abs(tc.a - a)), np.max(np.abs(tc.b - b)), np.max(np.abs(tc.db_dt - db))))


def db_dt_fd_error(spec, n=100, seed=0, h=1e-6, route=transition_coeffs):
    """|dB/dt - central difference of B| relative to max(1, |dB/dt|)."""
    rng = np.random.default_rng(seed)
    t, r = _pairs(spec, n, rng, margin=max(1e-3, 10 * h))
    db = route(spec, t, r).db_dt
    fd = (transition_coeffs(spec, t + h, r).b - transition_coeffs(spec, t - h, r).b) / (2 * h)
    return float(np.max(np.abs(db - fd) / np.maximum(1.0, np.abs(db))))


def shift_roundtrip_error(n=200, seed=0):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, 1, n)
    worst = 0.0
    for ratio in (0.25, 1.0, 4.0):
        back = shift_timestep(shift_timestep(t, 1.0, ratio), ratio, 1.0)
        worst = max(worst, float(np.max(np.abs(back - t))))
    return worst


# -- identity and reductions -------------------------------------------------

def _probes(spec, n, seed):
    rng = np.random.default_rng(seed)
    t, r = _pairs(spec, n, rng, margin=0.01)
    eps = rng.standard_normal((n, 2))
    return t, r, eps


def identity_residuals(spec, f, n=200, seed=0):
    t, r, eps = _probes(spec, n, seed)
    return np.array([identity_residual(f, X0, eps[i], t[i], r[i], spec) for i in range(n)])


def delta_oracle_fn(spec):
    oracle = DeltaDataOracle(X0, spec)
    return lambda x_s, s, r: oracle(np.atleast_2d(x_s), s, r)[0]


def fixed_point_error(spec, n=100, seed=0, h=1e-5, route=transition_coeffs):
    """Exact transitions are fixed points of the regression target.

    Uses the Gaussian oracle, since for point-mass data the slope term
    vanishes identically and would hide errors in dB/dt.  The target is
    linear in (x, eps) given x_t, so its conditional mean is the target at the
    posterior means (x_hat, eps_hat); the straight path through those has the
    probability-flow tangent at t.  The time slope is a central difference
    with step ``h``, which sets the error floor.
    """
    t, r, eps = _probes(spec, n, seed)
    oracle = GaussianDataOracle([0.5, -1.0], [0.3, 1.5], spec)
    x = oracle.sample(n, np.random.default_rng(seed + 1))
    cb = coeffs(spec, t)
    x_t = cb.alpha[:, None] * x + cb.sigma[:, None] * eps
    x_hat = gaussian_exact_xpred(oracle, x_t, t)
    eps_hat = (x_t - cb.alpha[:, None] * x_hat) / cb.sigma[:, None]

    def f_along(s):
        cs = coeffs(spec, s)
        return oracle(cs.alpha[:, None] * x_hat + cs.sigma[:, None] * eps_hat, s, r)

    f = f_along(t)
    df_dt = (f_along(t + h) - f_along(t - h)) / (2 * h)
    target = tim_target(x_hat, eps_hat, t, r, df_dt, spec, route(spec, t, r))
    return float(np.max(np.abs(target - f) / (1.0 + np.abs(f))))


def meanflow_error(n=100, seed=0, route=transition_coeffs):
    """Under OT-FM the target is (eps - x) - (t - r) df/dt for any df/dt."""
    spec = TransportSpec("ot-fm")
    rng = np.random.default_rng(seed)
    t, r = _pairs(spec, n, rng)
    x, eps, df = (rng.standard_normal((n, 2)) for _ in range(3))
    ours = tim_target(x, eps, t, r, df, spec, route(spec, t, r))
    ref = (eps - x) - (t - r)[:, None] * df
    return float(np.max(np.abs(ours - ref)))


def diffusion_limit_slope(spec, t=None, route=transition_coeffs, seed=0):
    """Log-log slope of |target(t, t - d) - diffusion target| against d."""
    rng = np.random.default_rng(seed)
    t = t if t is not None else 0.5 * (spec.t_min + spec.t_max)
    if spec.kind is Kind.TRIGFLOW or spec.kind is Kind.OT_FM:
        t = min(t, 0.7)
    x, eps, df = (rng.standard_normal((1, 2)) for _ in range(3))
    ds = np.logspace(-4, -1, 7) * (spec.t_max - spec.t_min) * 0.5
    cb = coeffs(spec, t)
    base = cb.alpha_hat * x + cb.sigma_hat * eps
    errs = []
    for d in ds:
        tt, rr = np.array([t]), np.array([t - d])
        errs.append(np.linalg.norm(tim_target(x, eps, tt, rr, df, spec, route(spec, tt, rr)) - base))
    return float(np.polyfit(np.log(ds), np.log(errs), 1)[0])


# -- DDE ---------------------------------------------------------------------

class _SyntheticEvaluator:
    """Smooth f(x_t, t) with an analytic total time derivative along x_t = a x + s eps."""

    def __init__(self, spec, w):
        self.spec, self.w, self.calls = spec, w, 0

    def __call__(self, x_t, t, r, cond):
        self.calls += 1
        t = np.asarray(t, dtype=np.float64)[..., None]
        return np.sin(x_t @ self.w) * np.exp(-t) + np.cos(3.0 * t) * x_t

    def total_derivative(self, x, eps, t):
        cb = coeffs(self.spec, t)
        x_t = cb.alpha * x + cb.sigma * eps
        dx = cb.d_alpha * x + cb.d_sigma * eps
        e = math.exp(-t)
        return (np.cos(x_t @ self.w) * (dx @ self.w) * e - np.sin(x_t @ self.w) * e
                - 3.0 * math.sin(3.0 * t) * x_t + math.cos(3.0 * t) * dx)


def dde_order(spec=None, seed=0):
    """(log-log slope of DDE error over eps_fd in [1e-3, 1e-1], forward calls per dde call)."""
    spec = spec or TransportSpec("trigflow")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((2, 2))
    f = _SyntheticEvaluator(spec, w)
    x, eps = rng.standard_normal((1, 2)), rng.standard_normal((1, 2))
    t = 0.6
    exact = f.total_derivative(x, eps, t)
    hs = np.logspace(-3, -1, 9)
    errs = []
    for h in hs:
        f.calls = 0
        est = dde(f, x, eps, np.array([t]), np.array([0.1]), None, spec, h)
        calls = f.calls
        errs.append(np.linalg.norm(est - exact))
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0]), calls


# -- gradients ---------------------------------------------------------------

MICRO_MLP = NetworkConfig(backbone=Backbone.MLP, dim=2, width=8, depth=2, embed_dim=6, fourier_bands=2,
                          n_classes=3, dtype="float64", seed=1)
MICRO_ATTN = NetworkConfig(backbone=Backbone.ATTENTION, dim=4, width=8, depth=1, embed_dim=6, n_heads=2,
                           n_tokens=2, fourier_bands=2, n_classes=3, dtype="float64", seed=2)
# central differences carry O(h^2) truncation; layer norms near small
# activations have enough curvature that 1e-4 sits right at the tolerance
MICRO_FD_STEP = 1e-5


def gradient_check(net_cfg, spec=None, h=1e-4, seed=0, abs_floor=1e-8):
    """Worst |g - fd| / (max(|g|, |fd|) + abs_floor / 1e-4) over every parameter.

    Output weights start at zero, which would hide most paths, so the check
    perturbs all parameters to a generic point first.
    """
    spec = spec or TransportSpec("trigflow")
    rng = np.random.default_rng(seed)
    params = network.init_params(net_cfg) + 0.1 * rng.standard_normal(network.layout(net_cfg).size)
    n = 3
    x = rng.standard_normal((n, net_cfg.dim))
    t = rng.uniform(0.3, 1.2, n)
    r = t * rng.uniform(0.1, 0.9, n)
    cls = np.array([0, net_cfg.n_classes, 1])[:n] if net_cfg.n_classes else None
    g_out = rng.standard_normal((n, net_cfg.dim))

    def loss(p):
        return float(np.sum(network.forward(p, net_cfg, spec, x, t, r, cls) * g_out))

    _, cache = network.forward(params, net_cfg, spec, x, t, r, cls, keep_cache=True)
    g = network.backward(params, net_cfg, cache, g_out)
    worst = 0.0
    for i in range(params.size):
        p = params.copy()
        p[i] += h
        up = loss(p)
        p[i] -= 2 * h
        fd = (up - loss(p)) / (2 * h)
        err = abs(g[i] - fd) / (max(abs(g[i]), abs(fd)) + abs_floor / 1e-4)
        worst = max(worst, err)
    return worst


# -- end to end ----------------------------------------------------------------

def gaussian_sampling(spec=None, n=1000, steps=(1, 4, 16), seed=0):
    """Energy distance of oracle-driven samples per step count, and the refinement gap."""
    spec = spec or TransportSpec("ot-fm")
    oracle = GaussianDataOracle([0.5, -1.0], [0.3, 1.5], spec)
    ref = oracle.sample(n, np.random.default_rng(seed + 1))
    eds, outs = {}, {}
    for k in steps:
        outs[k] = sampler.sample(oracle, spec, sampler.build_schedule(spec, k), n, rng=np.random.default_rng(seed))
        eds[k] = energy_distance(outs[k], ref)
    gap = max(float(np.max(np.abs(outs[k] - outs[steps[0]]))) for k in steps)
    return eds, gap


# -- battery -------------------------------------------------------------------

def run_checks(level="fast", corrupt_db_dt=0.0):
    """Run the battery; returns a list of CheckResult."""
    route = _coeff_route(corrupt_db_dt)
    checks = []

    def add(name, fn, ok, threshold):
        start = time.perf_counter()
        try:
            value = fn()
            passed = bool(ok(value))
        except Exception as exc:  # a crashing check is a failing check
            value, passed = float("nan"), False
            threshold = f"{threshold} (raised {type(exc).__name__}: {exc})"
        checks.append(CheckResult(name, passed, float(value), threshold, time.perf_counter() - start))

    for kind in ALL_KINDS:
        spec = TransportSpec(kind)
        add(f"derivatives[{kind.value}]", lambda s=spec: derivative_error(s), lambda v: v < 1e-5, "< 1e-5 rel")
    for kind in (Kind.OT_FM, Kind.TRIGFLOW, Kind.VE):
        spec = TransportSpec(kind)
        add(f"closed-form A,B,dB/dt[{kind.value}]", lambda s=spec: closed_form_error(s, route=route),
            lambda v: v < 1e-12, "< 1e-12 abs")
    for kind in ALL_KINDS:
        spec = TransportSpec(kind)
        add(f"dB/dt vs FD[{kind.value}]", lambda s=spec: db_dt_fd_error(s, route=route),
            lambda v: v < 1e-6, "< 1e-6")
    for kind in (Kind.OT_FM, Kind.TRIGFLOW):
        spec = TransportSpec(kind)
        add(f"identity residual, exact[{kind.value}]",
            lambda s=spec: float(identity_residuals(s, delta_oracle_fn(s)).max()), lambda v: v < 1e-6, "< 1e-6")
        add(f"identity residual, zero net[{kind.value}]",
            lambda s=spec: float(identity_residuals(s, lambda x_s, t, r: np.zeros(2)).min()),
            lambda v: v > 1e-2, "> 1e-2")
    for kind in ALL_KINDS:
        spec = TransportSpec(kind)
        add(f"identity fixed point[{kind.value}]", lambda s=spec: fixed_point_error(s, route=route),
            lambda v: v < 1e-6, "< 1e-6")
    add("meanflow reduction[ot-fm]", lambda: meanflow_error(route=route), lambda v: v < 1e-12, "< 1e-12")
    for kind in (Kind.OT_FM, Kind.TRIGFLOW):
        spec = TransportSpec(kind)
        add(f"diffusion limit slope[{kind.value}]", lambda s=spec: diffusion_limit_slope(s, route=route),
            lambda v: v >= 1.0 - 1e-3, ">= 1")
    add("dde order", lambda: dde_order()[0], lambda v: abs(v - 2.0) <= 0.1, "2.0 +- 0.1")
    add("dde forward calls", lambda: dde_order()[1], lambda v: v == 2, "== 2")
    add("gradients[mlp]", lambda: gradient_check(MICRO_MLP, h=MICRO_FD_STEP), lambda v: v < 1e-4, "< 1e-4 rel")
    add("gradients[attention]", lambda: gradient_check(MICRO_ATTN, h=MICRO_FD_STEP), lambda v: v < 1e-4, "< 1e-4 rel")
    add("shift round trip", shift_roundtrip_error, lambda v: v < 1e-12, "< 1e-12")
    if level == "full":
        for kind in ALL_KINDS:
            spec = TransportSpec(kind)
            res = {}

            def measure(s=spec, res=res):
                res["eds"], res["gap"] = gaussian_sampling(s)
                return max(res["eds"].values())

            add(f"gaussian oracle sampling ED[{kind.value}]", measure, lambda v: v < 0.05, "< 0.05 at 1/4/16 steps")
            add(f"gaussian oracle refinement[{kind.value}]", lambda res=res: res["gap"], lambda v: v < 1e-6, "< 1e-6")
    return checks


def format_table(results):
    width = max(len(c.name) for c in results)
    lines = [f"{'check'.ljust(width)}  result  {'value':>12}  threshold"]
    for c in results:
        lines.append(f"{c.name.ljust(width)}  {'PASS' if c.passed else 'FAIL':6}  {c.value:12.4g}  {c.threshold}")
    return "\n".join(lines)
