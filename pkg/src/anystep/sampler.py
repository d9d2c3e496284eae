"""Any-step piecewise sampling with learned (or exact) transitions."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import network
from .errors import DomainError, NumericAbort
from .transition import apply_transition, transition_coeffs, x_eps_prediction
from .transport import Kind, TransportSpec, coeffs, shift_timestep


class ScheduleKind(str, enum.Enum):
    UNIFORM = "uniform"
    SHIFTED = "shifted"


@dataclass
class SampleSchedule:
    times: np.ndarray
    rho: float = 0.0
    cfg_omega: float = 1.0
    seed: int = 0
    shift_ratio: float | None = None
    eps_probe: str = "t0"  # where the stochastic branch evaluates f: (t_i, t_0) or (t_i, t_i)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.ndim != 1 or self.times.size < 2:
            raise DomainError("schedule needs at least two times")
        if np.any(np.diff(self.times) >= 0):
            raise DomainError("schedule times must be strictly decreasing")
        if self.rho < 0:
            raise DomainError("rho must be non-negative")
        if self.cfg_omega < 1:
            raise DomainError("cfg_omega must be >= 1")
        if self.eps_probe not in ("t0", "self"):
            raise DomainError("eps_probe must be 't0' or 'self'")

    @property
    def steps(self):
        return self.times.size - 1


def nominal_range(spec: TransportSpec):
    """Interval on which uniform grids are laid before pinning the endpoints."""
    if spec.kind in (Kind.OT_FM, Kind.VP):
        return 0.0, 1.0
    if spec.kind is Kind.TRIGFLOW:
        return 0.0, math.pi / 2
    return spec.t_min, spec.t_max


def build_schedule(spec: TransportSpec, steps, kind=ScheduleKind.UNIFORM, shift_ratio=None, **kw):
    """Descending grid t_N = t_max > ... > t_0 = t_min.

    Interior points are equispaced on the transport's nominal range; with
    ``kind="shifted"`` the unit grid first goes through ``shift_timestep``
    with ratio ``shift_ratio`` (m/n).
    """
    if int(steps) != steps or steps < 1:
        raise DomainError("steps must be a positive integer")
    kind = ScheduleKind(kind)
    u = np.linspace(1.0, 0.0, int(steps) + 1)
    if kind is ScheduleKind.SHIFTED:
        if not shift_ratio or shift_ratio <= 0:
            raise DomainError("shifted schedule needs a positive shift_ratio")
        u = shift_timestep(u, 1.0, shift_ratio)
    lo, hi = nominal_range(spec)
    times = lo + (hi - lo) * u
    times[0], times[-1] = spec.t_max, spec.t_min
    return SampleSchedule(times, shift_ratio=shift_ratio if kind is ScheduleKind.SHIFTED else None, **kw)


def nfe_count(sched: SampleSchedule) -> int:
    per_step = 2 if sched.cfg_omega > 1 else 1
    return sched.steps * per_step + (sched.steps if sched.rho > 0 else 0)


def network_model(params, net_cfg, spec):
    """Wrap parameters as an evaluator f(x, t, r, class_id)."""

    def model(x, t, r, class_id=None):
        return network.forward(params, net_cfg, spec, x, t, r, class_id).astype(np.float64)

    model.dim = net_cfg.dim
    return model


def _guided(model, x, t, r, class_id, omega):
    if omega > 1:
        if class_id is None:
            raise DomainError("classifier-free guidance needs a class_id")
        f_u = model(x, t, r, None)
        f_c = model(x, t, r, class_id)
        return f_u + omega * (f_c - f_u)
    return model(x, t, r, class_id)


def sample(model, spec: TransportSpec, sched: SampleSchedule, n, class_id=None, rng=None):
    """Draw ``n`` samples by chaining transitions along ``sched.times``.

    ``model(x, t, r, class_id)`` may be a network wrapper or an exact oracle.
    With ``rho > 0`` every jump also receives the scaled reverse-SDE
    correction; this branch is experimental.
    """
    if rng is None:
        rng = np.random.default_rng(sched.seed)
    times = sched.times
    dim = getattr(model, "dim", None)
    if dim is None:
        raise DomainError("model must expose its data dimension as .dim")
    # prior at t_max: sigma(t_max) * N(0, I); the data term is dropped
    x = coeffs(spec, float(times[0])).sigma * rng.standard_normal((n, dim))
    for i in range(sched.steps):
        t_cur, t_next = float(times[i]), float(times[i + 1])
        f = np.asarray(_guided(model, x, t_cur, t_next, class_id, sched.cfg_omega), dtype=np.float64)
        x_next = apply_transition(x, f, transition_coeffs(spec, t_cur, t_next))
        if sched.rho > 0:
            r_probe = float(times[-1]) if sched.eps_probe == "t0" else t_cur
            _, eps_hat = x_eps_prediction(x, model(x, t_cur, r_probe, class_id), spec, t_cur)
            cb = coeffs(spec, t_cur)
            drift = cb.alpha * cb.d_sigma - cb.d_alpha * cb.sigma
            dt = t_cur - t_next
            noise = rng.standard_normal(x.shape)
            x_next = x_next - sched.rho * drift * eps_hat * dt - math.sqrt(max(2.0 * sched.rho * drift, 0.0)) * noise * math.sqrt(dt)
        if not np.all(np.isfinite(x_next)):
            raise NumericAbort(f"non-finite sampler state at step {i}", {"step": i, "t": t_cur, "r": t_next})
        x = x_next
    return x


def write_samples_csv(path, samples, meta):
    """Write one row per sample plus a JSON sidecar at ``path + '.json'``."""
    samples = np.asarray(samples)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(samples.shape[1])])
        for row in samples:
            w.writerow([repr(float(v)) for v in row])
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
