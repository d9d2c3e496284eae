"""Training loop for transition models.

One iteration: draw data, noise and (t, r) pairs; estimate the frozen
network's time slope with two extra forward passes; build the regression
target; weight and normalize the per-sample loss; take an optimizer step and
update the EMA copy.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import network, sampler
from .data import ToyDataset, draw_batch
from .errors import DomainError, NumericAbort
from .network import NetworkConfig
from .oracle import energy_distance
from .transition import WeightScheme, dde, interval_weight, tim_target, transition_coeffs
from .transport import TransportSpec, coeffs, sample_time

COS_EPS = 1e-8
INTERVAL_BINS = ("t=r", "short", "medium", "long")


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    iterations: int = 20000
    lr: float = 2e-4
    optimizer: Optimizer = Optimizer.ADAM
    betas: tuple = (0.9, 0.999)
    eps_opt: float = 1e-8
    ema_decay: float = 0.999
    dde_eps: float = 0.005
    weight_scheme: WeightScheme = WeightScheme()
    frac_t_eq_r: float = 0.5
    frac_r_eq_0: float = 0.1
    loss_norm_c: float = 1e-3
    cosine_loss_scale: float = 0.0
    guidance_omega: float = 1.75
    guidance_enabled: bool = False
    guidance_warmup_iters: int = 0
    cond_dropout: float = 0.1
    seed: int = 0
    probe_every: int = 0
    probe_size: int = 512
    probe_nfe: tuple = (1, 4, 16)

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "probe_nfe", tuple(int(k) for k in self.probe_nfe))
        if isinstance(self.weight_scheme, dict):
            object.__setattr__(self, "weight_scheme", WeightScheme(**self.weight_scheme))
        if self.batch_size < 1 or self.iterations < 0:
            raise DomainError("batch_size must be >= 1 and iterations >= 0")
        if self.lr <= 0 or self.eps_opt <= 0 or self.dde_eps <= 0 or self.loss_norm_c <= 0:
            raise DomainError("lr, eps_opt, dde_eps and loss_norm_c must be positive")
        if not 0 <= self.ema_decay < 1:
            raise DomainError("ema_decay must lie in [0, 1)")
        for name in ("frac_t_eq_r", "frac_r_eq_0", "cond_dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1]")
        if self.frac_t_eq_r + self.frac_r_eq_0 > 1.0 + 1e-12:
            raise DomainError("frac_t_eq_r + frac_r_eq_0 must not exceed 1")
        if self.guidance_omega < 1:
            raise DomainError("guidance_omega must be >= 1")
        if self.cosine_loss_scale < 0:
            raise DomainError("cosine_loss_scale must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["optimizer"] = self.optimizer.value
        d["weight_scheme"] = {"kernel": self.weight_scheme.kernel.value, "warp": self.weight_scheme.warp.value,
                              "sigma_data": self.weight_scheme.sigma_data}
        d["betas"], d["probe_nfe"] = list(self.betas), list(self.probe_nfe)
        return d


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    raw_losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    interval_losses: dict = field(default_factory=lambda: {k: [] for k in INTERVAL_BINS})
    metrics: list = field(default_factory=list)
    wall_clock: float = 0.0
    params: np.ndarray | None = None
    ema: np.ndarray | None = None


def sample_tr_pair(spec: TransportSpec, cfg: TrainConfig, rng, size=None):
    """Ordered (t, r) pairs: two i.i.d. time draws, then the t=r / r=t_min overrides."""
    a, b = sample_time(spec, rng, size), sample_time(spec, rng, size)
    t, r = np.maximum(a, b), np.minimum(a, b)
    u = rng.uniform(size=size)
    r = np.where(u < cfg.frac_t_eq_r, t, r)
    r = np.where((u >= cfg.frac_t_eq_r) & (u < cfg.frac_t_eq_r + cfg.frac_r_eq_0), spec.t_min, r)
    if size is None:
        return float(t), float(r)
    return t, r


def clamp_for_dde(spec, t, r, eps_fd):
    t = np.clip(t, spec.t_min + eps_fd, spec.t_max - eps_fd)
    return t, np.minimum(r, t)


def interval_bin(spec, t, r):
    """0 for t == r, then thirds of the normalized interval length."""
    frac = (np.asarray(t) - np.asarray(r)) / (spec.t_max - spec.t_min)
    return np.where(t == r, 0, np.minimum(1 + (frac * 3).astype(int), 3))


def tim_loss_and_grads(params, net_cfg, spec, cfg, x, eps, t, r, cls, df_dt, target_shift=None, tc=None):
    """Weighted, normalized loss and its parameter gradient for one batch.

    ``df_dt`` is treated as a constant (no gradient flows through it), as is
    the optional ``target_shift`` added to the target (model guidance).
    """
    cb = coeffs(spec, t)
    x_t = cb.alpha[:, None] * x + cb.sigma[:, None] * eps
    target = tim_target(x, eps, t, r, df_dt, spec, tc)
    if target_shift is not None:
        target = target + target_shift
    out, cache = network.forward(params, net_cfg, spec, x_t, t, r, cls, keep_cache=True)
    f = out.astype(np.float64)
    diff = f - target
    per = (diff * diff).sum(1)
    dper = 2.0 * diff
    if cfg.cosine_loss_scale > 0:
        nf = np.linalg.norm(f, axis=1)
        ng = np.linalg.norm(target, axis=1)
        dot = (f * target).sum(1)
        den = nf * ng + COS_EPS
        per = per + cfg.cosine_loss_scale * (1.0 - dot / den)
        safe_nf = np.where(nf > 0, nf, 1.0)
        dcos = target / den[:, None] - (dot * ng / den**2)[:, None] * (f / safe_nf[:, None])
        dper = dper - cfg.cosine_loss_scale * dcos
    w = interval_weight(t, r, cfg.weight_scheme)
    scale = w / (per + cfg.loss_norm_c)  # normalizer is detached
    loss = float(np.mean(scale * per))
    grads = network.backward(params, net_cfg, cache, (scale / len(x))[:, None] * dper)
    return loss, grads, {"per_sample": per, "weighted": scale * per, "target": target}


class Trainer:
    """Mutable training state: parameters, EMA, optimizer moments, rng and step."""

    def __init__(self, spec: TransportSpec, cfg: TrainConfig, net_cfg: NetworkConfig, dataset: ToyDataset,
                 params=None):
        self.spec, self.cfg, self.net_cfg, self.dataset = spec, cfg, net_cfg, dataset
        if not dataset.fitted:
            dataset.fit()
        if dataset.dim != net_cfg.dim:
            raise DomainError(f"dataset dim {dataset.dim} != network dim {net_cfg.dim}")
        if cfg.guidance_enabled and not net_cfg.n_classes:
            raise DomainError("model guidance needs a class-conditional network")
        # fail fast on weight-scheme poles before the first step
        interval_weight(spec.t_max, spec.t_min, cfg.weight_scheme)
        self.params = network.init_params(net_cfg) if params is None else params.copy()
        self.ema = self.params.copy()
        self.m = np.zeros_like(self.params)
        self.v = np.zeros_like(self.params)
        self.step_count = 0
        self.rng = np.random.default_rng(cfg.seed)
        self.dde_enabled = True
        self.forward_rows = {"train": 0, "dde": 0, "guidance": 0}

    def _frozen(self, params):
        def f(x, t, r, cls):
            self.forward_rows["dde"] += len(x)
            return network.forward(params, self.net_cfg, self.spec, x, t, r, cls)
        return f

    def step(self):
        """One iteration; returns (loss, info)."""
        cfg, spec, net_cfg = self.cfg, self.spec, self.net_cfg
        x, cls = draw_batch(self.dataset, cfg.batch_size, self.rng)
        n = len(x)
        eps = self.rng.standard_normal(x.shape)
        t, r = sample_tr_pair(spec, cfg, self.rng, n)
        t, r = clamp_for_dde(spec, t, r, cfg.dde_eps)
        if net_cfg.n_classes:
            if cls is None:
                cls = np.full(n, net_cfg.n_classes)
            elif cfg.cond_dropout > 0:
                cls = np.where(self.rng.uniform(size=n) < cfg.cond_dropout, net_cfg.n_classes, cls)
        else:
            cls = None
        tc = transition_coeffs(spec, t, r)
        if self.dde_enabled:
            df_dt = dde(self._frozen(self.params), x, eps, t, r, cls, spec, cfg.dde_eps)
        else:
            df_dt = np.zeros_like(x)
        shift = self._guidance_shift(x, eps, t, cls)
        loss, grads, info = tim_loss_and_grads(self.params, net_cfg, spec, cfg, x, eps, t, r, cls, df_dt,
                                               shift, tc)
        self.forward_rows["train"] += n
        gnorm = float(np.linalg.norm(grads.astype(np.float64)))
        if not (np.isfinite(loss) and np.isfinite(gnorm)):
            hist, edges = np.histogram(t - r, bins=10)
            raise NumericAbort(f"non-finite loss at step {self.step_count}",
                               {"step": self.step_count, "t": t.tolist(), "r": r.tolist(),
                                "dt_hist": hist.tolist(), "dt_edges": edges.tolist()})
        self._apply(grads)
        self.ema = network.ema_update(self.ema, self.params, cfg.ema_decay)
        self.step_count += 1
        info.update(t=t, r=r, cls=cls, df_dt=df_dt, grad_norm=gnorm)
        return loss, info

    def _guidance_shift(self, x, eps, t, cls):
        cfg = self.cfg
        if not cfg.guidance_enabled or self.step_count < cfg.guidance_warmup_iters:
            return None
        cb = coeffs(self.spec, t)
        x_t = cb.alpha[:, None] * x + cb.sigma[:, None] * eps
        null = np.full(len(x), self.net_cfg.n_classes)
        f_c = network.forward(self.ema, self.net_cfg, self.spec, x_t, t, t, cls).astype(np.float64)
        f_u = network.forward(self.ema, self.net_cfg, self.spec, x_t, t, t, null).astype(np.float64)
        self.forward_rows["guidance"] += 2 * len(x)
        keep = (cls != self.net_cfg.n_classes)[:, None]
        return np.where(keep, (cfg.guidance_omega - 1.0) * (f_c - f_u), 0.0)

    def _apply(self, grads):
        cfg = self.cfg
        g = grads.astype(np.float64)
        p = self.params.astype(np.float64)
        if cfg.optimizer is Optimizer.SGD:
            p -= cfg.lr * g
        else:
            b1, b2 = cfg.betas
            k = self.step_count + 1
            m = b1 * self.m.astype(np.float64) + (1.0 - b1) * g
            v = b2 * self.v.astype(np.float64) + (1.0 - b2) * g * g
            p -= cfg.lr * (m / (1.0 - b1**k)) / (np.sqrt(v / (1.0 - b2**k)) + cfg.eps_opt)
            self.m, self.v = m.astype(self.m.dtype), v.astype(self.v.dtype)
        self.params = p.astype(self.params.dtype)

    def probe(self, n=None, nfe=None, use_ema=True):
        """Energy distance between model samples and fresh data at each step count.

        Every step count starts from the same initial noise and is compared
        with the same reference draw, so differences between step counts are
        not swamped by sampling noise.
        """
        cfg = self.cfg
        n = n or cfg.probe_size
        ref, _ = draw_batch(self.dataset, n, np.random.default_rng([cfg.seed, self.step_count, 7]))
        model = sampler.network_model(self.ema if use_ema else self.params, self.net_cfg, self.spec)
        row = {}
        for steps in nfe or cfg.probe_nfe:
            sched = sampler.build_schedule(self.spec, steps)
            xs = sampler.sample(model, self.spec, sched, n, rng=np.random.default_rng([cfg.seed, self.step_count, 11]))
            row[f"ed_nfe{steps}"] = energy_distance(xs, ref)
        return row


def run(spec, cfg, net_cfg, dataset, trainer=None, metrics_path=None, on_step=None):
    """Train for ``cfg.iterations`` total steps (resuming ``trainer`` if given).

    ``on_step(trainer)`` is called after every iteration (checkpoint hooks).
    Metric rows are appended to ``metrics_path`` as JSON lines.
    """
    tr = trainer or Trainer(spec, cfg, net_cfg, dataset)
    report = TrainReport()
    start = time.perf_counter()
    while tr.step_count < cfg.iterations:
        loss, info = tr.step()
        report.losses.append(loss)
        report.raw_losses.append(float(np.mean(info["per_sample"])))
        report.grad_norms.append(info["grad_norm"])
        bins = interval_bin(spec, info["t"], info["r"])
        for k, name in enumerate(INTERVAL_BINS):
            sel = bins == k
            report.interval_losses[name].append(float(info["weighted"][sel].mean()) if sel.any() else float("nan"))
        if cfg.probe_every and (tr.step_count % cfg.probe_every == 0 or tr.step_count == cfg.iterations):
            row = {"step": tr.step_count, "loss": loss, **tr.probe()}
            report.metrics.append(row)
            if metrics_path is not None:
                with open(metrics_path, "a") as fh:
                    fh.write(json.dumps(row) + "\n")
        if on_step is not None:
            on_step(tr)
    report.wall_clock = time.perf_counter() - start
    report.params, report.ema = tr.params.copy(), tr.ema.copy()
    return report
