"""Small conditioned backbones with hand-written reverse-mode gradients.

Two backbones share the same conditioning path:

    E      = phi_t(c_noise(t)) + phi_dt(c_noise(t) - c_noise(r)) [+ class_emb[c]]
    cond   = silu(E)        -> per-block shift / scale / gate (AdaLN style)

* ``mlp``: residual MLP blocks on the raw input vector.
* ``attention``: the input is cut into tokens; every block runs self-attention
  whose q, k, v also receive a projection of the interval embedding, then a
  token-wise MLP.

Parameters live in one flat array; ``Layout`` maps names to slices.  All
forward/backward maths runs in ``cfg.dtype``.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError
from .transport import TransportSpec, c_noise

LN_EPS = 1e-5


class Backbone(str, enum.Enum):
    MLP = "mlp"
    ATTENTION = "attention"


@dataclass(frozen=True)
class NetworkConfig:
    backbone: Backbone = Backbone.MLP
    dim: int = 2
    width: int = 128
    depth: int = 2
    embed_dim: int = 32
    n_heads: int = 1
    n_tokens: int = 1
    n_classes: int = 0
    fourier_bands: int = 2
    interval_input: str = "cnoise"  # "cnoise" | "raw": argument of the interval encoder
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "backbone", Backbone(self.backbone))
        for name in ("dim", "width", "depth", "embed_dim", "n_heads", "n_tokens", "fourier_bands"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_classes < 0:
            raise ValueError("n_classes must be non-negative")
        if self.interval_input not in ("cnoise", "raw"):
            raise ValueError("interval_input must be 'cnoise' or 'raw'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.backbone is Backbone.ATTENTION:
            if self.width % self.n_heads:
                raise ValueError("width must be divisible by n_heads")
            if self.dim % self.n_tokens:
                raise ValueError("dim must be divisible by n_tokens")

    @property
    def token_dim(self):
        return self.dim // self.n_tokens

    def to_dict(self):
        d = asdict(self)
        d["backbone"] = self.backbone.value
        return d


class Layout:
    """Ordered name -> (offset, shape) manifest over a flat parameter vector."""

    def __init__(self, entries):
        self.entries = OrderedDict()
        offset = 0
        for name, shape in entries:
            shape = tuple(int(s) for s in shape)
            self.entries[name] = (offset, shape)
            offset += int(np.prod(shape))
        self.size = offset

    def views(self, flat):
        if flat.shape != (self.size,):
            raise DomainError(f"parameter vector has shape {flat.shape}, layout wants ({self.size},)")
        return {n: flat[o:o + int(np.prod(s))].reshape(s) for n, (o, s) in self.entries.items()}

    def to_list(self):
        return [[n, o, list(s)] for n, (o, s) in self.entries.items()]

    def __eq__(self, other):
        return isinstance(other, Layout) and self.to_list() == other.to_list()


def _embedder_entries(prefix, cfg):
    f, e = 2 * cfg.fourier_bands, cfg.embed_dim
    return [(f"{prefix}.w1", (f, e)), (f"{prefix}.b1", (e,)), (f"{prefix}.w2", (e, e)), (f"{prefix}.b2", (e,))]


def layout(cfg: NetworkConfig) -> Layout:
    e, w = cfg.embed_dim, cfg.width
    entries = _embedder_entries("phi_t", cfg) + _embedder_entries("phi_dt", cfg)
    if cfg.n_classes:
        entries.append(("class_emb", (cfg.n_classes + 1, e)))
    if cfg.backbone is Backbone.MLP:
        entries += [("in.w", (cfg.dim, w)), ("in.b", (w,))]
        for i in range(cfg.depth):
            p = f"block{i}"
            entries += [(f"{p}.mod.w", (e, 3 * w)), (f"{p}.mod.b", (3 * w,)),
                        (f"{p}.fc1.w", (w, w)), (f"{p}.fc1.b", (w,)),
                        (f"{p}.fc2.w", (w, w)), (f"{p}.fc2.b", (w,))]
        entries += [("out.w", (w, cfg.dim)), ("out.b", (cfg.dim,))]
    else:
        p_dim, n_tok = cfg.token_dim, cfg.n_tokens
        entries += [("tok.w", (p_dim, w)), ("tok.b", (w,)), ("pos", (n_tok, w))]
        for i in range(cfg.depth):
            p = f"block{i}"
            entries += [(f"{p}.mod.w", (e, 6 * w)), (f"{p}.mod.b", (6 * w,)),
                        (f"{p}.qkv.w", (w, 3 * w)), (f"{p}.qkv.b", (3 * w,)),
                        (f"{p}.qkv_dt.w", (e, 3 * w)),
                        (f"{p}.proj.w", (w, w)), (f"{p}.proj.b", (w,)),
                        (f"{p}.fc1.w", (w, w)), (f"{p}.fc1.b", (w,)),
                        (f"{p}.fc2.w", (w, w)), (f"{p}.fc2.b", (w,))]
        entries += [("out.w", (w, p_dim)), ("out.b", (p_dim,))]
    return Layout(entries)


def param_count(cfg: NetworkConfig) -> int:
    """Closed-form parameter count (independent of ``layout``)."""
    f, e, w, d = 2 * cfg.fourier_bands, cfg.embed_dim, cfg.width, cfg.depth
    n = 2 * (f * e + e + e * e + e)
    n += (cfg.n_classes + 1) * e if cfg.n_classes else 0
    if cfg.backbone is Backbone.MLP:
        return n + (cfg.dim + 1) * w + d * (3 * w * (e + 1) + 2 * w * (w + 1)) + (w + 1) * cfg.dim
    p = cfg.token_dim
    per_block = 6 * w * (e + 1) + 3 * w * (w + 1) + 3 * w * e + 3 * w * (w + 1)
    return n + (p + 1) * w + cfg.n_tokens * w + d * per_block + (w + 1) * p


def init_params(cfg: NetworkConfig) -> np.ndarray:
    """Random init from ``cfg.seed``; the output projection starts at zero."""
    lay = layout(cfg)
    rng = np.random.default_rng(cfg.seed)
    flat = np.zeros(lay.size, dtype=np.float64)
    views = lay.views(flat)
    for name, v in views.items():
        kind = name.rsplit(".", 1)[-1]
        if name.startswith("out."):
            continue
        if kind in ("w", "w1", "w2"):
            v[...] = rng.standard_normal(v.shape) / np.sqrt(v.shape[0])
        elif name in ("pos", "class_emb"):
            v[...] = 0.1 * rng.standard_normal(v.shape)
    for i in range(cfg.depth):
        views[f"block{i}.mod.w"] *= 0.1
    return flat.astype(cfg.dtype)


def zero_grads(cfg: NetworkConfig) -> np.ndarray:
    return np.zeros(layout(cfg).size, dtype=cfg.dtype)


def ema_update(ema, params, decay):
    """ema <- decay * ema + (1 - decay) * params (new array, same dtype)."""
    if ema.shape != params.shape:
        raise DomainError("EMA and parameter layouts differ")
    if not 0.0 <= decay < 1.0:
        raise DomainError("decay must lie in [0, 1)")
    return (decay * ema + (1.0 - decay) * params).astype(ema.dtype)


# ---------------------------------------------------------------- primitives

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _dsilu(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _layernorm(h):
    mu = h.mean(-1, keepdims=True)
    xc = h - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    return xc * inv, inv


def _layernorm_back(dn, n, inv):
    return inv * (dn - dn.mean(-1, keepdims=True) - n * (dn * n).mean(-1, keepdims=True))


def _matmul_wgrad(a, g):
    """sum over all leading axes of a^T g."""
    return a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def _rowsum(g):
    return g.reshape(-1, g.shape[-1]).sum(0)


def noise_span(spec: TransportSpec) -> float:
    """Width of c_noise over [t_min, t_max]; features see c_noise divided by it.

    Without this the same bands would be far too fast for VP (c_noise up to
    ~1000) and reasonable for OT-FM (up to 1).
    """
    return abs(float(c_noise(spec, spec.t_max)) - float(c_noise(spec, spec.t_min)))


def fourier_features(u, bands):
    freqs = 2.0 ** np.arange(bands)
    ang = np.asarray(u)[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------- forward

def _embed_forward(p, prefix, feats):
    a = feats @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]
    h = _silu(a)
    return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"], (feats, a, h)


def _embed_backward(p, g, prefix, cache, d_out):
    feats, a, h = cache
    g[f"{prefix}.w2"] += h.T @ d_out
    g[f"{prefix}.b2"] += d_out.sum(0)
    da = (d_out @ p[f"{prefix}.w2"].T) * _dsilu(a)
    g[f"{prefix}.w1"] += feats.T @ da
    g[f"{prefix}.b1"] += da.sum(0)


def _as_batch(v, n, name):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        v = np.full(n, float(v))
    if v.shape != (n,):
        raise DomainError(f"{name} must be a scalar or have shape ({n},), got {v.shape}")
    return v


def forward(params, cfg: NetworkConfig, spec: TransportSpec, x, t, r, class_id=None, keep_cache=False):
    """f(x, t, r[, class]) for a batch; returns ``out`` or ``(out, cache)``.

    ``class_id`` entries equal to ``cfg.n_classes`` (or ``None`` overall) select
    the null class embedding.
    """
    dt = np.dtype(cfg.dtype)
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != cfg.dim:
        raise DomainError(f"x must have shape (batch, {cfg.dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite network input")
    n = x.shape[0]
    t = _as_batch(t, n, "t")
    r = _as_batch(r, n, "r")
    p = layout(cfg).views(params)

    ct = c_noise(spec, t)
    if cfg.interval_input == "cnoise":
        interval = (ct - c_noise(spec, r)) / noise_span(spec)
    else:
        interval = (t - r) / (spec.t_max - spec.t_min)
    ct = ct / noise_span(spec)
    e_t, c_t = _embed_forward(p, "phi_t", fourier_features(ct, cfg.fourier_bands).astype(dt))
    e_dt, c_dt = _embed_forward(p, "phi_dt", fourier_features(interval, cfg.fourier_bands).astype(dt))
    emb = e_t + e_dt
    cls = None
    if cfg.n_classes:
        cls = np.full(n, cfg.n_classes, dtype=np.int64) if class_id is None else _class_batch(class_id, n, cfg)
        emb = emb + p["class_emb"][cls]
    cond = _silu(emb)

    x = x.astype(dt)
    if cfg.backbone is Backbone.MLP:
        out, body = _mlp_forward(p, cfg, x, cond)
    else:
        out, body = _attn_forward(p, cfg, x, cond, e_dt)
    if not keep_cache:
        return out
    return out, {"c_t": c_t, "c_dt": c_dt, "emb": emb, "cond": cond, "cls": cls, "e_dt": e_dt, "body": body}


def _class_batch(class_id, n, cfg):
    cls = np.asarray(class_id, dtype=np.int64)
    if cls.ndim == 0:
        cls = np.full(n, int(cls), dtype=np.int64)
    if cls.shape != (n,) or np.any(cls < 0) or np.any(cls > cfg.n_classes):
        raise DomainError("class ids must lie in [0, n_classes] (n_classes = null)")
    return cls


def _mlp_forward(p, cfg, x, cond):
    w = cfg.width
    h = x @ p["in.w"] + p["in.b"]
    blocks = []
    for i in range(cfg.depth):
        q = f"block{i}"
        mod = cond @ p[f"{q}.mod.w"] + p[f"{q}.mod.b"]
        shift, scale, gate = mod[:, :w], mod[:, w:2 * w], mod[:, 2 * w:]
        nrm, inv = _layernorm(h)
        u = nrm * (1.0 + scale) + shift
        a1 = u @ p[f"{q}.fc1.w"] + p[f"{q}.fc1.b"]
        s1 = _silu(a1)
        d = s1 @ p[f"{q}.fc2.w"] + p[f"{q}.fc2.b"]
        blocks.append((nrm, inv, scale, gate, u, a1, s1, d))
        h = h + gate * d
    nrm, inv = _layernorm(h)
    out = nrm @ p["out.w"] + p["out.b"]
    return out, {"x": x, "blocks": blocks, "final": (nrm, inv)}


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def _attn_forward(p, cfg, x, cond, e_dt):
    n, w, nh = x.shape[0], cfg.width, cfg.n_heads
    nt, hd = cfg.n_tokens, cfg.width // cfg.n_heads
    tok = x.reshape(n, nt, cfg.token_dim)
    z = tok @ p["tok.w"] + p["tok.b"] + p["pos"]
    blocks = []
    for i in range(cfg.depth):
        q = f"block{i}"
        mod = cond @ p[f"{q}.mod.w"] + p[f"{q}.mod.b"]
        sh1, sc1, g1, sh2, sc2, g2 = (mod[:, k * w:(k + 1) * w][:, None, :] for k in range(6))
        n1, inv1 = _layernorm(z)
        u1 = n1 * (1.0 + sc1) + sh1
        qkv = u1 @ p[f"{q}.qkv.w"] + p[f"{q}.qkv.b"] + (e_dt @ p[f"{q}.qkv_dt.w"])[:, None, :]
        heads = qkv.reshape(n, nt, 3, nh, hd).transpose(2, 0, 3, 1, 4)  # (3, n, nh, nt, hd)
        qh, kh, vh = heads[0], heads[1], heads[2]
        att = _softmax(qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(hd))
        oh = att @ vh
        o = oh.transpose(0, 2, 1, 3).reshape(n, nt, w)
        y = o @ p[f"{q}.proj.w"] + p[f"{q}.proj.b"]
        z = z + g1 * y
        n2, inv2 = _layernorm(z)
        u2 = n2 * (1.0 + sc2) + sh2
        a1 = u2 @ p[f"{q}.fc1.w"] + p[f"{q}.fc1.b"]
        s1 = _silu(a1)
        y2 = s1 @ p[f"{q}.fc2.w"] + p[f"{q}.fc2.b"]
        z = z + g2 * y2
        blocks.append(dict(n1=n1, inv1=inv1, sc1=sc1, g1=g1, u1=u1, qh=qh, kh=kh, vh=vh, att=att,
                           o=o, y=y, n2=n2, inv2=inv2, sc2=sc2, g2=g2, u2=u2, a1=a1, s1=s1, y2=y2))
    nrm, inv = _layernorm(z)
    out = (nrm @ p["out.w"] + p["out.b"]).reshape(n, cfg.dim)
    return out, {"tok": tok, "blocks": blocks, "final": (nrm, inv)}


# ---------------------------------------------------------------- backward

def backward(params, cfg: NetworkConfig, cache, output_grad):
    """Gradient of sum(output * output_grad) w.r.t. every parameter."""
    dt = np.dtype(cfg.dtype)
    lay = layout(cfg)
    p = lay.views(params)
    grads = np.zeros(lay.size, dtype=dt)
    g = lay.views(grads)
    dout = np.asarray(output_grad, dtype=dt)
    if dout.shape != cache["emb"].shape[:1] + (cfg.dim,):
        raise DomainError("output_grad does not match the cached forward batch")
    if cfg.backbone is Backbone.MLP:
        dcond, de_dt_extra = _mlp_backward(p, g, cfg, cache["body"], cache["cond"], dout), 0.0
    else:
        dcond, de_dt_extra = _attn_backward(p, g, cfg, cache["body"], cache["cond"], cache["e_dt"], dout)
    demb = dcond * _dsilu(cache["emb"])
    if cfg.n_classes:
        np.add.at(g["class_emb"], cache["cls"], demb)
    _embed_backward(p, g, "phi_t", cache["c_t"], demb)
    _embed_backward(p, g, "phi_dt", cache["c_dt"], demb + de_dt_extra)
    return grads


def _mlp_backward(p, g, cfg, body, cond, dout):
    w = cfg.width
    nrm, inv = body["final"]
    g["out.w"] += nrm.T @ dout
    g["out.b"] += dout.sum(0)
    dh = _layernorm_back(dout @ p["out.w"].T, nrm, inv)
    dcond = 0.0
    for i in reversed(range(cfg.depth)):
        q = f"block{i}"
        nrm, inv, scale, gate, u, a1, s1, d = body["blocks"][i]
        dgate = dh * d
        dd = dh * gate
        g[f"{q}.fc2.w"] += s1.T @ dd
        g[f"{q}.fc2.b"] += dd.sum(0)
        da1 = (dd @ p[f"{q}.fc2.w"].T) * _dsilu(a1)
        g[f"{q}.fc1.w"] += u.T @ da1
        g[f"{q}.fc1.b"] += da1.sum(0)
        du = da1 @ p[f"{q}.fc1.w"].T
        dshift, dscale = du, du * nrm
        dh = dh + _layernorm_back(du * (1.0 + scale), nrm, inv)
        dmod = np.concatenate([dshift, dscale, dgate], axis=1)
        g[f"{q}.mod.w"] += cond.T @ dmod
        g[f"{q}.mod.b"] += dmod.sum(0)
        dcond = dcond + dmod @ p[f"{q}.mod.w"].T
    g["in.w"] += body["x"].T @ dh
    g["in.b"] += dh.sum(0)
    return dcond


def _attn_backward(p, g, cfg, body, cond, e_dt, dout):
    n, w, nh = dout.shape[0], cfg.width, cfg.n_heads
    nt, hd = cfg.n_tokens, cfg.width // cfg.n_heads
    dout = dout.reshape(n, nt, cfg.token_dim)
    nrm, inv = body["final"]
    g["out.w"] += _matmul_wgrad(nrm, dout)
    g["out.b"] += _rowsum(dout)
    dz = _layernorm_back(dout @ p["out.w"].T, nrm, inv)
    dcond = 0.0
    de_dt = 0.0
    for i in reversed(range(cfg.depth)):
        q = f"block{i}"
        c = body["blocks"][i]
        # token MLP half
        dg2 = (dz * c["y2"]).sum(1)
        dy2 = dz * c["g2"]
        g[f"{q}.fc2.w"] += _matmul_wgrad(c["s1"], dy2)
        g[f"{q}.fc2.b"] += _rowsum(dy2)
        da1 = (dy2 @ p[f"{q}.fc2.w"].T) * _dsilu(c["a1"])
        g[f"{q}.fc1.w"] += _matmul_wgrad(c["u2"], da1)
        g[f"{q}.fc1.b"] += _rowsum(da1)
        du2 = da1 @ p[f"{q}.fc1.w"].T
        dsh2, dsc2 = du2.sum(1), (du2 * c["n2"]).sum(1)
        dz = dz + _layernorm_back(du2 * (1.0 + c["sc2"]), c["n2"], c["inv2"])
        # attention half
        dg1 = (dz * c["y"]).sum(1)
        dy = dz * c["g1"]
        g[f"{q}.proj.w"] += _matmul_wgrad(c["o"], dy)
        g[f"{q}.proj.b"] += _rowsum(dy)
        do = (dy @ p[f"{q}.proj.w"].T).reshape(n, nt, nh, hd).transpose(0, 2, 1, 3)
        att, qh, kh, vh = c["att"], c["qh"], c["kh"], c["vh"]
        datt = do @ vh.transpose(0, 1, 3, 2)
        dvh = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) / np.sqrt(hd)
        dqh = ds @ kh
        dkh = ds.transpose(0, 1, 3, 2) @ qh
        dqkv = np.stack([dqh, dkh, dvh]).transpose(1, 3, 0, 2, 4).reshape(n, nt, 3 * w)
        g[f"{q}.qkv.w"] += _matmul_wgrad(c["u1"], dqkv)
        g[f"{q}.qkv.b"] += _rowsum(dqkv)
        dqkv_tok = dqkv.sum(1)
        g[f"{q}.qkv_dt.w"] += e_dt.T @ dqkv_tok
        de_dt = de_dt + dqkv_tok @ p[f"{q}.qkv_dt.w"].T
        du1 = dqkv @ p[f"{q}.qkv.w"].T
        dsh1, dsc1 = du1.sum(1), (du1 * c["n1"]).sum(1)
        dz = dz + _layernorm_back(du1 * (1.0 + c["sc1"]), c["n1"], c["inv1"])
        dmod = np.concatenate([dsh1, dsc1, dg1, dsh2, dsc2, dg2], axis=1)
        g[f"{q}.mod.w"] += cond.T @ dmod
        g[f"{q}.mod.b"] += dmod.sum(0)
        dcond = dcond + dmod @ p[f"{q}.mod.w"].T
    g["tok.w"] += _matmul_wgrad(body["tok"], dz)
    g["tok.b"] += _rowsum(dz)
    g["pos"] += dz.sum(0)
    return dcond, de_dt
