import numpy as np
import pytest

from anystep import network
from anystep.errors import DomainError
from anystep.network import Backbone, NetworkConfig, ema_update, forward, init_params, layout, param_count
from anystep.transport import TransportSpec
from anystep.verify import MICRO_ATTN, MICRO_FD_STEP, MICRO_MLP, gradient_check

SPEC = TransportSpec("trigflow")
CONFIGS = {
    "mlp": NetworkConfig(width=16, depth=2, embed_dim=8, fourier_bands=3),
    "mlp-cls": NetworkConfig(width=16, depth=1, embed_dim=8, n_classes=4),
    "attn": NetworkConfig(Backbone.ATTENTION, dim=4, width=8, depth=2, embed_dim=6, n_heads=2, n_tokens=2),
    "attn-cls": NetworkConfig(Backbone.ATTENTION, dim=6, width=12, depth=1, embed_dim=4, n_heads=3, n_tokens=3,
                              n_classes=2),
}


def _randomized(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return (init_params(cfg) + 0.2 * rng.standard_normal(layout(cfg).size)).astype(cfg.dtype)


def _inputs(cfg, n=5, seed=1):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.3, 1.4, n)
    return rng.standard_normal((n, cfg.dim)), t, t * rng.uniform(0, 1, n)


@pytest.mark.parametrize("name", CONFIGS)
def test_layout_matches_closed_form_count(name):
    cfg = CONFIGS[name]
    assert layout(cfg).size == param_count(cfg)
    assert init_params(cfg).size == param_count(cfg)


def test_default_mlp_is_about_100k():
    assert 90_000 <= param_count(NetworkConfig()) <= 110_000


@pytest.mark.parametrize("name", CONFIGS)
def test_zero_output_layer_gives_zero(name):
    cfg = CONFIGS[name]
    x, t, r = _inputs(cfg)
    out = forward(init_params(cfg), cfg, SPEC, x, t, r)
    assert out.shape == x.shape
    assert np.all(out == 0)


@pytest.mark.parametrize("name", CONFIGS)
def test_forward_deterministic(name):
    cfg = CONFIGS[name]
    p = _randomized(cfg)
    x, t, r = _inputs(cfg)
    assert np.array_equal(forward(p, cfg, SPEC, x, t, r), forward(p, cfg, SPEC, x, t, r))


@pytest.mark.parametrize("name", CONFIGS)
def test_interval_sensitivity(name):
    cfg = CONFIGS[name]
    p = _randomized(cfg)
    x, t, _ = _inputs(cfg)
    assert not np.allclose(forward(p, cfg, SPEC, x, t, 0.2 * t), forward(p, cfg, SPEC, x, t, 0.6 * t))


@pytest.mark.parametrize("name", CONFIGS)
def test_decoupling_without_interval_path(name):
    cfg = CONFIGS[name]
    p = _randomized(cfg)
    views = layout(cfg).views(p)
    for key in views:
        if key.startswith("phi_dt") or key.endswith("qkv_dt.w"):
            views[key][...] = 0
    x, t, _ = _inputs(cfg)
    np.testing.assert_array_equal(forward(p, cfg, SPEC, x, t, 0.1 * t), forward(p, cfg, SPEC, x, t, 0.9 * t))


def test_null_class_matches_none():
    cfg = CONFIGS["mlp-cls"]
    p = _randomized(cfg)
    x, t, r = _inputs(cfg)
    np.testing.assert_array_equal(forward(p, cfg, SPEC, x, t, r, None),
                                  forward(p, cfg, SPEC, x, t, r, np.full(len(x), cfg.n_classes)))
    assert not np.allclose(forward(p, cfg, SPEC, x, t, r, 0), forward(p, cfg, SPEC, x, t, r, None))


def test_shape_and_value_errors():
    cfg = CONFIGS["mlp"]
    p = init_params(cfg)
    with pytest.raises(DomainError):
        forward(p, cfg, SPEC, np.zeros((3, 5)), 0.5, 0.2)
    with pytest.raises(DomainError):
        forward(p, cfg, SPEC, np.array([[np.nan, 0.0]]), 0.5, 0.2)
    _, cache = forward(p, cfg, SPEC, np.zeros((3, 2)), 0.5, 0.2, keep_cache=True)
    with pytest.raises(DomainError):
        network.backward(p, cfg, cache, np.zeros((4, 2)))


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(Backbone.ATTENTION, width=10, n_heads=3)
    with pytest.raises(ValueError):
        NetworkConfig(Backbone.ATTENTION, dim=3, n_tokens=2)


@pytest.mark.parametrize("name", CONFIGS)
def test_zero_output_grad_gives_zero_grads(name):
    cfg = CONFIGS[name]
    p = _randomized(cfg)
    x, t, r = _inputs(cfg)
    _, cache = forward(p, cfg, SPEC, x, t, r, keep_cache=True)
    assert not np.any(network.backward(p, cfg, cache, np.zeros_like(x)))


def test_gradient_check_tiny_mlp():
    cfg = NetworkConfig(dim=2, width=3, depth=1, embed_dim=3, fourier_bands=1, dtype="float64")
    assert gradient_check(cfg) < 1e-4


def test_gradient_check_micro_nets():
    assert gradient_check(MICRO_MLP, h=MICRO_FD_STEP) < 1e-4
    assert gradient_check(MICRO_ATTN, h=MICRO_FD_STEP) < 1e-4


def test_gradient_check_single_head_attention():
    cfg = NetworkConfig(Backbone.ATTENTION, dim=2, width=4, depth=1, embed_dim=3, n_heads=1, n_tokens=2,
                        fourier_bands=1, dtype="float64")
    assert gradient_check(cfg, spec=TransportSpec("ot-fm")) < 1e-4


def test_ema_examples():
    np.testing.assert_array_equal(ema_update(np.zeros(1), np.full(1, 2.0), 0.5), [1.0])
    p = np.arange(4.0)
    np.testing.assert_array_equal(ema_update(np.ones(4), p, 0.0), p)
    e = np.ones(4)
    for _ in range(100):
        e = ema_update(e, p, 1 - 1e-9)
    np.testing.assert_allclose(e, 1.0, atol=1e-6)
    with pytest.raises(DomainError):
        ema_update(np.ones(2), np.ones(3), 0.5)
    with pytest.raises(DomainError):
        ema_update(np.ones(2), np.ones(2), 1.0)


def test_lipschitz_probe_in_t():
    cfg = CONFIGS["attn"]
    p = _randomized(cfg)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1000, cfg.dim))
    t = rng.uniform(0.01, 1.5, 1000)
    a = forward(p, cfg, SPEC, x, t, 0.5 * t)
    b = forward(p, cfg, SPEC, x, t + 1e-3, 0.5 * t)
    assert np.all(np.isfinite(a)) and np.all(np.isfinite(b))
    assert np.max(np.abs(a - b)) < 0.5


def test_layout_views_share_memory():
    cfg = CONFIGS["mlp"]
    flat = np.zeros(layout(cfg).size)
    layout(cfg).views(flat)["out.b"][...] = 7
    assert flat[-1] == 7


@pytest.mark.parametrize("name", CONFIGS)
def test_embedders_start_random(name):
    # an all-zero two-layer embedder has zero gradient and never leaves that point
    views = layout(CONFIGS[name]).views(init_params(CONFIGS[name]))
    for prefix in ("phi_t", "phi_dt"):
        assert np.any(views[f"{prefix}.w1"]) and np.any(views[f"{prefix}.w2"])


def test_time_reaches_output():
    cfg = CONFIGS["mlp"]
    p = init_params(cfg)
    views = layout(cfg).views(p)
    views["out.w"][...] = np.random.default_rng(0).standard_normal(views["out.w"].shape)
    out = forward(p, cfg, SPEC, np.zeros((2, cfg.dim)), np.array([0.2, 1.2]), 0.0)
    assert not np.allclose(out[0], out[1])
