import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anystep.errors import DomainError
from anystep.oracle import DeltaDataOracle, delta_exact_f
from anystep.transition import (Kernel, Warp, WeightScheme, apply_transition, dde, identity_residual,
                                interval_weight, tim_target, transition_coeffs, x_eps_prediction)
from anystep.transport import Kind, TransportSpec, coeffs

OTFM = TransportSpec("ot-fm")
TRIG = TransportSpec("trigflow")


def test_otfm_coefficients():
    tc = transition_coeffs(OTFM, 0.8, 0.3)
    assert tc.a == pytest.approx(1.0, abs=1e-15)
    assert tc.b == pytest.approx(-0.5, abs=1e-15)
    assert tc.db_dt == pytest.approx(-1.0, abs=1e-15)


def test_trigflow_coefficients():
    tc = transition_coeffs(TRIG, math.pi / 3, math.pi / 6)
    assert tc.a == pytest.approx(math.cos(math.pi / 6), abs=1e-12)
    assert tc.b == pytest.approx(-0.5, abs=1e-12)
    assert tc.db_dt == pytest.approx(-math.cos(math.pi / 6), abs=1e-12)


@pytest.mark.parametrize("kind", list(Kind))
def test_equal_times_give_identity(kind):
    spec = TransportSpec(kind)
    t = 0.5 * (spec.t_min + spec.t_max)
    tc = transition_coeffs(spec, t, t)
    assert tc.a == pytest.approx(1.0, abs=1e-12) and tc.b == 0.0
    x = np.array([[0.3, -1.2]])
    np.testing.assert_allclose(apply_transition(x, np.array([[5.0, 7.0]]), tc), x, atol=1e-12)


@pytest.mark.parametrize("kind", list(Kind))
def test_db_dt_matches_finite_difference(kind):
    spec = TransportSpec(kind)
    rng = np.random.default_rng(0)
    h = 1e-6
    a, b = rng.uniform(spec.t_min + 1e-3, spec.t_max - 1e-3, (2, 50))
    t, r = np.maximum(a, b), np.minimum(a, b)
    fd = (transition_coeffs(spec, t + h, r).b - transition_coeffs(spec, t - h, r).b) / (2 * h)
    np.testing.assert_allclose(transition_coeffs(spec, t, r).db_dt, fd, rtol=1e-5, atol=1e-7)


def test_reversed_times_rejected():
    with pytest.raises(DomainError):
        transition_coeffs(OTFM, 0.2, 0.6)


def test_x_eps_prediction_example():
    x_hat, eps_hat = x_eps_prediction(np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]]), OTFM, 0.5)
    np.testing.assert_allclose(x_hat, [[-0.5, -0.5]])
    np.testing.assert_allclose(eps_hat, [[0.5, 0.5]])


@pytest.mark.parametrize("kind", list(Kind))
def test_x_eps_prediction_inverts_exact_target(kind):
    spec = TransportSpec(kind)
    rng = np.random.default_rng(1)
    x, eps = rng.standard_normal((2, 100, 2))
    t = rng.uniform(spec.t_min, spec.t_max, 100)
    cb = coeffs(spec, t)
    x_t = cb.alpha[:, None] * x + cb.sigma[:, None] * eps
    f = cb.alpha_hat[:, None] * x + cb.sigma_hat[:, None] * eps
    x_hat, eps_hat = x_eps_prediction(x_t, f, spec, t)
    np.testing.assert_allclose(cb.alpha[:, None] * x_hat + cb.sigma[:, None] * eps_hat, x_t, atol=1e-10)
    np.testing.assert_allclose(x_hat, x, atol=1e-8 * max(1, spec.t_max))


def test_apply_transition_example():
    tc = transition_coeffs(OTFM, 0.8, 0.3)
    np.testing.assert_allclose(apply_transition(np.array([[1.0, 0.0]]), np.array([[2.0, 2.0]]), tc), [[0.0, -1.0]],
                               atol=1e-15)


@pytest.mark.parametrize("spec", [OTFM, TRIG])
def test_diffusion_target_gives_ddim_step(spec):
    rng = np.random.default_rng(2)
    x, eps = rng.standard_normal((2, 50, 2))
    a, b = rng.uniform(spec.t_min, spec.t_max, (2, 50))
    t, r = np.maximum(a, b), np.minimum(a, b)
    ct, cr = coeffs(spec, t), coeffs(spec, r)
    x_t = ct.alpha[:, None] * x + ct.sigma[:, None] * eps
    f = ct.alpha_hat[:, None] * x + ct.sigma_hat[:, None] * eps
    out = apply_transition(x_t, f, transition_coeffs(spec, t, r))
    np.testing.assert_allclose(out, cr.alpha[:, None] * x + cr.sigma[:, None] * eps, atol=1e-10)


class Counting:
    def __init__(self, fn):
        self.fn, self.calls = fn, 0

    def __call__(self, x_t, t, r, cond):
        self.calls += 1
        return self.fn(x_t, np.asarray(t)[:, None] * np.ones_like(x_t))


def _dde(fn, t=0.5, eps_fd=0.01):
    x, eps = np.array([[0.2, -0.4]]), np.array([[1.0, 0.5]])
    f = Counting(fn)
    out = dde(f, x, eps, np.array([t]), np.array([0.1]), None, OTFM, eps_fd)
    return out, f.calls


def test_dde_constant_is_zero():
    out, calls = _dde(lambda x_t, t: np.full_like(x_t, 3.0))
    assert calls == 2
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("eps_fd", [1e-3, 0.01, 0.1])
def test_dde_exact_on_quadratic(eps_fd):
    v = np.array([1.5, -2.0])
    out, _ = _dde(lambda x_t, t: t**2 * v, t=0.5, eps_fd=eps_fd)
    np.testing.assert_allclose(out, [2 * 0.5 * v], rtol=1e-10)


@pytest.mark.parametrize("eps_fd", [1e-2, 0.05, 0.1])
def test_dde_cubic_error_is_eps_squared(eps_fd):
    v = np.array([1.5, -2.0])
    t = 0.5
    out, _ = _dde(lambda x_t, s: s**3 * v, t=t, eps_fd=eps_fd)
    np.testing.assert_allclose(out, [3 * t**2 * v + eps_fd**2 * v], rtol=1e-9)


def test_dde_range_guard():
    with pytest.raises(DomainError):
        _dde(lambda x_t, t: x_t, t=OTFM.t_max - 1e-3, eps_fd=0.005)


@pytest.mark.parametrize("kind", list(Kind))
def test_target_at_equal_times_is_diffusion_target(kind):
    spec = TransportSpec(kind)
    rng = np.random.default_rng(4)
    x, eps, df = rng.standard_normal((3, 10, 2))
    t = rng.uniform(spec.t_min, spec.t_max, 10)
    cb = coeffs(spec, t)
    np.testing.assert_array_equal(tim_target(x, eps, t, t, df, spec),
                                  cb.alpha_hat[:, None] * x + cb.sigma_hat[:, None] * eps)


def test_otfm_target_without_slope():
    rng = np.random.default_rng(5)
    x, eps = rng.standard_normal((2, 10, 2))
    out = tim_target(x, eps, np.full(10, 0.7), np.full(10, 0.2), np.zeros((10, 2)), OTFM)
    np.testing.assert_allclose(out, eps - x, atol=1e-15)


@given(st.floats(1e-4, 1 - 1e-4), st.floats(0, 1), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_meanflow_reduction(t, frac, x, e, d):
    r = OTFM.t_min + frac * (t - OTFM.t_min)
    out = tim_target(np.array([[x]]), np.array([[e]]), np.array([t]), np.array([r]), np.array([[d]]), OTFM)
    assert abs(out[0, 0] - ((e - x) - (t - r) * d)) < 1e-12


def test_weight_examples():
    assert interval_weight(0.3, 0.3) == 1.0
    assert interval_weight(math.pi / 4, 0.0) == pytest.approx(1 / math.sqrt(2))
    assert interval_weight(0.5, 0.0, WeightScheme("reciprocal", "identity")) == pytest.approx(2 / 3)


def test_weight_poles():
    with pytest.raises(DomainError):
        interval_weight(1.0, 0.5, WeightScheme("sqrt", "rational"))
    with pytest.raises(DomainError):
        interval_weight(math.pi / 2, 0.1, WeightScheme("sqrt", "tangent"))


@pytest.mark.parametrize("kernel", list(Kernel))
@pytest.mark.parametrize("warp", list(Warp))
def test_weight_positive_and_non_increasing_in_t(kernel, warp):
    scheme = WeightScheme(kernel, warp)
    r = 0.05
    t = np.linspace(r, 0.95, 200)
    w = interval_weight(t, np.full_like(t, r), scheme)
    assert np.all(w > 0)
    assert np.all(np.diff(w) <= 0)


@pytest.mark.parametrize("spec", [OTFM, TRIG])
def test_identity_residual_exact_and_zero(spec):
    oracle = DeltaDataOracle([0.5, -0.5], spec)
    rng = np.random.default_rng(6)
    x0 = np.array([0.5, -0.5])
    for _ in range(20):
        a, b = rng.uniform(spec.t_min + 0.01, spec.t_max - 0.01, 2)
        t, r = max(a, b), min(a, b)
        eps = rng.standard_normal(2)
        exact = identity_residual(lambda xs, s, rr: oracle(xs[None], s, rr)[0], x0, eps, t, r, spec)
        zero = identity_residual(lambda xs, s, rr: np.zeros(2), x0, eps, t, r, spec)
        assert exact < 1e-6
        assert zero > 1e-2


def test_identity_residual_zero_net_matches_product_rule():
    spec = TRIG
    x, eps, t, r = np.array([0.5, -0.5]), np.array([0.3, 1.1]), 1.0, 0.4
    cb = coeffs(spec, t)
    tc = transition_coeffs(spec, t, r)
    expected = np.linalg.norm(tc.db_dt * (cb.alpha_hat * x + cb.sigma_hat * eps)
                              + tc.b * (cb.d_alpha_hat * x + cb.d_sigma_hat * eps))
    got = identity_residual(lambda xs, s, rr: np.zeros(2), x, eps, t, r, spec)
    assert got == pytest.approx(expected, rel=1e-6)


def test_identity_residual_at_equal_times():
    oracle = DeltaDataOracle([0.5, -0.5], OTFM)
    f = lambda xs, s, rr: delta_exact_f(oracle, (xs - coeffs(OTFM, s).alpha * oracle.x0) / coeffs(OTFM, s).sigma, s, rr)
    assert identity_residual(f, oracle.x0, np.array([0.3, -0.2]), 0.5, 0.5, OTFM) < 1e-6
