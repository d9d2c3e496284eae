import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anystep.errors import DomainError
from anystep.transport import (Kind, TransportSpec, c_noise, coeffs, sample_time, shift_timestep,
                               time_from_noise_level, vp_beta)

KINDS = list(Kind)


def test_otfm_at_zero():
    spec = TransportSpec("ot-fm", t_min=0.0)
    cb = coeffs(spec, 0.0)
    assert (cb.alpha, cb.sigma, cb.alpha_hat, cb.sigma_hat) == (1.0, 0.0, -1.0, 1.0)
    assert (cb.d_alpha, cb.d_sigma, cb.d_alpha_hat, cb.d_sigma_hat) == (-1.0, 1.0, 0.0, 0.0)


def test_trigflow_at_zero():
    cb = coeffs(TransportSpec("trigflow", t_min=0.0), 0.0)
    assert (cb.alpha, cb.sigma, cb.alpha_hat, cb.sigma_hat) == (1.0, 0.0, -0.0, 1.0)


def test_edm_at_one():
    cb = coeffs(TransportSpec("edm"), 1.0)
    h = 1 / math.sqrt(2)
    np.testing.assert_allclose([cb.alpha, cb.sigma, cb.alpha_hat, cb.sigma_hat], [h, h, h, -h], rtol=1e-12)


def test_vp_alpha_uses_square_root():
    spec = TransportSpec("vp")
    t = 0.37
    b = vp_beta(spec, t)
    cb = coeffs(spec, t)
    assert cb.alpha == pytest.approx(1 / math.sqrt(b**2 + 1), rel=1e-12)
    assert cb.sigma == pytest.approx(b / math.sqrt(b**2 + 1), rel=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_out_of_range_raises(kind):
    spec = TransportSpec(kind)
    with pytest.raises(DomainError):
        coeffs(spec, spec.t_max * 1.01 + 1e-3)
    with pytest.raises(DomainError):
        coeffs(spec, spec.t_min - 1e-3)


def test_bad_ranges_rejected():
    with pytest.raises(DomainError):
        TransportSpec("ot-fm", t_min=0.5, t_max=0.5)
    with pytest.raises(DomainError):
        TransportSpec("edm", t_min=0.0)


@pytest.mark.parametrize("kind", KINDS)
def test_derivatives_match_central_differences(kind):
    spec = TransportSpec(kind)
    h = 1e-5
    rng = np.random.default_rng(3)
    t = rng.uniform(spec.t_min + 1e-3, spec.t_max - 1e-3, 100)
    cb, cp, cm = coeffs(spec, t), coeffs(spec, t + h), coeffs(spec, t - h)
    for name in ("alpha", "sigma", "alpha_hat", "sigma_hat"):
        fd = (getattr(cp, name) - getattr(cm, name)) / (2 * h)
        an = getattr(cb, "d_" + name)
        np.testing.assert_allclose(an, fd, rtol=1e-5, atol=1e-8, err_msg=name)


@given(st.floats(1e-4, 1 - 1e-4))
def test_otfm_coefficients_sum_to_one(t):
    cb = coeffs(TransportSpec("ot-fm"), t)
    assert cb.alpha + cb.sigma == 1.0


@given(st.floats(1e-4, math.pi / 2 - 1e-4))
def test_trigflow_on_unit_circle(t):
    cb = coeffs(TransportSpec("trigflow"), t)
    assert abs(cb.alpha**2 + cb.sigma**2 - 1.0) < 1e-12


def test_c_noise_examples():
    assert c_noise(TransportSpec("ot-fm"), 0.3) == 0.3
    assert c_noise(TransportSpec("edm"), 1.0) == 0.0
    assert c_noise(TransportSpec("ve"), 2.0) == 0.0
    assert c_noise(TransportSpec("vp"), 0.5) == pytest.approx(999 * 0.5)
    with pytest.raises(DomainError):
        c_noise(TransportSpec("edm"), 0.0)


def test_time_maps_at_median_draw():
    assert time_from_noise_level(TransportSpec("ot-fm"), 1.0) == 0.5
    assert time_from_noise_level(TransportSpec("trigflow"), 1.0) == pytest.approx(math.pi / 4)
    assert time_from_noise_level(TransportSpec("vp"), 1.0) == 1.0
    ve = TransportSpec("ve")
    assert time_from_noise_level(ve, 0.0) == ve.ve_sigma_max
    assert time_from_noise_level(ve, 1.0) == pytest.approx(ve.ve_sigma_min)


@pytest.mark.parametrize("kind", KINDS)
def test_sample_time_in_range_and_seeded(kind):
    spec = TransportSpec(kind)
    a = sample_time(spec, np.random.default_rng(5), 1000)
    b = sample_time(spec, np.random.default_rng(5), 1000)
    assert np.array_equal(a, b)
    assert a.min() >= spec.t_min and a.max() <= spec.t_max
    assert isinstance(sample_time(spec, np.random.default_rng(0)), float)


def test_otfm_time_median():
    t = sample_time(TransportSpec("ot-fm", p_mean=0.0), np.random.default_rng(0), 200_000)
    assert np.median(t) == pytest.approx(0.5, abs=0.01)


def test_shift_examples():
    assert shift_timestep(0.5, 1.0, 4.0) == pytest.approx(2 / 3)
    assert shift_timestep(0.0, 3.0, 7.0) == 0.0
    assert shift_timestep(1.0, 3.0, 7.0) == 1.0


@given(st.floats(0, 1), st.floats(0.01, 100), st.floats(0.01, 100))
@settings(max_examples=100)
def test_shift_round_trip(t, n, m):
    assert abs(shift_timestep(shift_timestep(t, n, m), m, n) - t) < 1e-12


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.1, 10))
def test_shift_monotone(a, b, ratio):
    lo, hi = min(a, b), max(a, b)
    assert shift_timestep(lo, 1.0, ratio) <= shift_timestep(hi, 1.0, ratio)


@pytest.mark.parametrize("kind", KINDS)
def test_spec_dict_round_trip(kind):
    spec = TransportSpec(kind, sigma_data=0.7)
    assert TransportSpec.from_dict(spec.to_dict()) == spec
