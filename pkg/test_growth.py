#!/usr/bin/env python3
# test_growth.py
"""
Growth rates, the ratio bound θ and the interpolant μ̃ with its inverse

Usage:
    pytest test_growth.py
"""

import math
import os
import sys

import numpy as np
import pytest
from hypothesis import given, seed, settings
from hypothesis import strategies as st

# Add the project root to path to import our modules
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from core.errors import ConfigurationError, DomainError, InvalidGrowthRateError
from core.growth import (GrowthRate, RateKind, builtin_rate, exponential_rate, interpolate,
                         verify_ratio_bound)

BUILTINS = ("exponential", "polynomial", "logarithmic")


def test_builtin_values():
    """Test the three builtin rates at a few indices"""
    assert builtin_rate("polynomial")(0) == 1.0
    assert builtin_rate("polynomial")(5) == 6.0
    assert builtin_rate("exponential")(3) == pytest.approx(math.e ** 3)
    assert builtin_rate("logarithmic")(0) == pytest.approx(1.0)
    assert builtin_rate("exponential").theta == pytest.approx(math.e)
    assert builtin_rate("polynomial").theta == 2.0
    assert builtin_rate("logarithmic").theta == pytest.approx(math.log(math.e + 1))


def test_unknown_builtin_is_configuration_error():
    with pytest.raises(ConfigurationError):
        builtin_rate("cubic")


def test_exponential_log_stays_exact_past_overflow():
    """ln μ_n = n even where e^n overflows"""
    rate = exponential_rate()
    assert rate.log(5000) == 5000.0
    assert rate.log_ratio(4000, 1000) == 3000.0


def test_ratio_bound_polynomial_attained_at_zero():
    bound = verify_ratio_bound(builtin_rate("polynomial"), 100)
    assert bound.theta_hat == pytest.approx(2.0)
    assert bound.argmax == 0
    assert bound.within_declared


def test_ratio_bound_exponential_is_constant():
    bound = verify_ratio_bound(exponential_rate(), 10)
    assert bound.theta_hat == pytest.approx(math.e)
    assert bound.within_declared


def test_ratio_bound_flags_understated_theta():
    """A declared θ below the true ratio is reported, not raised"""
    rate = GrowthRate(lambda n: 1.0 + n, theta=1.5, name="understated")
    bound = verify_ratio_bound(rate, 20)
    assert not bound.within_declared
    assert bound.theta_hat == pytest.approx(2.0)


def test_ratio_bound_rejects_non_monotone_rate():
    rate = GrowthRate(lambda n: 1.0 + np.sin(n) ** 2, theta=10.0, name="wobbly")
    with pytest.raises(InvalidGrowthRateError):
        verify_ratio_bound(rate, 10)


def test_ratio_bound_rejects_mu0_not_one():
    rate = GrowthRate(lambda n: 2.0 + n, theta=2.0, name="shifted")
    with pytest.raises(InvalidGrowthRateError):
        verify_ratio_bound(rate, 10)


def test_theta_below_one_rejected():
    with pytest.raises(InvalidGrowthRateError):
        GrowthRate(lambda n: 1.0 + n, theta=0.5)


def test_negative_argument_is_domain_error():
    with pytest.raises(DomainError):
        builtin_rate("polynomial")(-1)


def test_interpolant_matches_knots():
    """μ̃(n) = μ_n and μ̃⁻¹(μ_n) = n"""
    for name in BUILTINS:
        rate = builtin_rate(name)
        tilde = interpolate(rate)
        n = np.arange(0, 40, dtype=float)
        assert np.allclose(tilde.forward(n), rate(n), rtol=1e-14)
        assert np.allclose(tilde.inverse_log(rate.log(n)), n, atol=1e-9)


def test_interpolant_is_affine_between_knots():
    tilde = interpolate(builtin_rate("exponential"))
    lower, upper = math.e ** 2, math.e ** 3
    assert tilde.forward(2.25) == pytest.approx(lower + 0.25 * (upper - lower))


def test_interpolant_inverse_below_one_is_domain_error():
    with pytest.raises(DomainError):
        interpolate(builtin_rate("polynomial")).inverse(0.5)


def test_interpolant_needs_discrete_rate():
    with pytest.raises(ConfigurationError):
        interpolate(builtin_rate("polynomial", RateKind.DIFFERENTIABLE))


def test_exponential_anchor_identity():
    """⌊μ̃⁻¹(e^{n-1})⌋ + 1 = n for μ = e^n"""
    tilde = interpolate(exponential_rate())
    n = np.arange(1, 80)
    anchors = np.floor(tilde.inverse_log(n - 1.0) + 1e-12).astype(int) + 1
    assert np.array_equal(anchors, n)


def test_as_sequence_of_differentiable_rate():
    """μ_n = μ(n)/μ(0) for a differentiable rate"""
    rate = builtin_rate("polynomial", RateKind.DIFFERENTIABLE).as_sequence()
    assert rate.kind is RateKind.DISCRETE
    assert rate(0) == pytest.approx(1.0)
    assert rate(9) == pytest.approx(10.0)


def test_numeric_derivative_without_closed_form():
    rate = GrowthRate(lambda t: (1.0 + t) ** 2, theta=4.0, kind=RateKind.DIFFERENTIABLE)
    assert rate.derivative(3.0) == pytest.approx(8.0, rel=1e-6)
    assert rate.log_derivative(3.0) == pytest.approx(0.5, rel=1e-6)


@settings(max_examples=200, deadline=None)
@seed(7)
@given(name=st.sampled_from(BUILTINS), t=st.floats(min_value=0.0, max_value=200.0))
def test_interpolant_round_trip(name, t):
    tilde = interpolate(builtin_rate(name))
    assert tilde.inverse(tilde.forward(t)) == pytest.approx(t, abs=1e-9)


@settings(max_examples=200, deadline=None)
@seed(8)
@given(name=st.sampled_from(BUILTINS), t=st.floats(min_value=0.0, max_value=200.0))
def test_interpolant_one_step_ratio_below_theta_squared(name, t):
    rate = builtin_rate(name)
    tilde = interpolate(rate)
    assert tilde.forward(t + 1.0) / tilde.forward(t) <= rate.theta ** 2 * (1 + 1e-12)
