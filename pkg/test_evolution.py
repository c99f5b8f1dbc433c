#!/usr/bin/env python3
# test_evolution.py
"""
Linear and nonlinear cocycles, pair tables, the Gronwall envelope and the
RK4 flow with its discretization

Usage:
    pytest test_evolution.py
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

from core.errors import (ConfigurationError, ContractionFailure, DomainError, IllConditionedError,
                         NumericalError)
from core.evolution import (Flow, LinearCocycle, NonlinearCocycle, ScaledCocycle, discrete_gronwall,
                            gronwall_report)
from core.growth import exponential_rate
from core.sampling import SamplingGrid
from processing.sysdef import load_spec

ROOT = os.path.dirname(os.path.abspath(__file__))
SYSTEMS = os.path.join(ROOT, "systems")


def _spec(name):
    return load_spec(os.path.join(SYSTEMS, f"{name}.json"))


def _random_cocycle(seed_value=0, count=40):
    rng = np.random.default_rng(seed_value)
    matrices = np.eye(3) + 0.1 * rng.normal(size=(count, 3, 3))
    return LinearCocycle.from_matrices(matrices, start=2)


def test_saddle_transfer_is_diagonal_ratio():
    """𝒜(m, n) = diag(n/m, m/n)"""
    cocycle = LinearCocycle.from_spec(_spec("saddle"))
    assert np.allclose(cocycle.transfer(9, 3), np.diag([3 / 9, 9 / 3]))
    assert np.allclose(cocycle.transfer(3, 9), np.diag([9 / 3, 3 / 9]))
    assert np.array_equal(cocycle.transfer(4, 4), np.eye(2))


def test_memo_stats_count_transfer_hits():
    cocycle = LinearCocycle.from_spec(_spec("saddle"))
    cocycle.transfer(9, 3)
    cocycle.transfer(9, 3)
    stats = cocycle.memo_stats()
    assert set(stats) == {"transfers", "factors", "tables"}
    assert stats["transfers"]["hits"] == 1
    assert stats["transfers"]["misses"] == 1
    assert stats["transfers"]["entries"] == 1


def test_single_step_transfer_is_exact():
    cocycle = _random_cocycle()
    for n in range(2, 10):
        assert np.array_equal(cocycle.transfer(n + 1, n), cocycle.step(n))


@settings(max_examples=200, deadline=None)
@seed(21)
@given(m=st.integers(2, 30), k=st.integers(2, 30), n=st.integers(2, 30))
def test_cocycle_property(m, k, n):
    """𝒜(m, k) 𝒜(k, n) = 𝒜(m, n) for any order of the indices"""
    cocycle = _random_cocycle()
    left = cocycle.transfer(m, k) @ cocycle.transfer(k, n)
    right = cocycle.transfer(m, n)
    assert np.allclose(left, right, rtol=1e-8, atol=1e-8 * max(1.0, np.abs(right).max()))


@settings(max_examples=200, deadline=None)
@seed(22)
@given(m=st.integers(1, 40), k=st.integers(1, 40), n=st.integers(1, 40), tau=st.floats(-2.0, 2.0))
def test_scaled_cocycle_property(m, k, n, tau):
    """The τ-scaled cocycle composes like 𝒜"""
    spec = _spec("saddle")
    scaled = ScaledCocycle(LinearCocycle.from_spec(spec), spec.rate, tau)
    left = scaled.transfer(m, k) @ scaled.transfer(k, n)
    right = scaled.transfer(m, n)
    assert np.allclose(left, right, rtol=1e-9, atol=1e-12 * max(1.0, np.abs(right).max()))


def test_transfer_inverse():
    cocycle = _random_cocycle(3)
    assert np.allclose(cocycle.transfer(5, 20) @ cocycle.transfer(20, 5), np.eye(3), atol=1e-8)


def test_solve_step_matches_inverse():
    cocycle = _random_cocycle(4)
    y = np.random.default_rng(5).normal(size=(6, 3))
    assert np.allclose(cocycle.solve_step(7, y), y @ cocycle.step_inverse(7).T)


def test_overflowing_transfer_raises_and_log_form_survives():
    cocycle = LinearCocycle.constant(2.0 * np.eye(2))
    with pytest.raises(NumericalError):
        cocycle.transfer(5000, 0)
    mantissa, scale = cocycle.log_transfer(5000, 0)
    assert np.allclose(mantissa, np.eye(2))
    assert scale == pytest.approx(5000 * math.log(2.0))


def test_singular_step_is_ill_conditioned():
    cocycle = LinearCocycle.constant(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(IllConditionedError) as info:
        cocycle.step(0)
    assert info.value.details["index"] == 0
    assert info.value.exit_code == 3


def test_index_before_start_is_domain_error():
    cocycle = LinearCocycle.from_spec(_spec("saddle"))
    with pytest.raises(DomainError):
        cocycle.step(0)
    with pytest.raises(DomainError):
        cocycle.transfer(2.5, 1)


def test_finite_matrix_list_has_a_window():
    cocycle = LinearCocycle.from_matrices(np.stack([np.eye(2)] * 5), start=0)
    assert np.array_equal(cocycle.transfer(5, 0), np.eye(2))
    with pytest.raises(DomainError):
        cocycle.step(5)


def test_continuous_spec_has_no_direct_cocycle():
    with pytest.raises(ConfigurationError):
        LinearCocycle.from_spec(_spec("saddle_flow"))


def test_scaled_cocycle_multiplies_by_rate_ratio():
    base = _random_cocycle(6)
    rate = exponential_rate()
    scaled = ScaledCocycle(base, rate, 0.7)
    assert np.allclose(scaled.transfer(12, 4), math.exp(-0.7 * 8) * base.transfer(12, 4))
    assert np.allclose(scaled.steps(3, 7), np.stack([scaled.step(n) for n in range(3, 7)]))
    mantissa, scale = scaled.log_transfer(12, 4)
    assert np.allclose(mantissa * math.exp(scale), scaled.transfer(12, 4))


@pytest.mark.parametrize("qr", [False, True])
def test_pair_table_matches_transfers(qr):
    cocycle = _random_cocycle(7)
    grid = [2, 5, 9, 17, 30]
    table = cocycle.pair_table(grid, qr=qr)
    for i, low in enumerate(grid):
        for k in range(i, len(grid)):
            high = grid[k]
            forward = table.forward[i, k] * math.exp(table.forward_log[i, k])
            backward = table.backward[i, k] * math.exp(table.backward_log[i, k])
            expected = cocycle.transfer(high, low)
            scale = max(1.0, np.abs(expected).max())
            assert np.allclose(forward, expected, atol=1e-8 * scale)
            inverse = cocycle.transfer(low, high)
            assert np.allclose(backward, inverse, atol=1e-8 * max(1.0, np.abs(inverse).max()))


def test_push_columns_are_unit_normalized_directions():
    cocycle = LinearCocycle.from_spec(_spec("saddle"))
    pushed = cocycle.push_columns(np.array([[1.0], [1.0]]), 4, [1, 4, 10])
    assert np.allclose(np.linalg.norm(pushed, axis=1), 1.0)
    expected = cocycle.transfer(10, 4) @ np.array([1.0, 1.0])
    assert np.allclose(pushed[2, :, 0], expected / np.linalg.norm(expected))


def test_step_tables_persist_under_cache_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("MUDICHO_CACHE_DIR", str(tmp_path))
    spec = _spec("saddle")
    first = LinearCocycle.from_spec(spec)
    first.ensure(10)
    assert any(name.endswith(".npz") for name in os.listdir(tmp_path))
    second = LinearCocycle.from_spec(spec)
    assert np.array_equal(second.step(7), first.step(7))


def test_nonlinear_forward_backward_round_trip():
    nonlinear = NonlinearCocycle.from_spec(_spec("saddle"))
    x = np.array([[0.3, -0.2], [0.05, 0.4], [0.0, 0.0]])
    y = nonlinear.forward(20, 1, x)
    back = nonlinear.backward(1, 20, y)
    assert np.allclose(back, x, atol=1e-9)
    assert np.array_equal(nonlinear.evaluate(5, 5, x), x)


@settings(max_examples=200, deadline=None)
@seed(23)
@given(m=st.integers(1, 30), n=st.integers(1, 30),
       x=st.lists(st.floats(-0.35, 0.35), min_size=2, max_size=2))
def test_nonlinear_inversion_property(m, n, x):
    """𝒢(n, m)∘𝒢(m, n) = id for either order of m and n"""
    nonlinear = NonlinearCocycle.from_spec(_spec("saddle"))
    x = np.array(x)
    back = nonlinear.evaluate(n, m, nonlinear.evaluate(m, n, x))
    assert np.max(np.abs(back - x)) <= 1e-9


def test_nonlinear_orbit_matches_forward():
    nonlinear = NonlinearCocycle.from_spec(_spec("saddle"))
    x = np.array([0.3, 0.1])
    orbit = nonlinear.orbit(2, x, 8)
    assert orbit.shape == (7, 2)
    assert np.allclose(orbit[-1], nonlinear.forward(8, 2, x))


def test_forward_with_reversed_indices_is_domain_error():
    nonlinear = NonlinearCocycle.from_spec(_spec("saddle"))
    with pytest.raises(DomainError):
        nonlinear.forward(1, 5, np.zeros(2))
    with pytest.raises(DomainError):
        nonlinear.backward(5, 1, np.zeros(2))


def test_backward_step_reports_contraction_failure():
    linear = LinearCocycle.constant(np.eye(1))
    nonlinear = NonlinearCocycle(linear, lambda n, x: 10.0 * x ** 2, max_iters=50)
    with np.errstate(all="ignore"):
        with pytest.raises(ContractionFailure) as info:
            nonlinear.inverse_step(0, np.array([1.0]))
    assert info.value.details["index"] == 0


def test_discrete_gronwall_envelope_bounds_the_extremal_sequence():
    rng = np.random.default_rng(9)
    z = rng.uniform(0.0, 0.3, size=30)
    K, alpha = 1.5, 0.2
    envelope = discrete_gronwall(K, alpha, z)
    u = np.empty(31)
    for m in range(31):
        u[m] = K * (alpha + np.dot(z[:m], u[:m]))
    assert np.all(u <= envelope * (1 + 1e-12))


def test_gronwall_report_for_saddle():
    spec = _spec("saddle")
    nonlinear = NonlinearCocycle.from_spec(spec)
    points = SamplingGrid(radius=0.5).ball(32, 2)
    report = gronwall_report(nonlinear, spec.rate, K=2.0, a=1.0, c=0.01,
                             pairs=[(5, 1), (1, 5), (10, 3)], points=points)
    assert report.a_tilde == pytest.approx(1.0 + 2.0 * 0.01 * 2.0)
    assert report.passed
    assert report.to_dict()["passed"] is True


@settings(max_examples=200, deadline=None)
@seed(24)
@given(m=st.integers(1, 40), n=st.integers(1, 40), offset=st.integers(0, 1000))
def test_gronwall_bounds_hold_on_random_pairs(m, n, offset):
    """‖D𝒢(m, n)‖ and ‖𝒢(m, n)x‖/‖x‖ stay within 10% of K(μ_max/μ_min)^ã"""
    spec = _spec("saddle")
    nonlinear = NonlinearCocycle.from_spec(spec)
    points = SamplingGrid(radius=0.5).ball(8, 2, offset=offset)
    report = gronwall_report(nonlinear, spec.rate, K=2.0, a=1.0, c=0.01, pairs=[(m, n)], points=points)
    assert report.slack == pytest.approx(1.1)
    assert report.passed


# -- continuous time --------------------------------------------------------

def test_rk4_transfer_of_saddle_flow():
    """T(t, s) = diag(s/t, t/s)"""
    flow = Flow(_spec("saddle_flow"))
    assert np.allclose(flow.transfer(5.0, 1.0), np.diag([1 / 5, 5.0]), atol=1e-8)
    assert np.allclose(flow.transfer(1.5, 4.25), np.diag([4.25 / 1.5, 1.5 / 4.25]), atol=1e-8)


def test_rk4_transfer_matches_closed_form_on_seeded_pairs():
    """T(t, s) = diag(s/t, t/s) to 1e-8 for (t, s) drawn from [1, 16]²"""
    flow = Flow(_spec("saddle_flow"))
    rng = np.random.default_rng(11)
    for t, s in rng.uniform(1.0, 16.0, size=(12, 2)):
        expected = np.diag([s / t, t / s])
        assert np.max(np.abs(flow.transfer(t, s) - expected)) <= 1e-8 * max(1.0, t / s, s / t)


@settings(max_examples=200, deadline=None)
@seed(25)
@given(t=st.floats(1.0, 6.0), r=st.floats(1.0, 6.0), s=st.floats(1.0, 6.0))
def test_flow_transfer_property(t, r, s):
    """T(t, r) T(r, s) = T(t, s)"""
    flow = Flow(_spec("saddle_flow"), step=0.01)
    left = flow.transfer(t, r) @ flow.transfer(r, s)
    right = flow.transfer(t, s)
    assert np.allclose(left, right, rtol=1e-7, atol=1e-9)


def test_transfer_through_integer_grid():
    flow = Flow(_spec("saddle_flow"))
    linear, _ = flow.discretize()
    routed = flow.transfer_through(linear, 6.5, 1.25)
    assert np.allclose(routed, np.diag([1.25 / 6.5, 6.5 / 1.25]), atol=1e-8)


def test_discretized_saddle_flow_reproduces_saddle():
    linear, _ = Flow(_spec("saddle_flow")).discretize()
    reference = LinearCocycle.from_spec(_spec("saddle"))
    for n in (1, 2, 7, 30):
        assert np.allclose(linear.step(n), reference.step(n), atol=1e-8)


def test_linear_propagation_matches_transfer():
    flow = Flow(_spec("saddle_flow"))
    x = np.array([[0.2, -0.1], [1.0, 0.5]])
    propagated = flow.propagate(3.0, 1.0, x, nonlinear=False)
    assert np.allclose(propagated, x @ flow.transfer(3.0, 1.0).T, atol=1e-10)


def test_per_sample_times_match_shared_times():
    flow = Flow(_spec("saddle_flow"))
    x = np.array([[0.2, -0.1], [0.3, 0.5]])
    masked = flow.propagate(np.array([3.0, 2.5]), np.array([1.0, 1.0]), x)
    assert np.allclose(masked[0], flow.nonlinear_flow(3.0, 1.0, x[0]), atol=1e-10)
    assert np.allclose(masked[1], flow.nonlinear_flow(2.5, 1.0, x[1]), atol=1e-10)


def test_flow_cocycle_steps_invert():
    _, nonlinear = Flow(_spec("saddle_flow")).discretize()
    x = np.array([0.4, -0.3])
    y = nonlinear.step_map(3, x)
    assert np.allclose(nonlinear.inverse_step(3, y), x, atol=1e-9)


def test_shifted_flow_adds_rate_drift():
    """x′ = −x shifted by τ under μ(t) = e^t decays like e^{−(1+τ)(t−s)}"""
    spec = _spec("decay")
    flow = Flow(spec).shifted(spec.rate, 0.5)
    assert flow.transfer(3.0, 1.0)[0, 0] == pytest.approx(math.exp(-1.5 * 2.0), rel=1e-8)


def test_flow_rejects_bad_setup():
    with pytest.raises(ConfigurationError):
        Flow(_spec("saddle"))
    with pytest.raises(ConfigurationError):
        Flow(_spec("saddle_flow"), step=0.0)
    with pytest.raises(DomainError):
        Flow(_spec("saddle_flow")).transfer(2.0, 0.5)
