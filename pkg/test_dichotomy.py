#!/usr/bin/env python3
# test_dichotomy.py
"""
Projection families and fitted (K, λ, a) certificates

Usage:
    pytest test_dichotomy.py
"""

import os
import sys

import numpy as np
import pytest
from hypothesis import given, seed, settings
from hypothesis import strategies as st

# Add the project root to path to import our modules
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from core.dichotomy import (ProjectionFamily, Verdict, certify, certify_continuous,
                            estimate_projections, fit_certificate, pair_grid)
from core.errors import GapNotResolvedError, WindowError
from core.evolution import Flow, LinearCocycle, ScaledCocycle
from core.growth import builtin_rate, exponential_rate
from processing.sysdef import load_spec

ROOT = os.path.dirname(os.path.abspath(__file__))
SYSTEMS = os.path.join(ROOT, "systems")


def _spec(name):
    return load_spec(os.path.join(SYSTEMS, f"{name}.json"))


@pytest.fixture(scope="module")
def saddle():
    spec = _spec("saddle")
    return spec, LinearCocycle.from_spec(spec)


def test_pair_grid_is_sorted_and_bounded():
    grid = pair_grid(1, 512)
    assert grid[0] == 8
    assert grid[-1] == 512
    assert np.all(np.diff(grid) > 0)
    with pytest.raises(WindowError):
        pair_grid(10, 8)


def test_saddle_certificate_with_analytic_projections(saddle):
    """Under μ_n = n+1 the system has K ≈ 1, λ ≈ 1, a ≈ 1"""
    spec, cocycle = saddle
    projections = ProjectionFamily.analytic(spec)
    cert = certify(cocycle, spec.rate, window=512, projections=projections)
    assert cert.verdict is Verdict.STRONG
    assert abs(cert.lam - 1.0) <= 0.05
    assert abs(cert.a - 1.0) <= 0.05
    assert cert.K <= 1.2
    assert cert.rank == 1
    assert cert.residual_commute <= 1e-12
    assert cert.projections.source == "analytic"


def test_saddle_estimated_projections_match_analytic(saddle):
    spec, cocycle = saddle
    projections = estimate_projections(cocycle, spec.rate, window=512)
    assert np.allclose(projections.at(17), np.diag([1.0, 0.0]), atol=1e-10)
    assert np.allclose(projections.complement(300), np.diag([0.0, 1.0]), atol=1e-10)
    assert projections.details["rank"] == 1


def test_estimated_projections_are_idempotent_and_invariant(saddle):
    spec, cocycle = saddle
    cert = certify(cocycle, spec.rate, window=512)
    assert cert.residual_idempotent <= 1e-10
    assert cert.residual_commute <= 1e-10
    assert cert.is_strong


@pytest.fixture(scope="module")
def saddle_projections(saddle):
    spec, cocycle = saddle
    return estimate_projections(cocycle, spec.rate, window=512)


@settings(max_examples=200, deadline=None)
@seed(31)
@given(m=st.integers(1, 512), n=st.integers(1, 512))
def test_projection_property(saddle, saddle_projections, m, n):
    """P_n² = P_n and P_m 𝒜(m, n) = 𝒜(m, n) P_n"""
    _, cocycle = saddle
    P_n, P_m = saddle_projections.at(n), saddle_projections.at(m)
    transfer = cocycle.transfer(m, n)
    assert np.max(np.abs(P_n @ P_n - P_n)) <= 1e-8
    assert np.max(np.abs(P_m @ transfer - transfer @ P_n)) <= 1e-8 * max(1.0, np.abs(transfer).max())


def test_exponential_rate_is_the_negative_control(saddle):
    """Polynomial decay is invisible on an exponential time scale"""
    spec, cocycle = saddle
    cert = certify(cocycle, exponential_rate(), window=512, projections=ProjectionFamily.analytic(spec))
    assert cert.verdict is Verdict.NONE
    assert cert.lam <= 0.01


@pytest.mark.parametrize("tau", np.round(np.linspace(-0.5, 0.5, 11), 2))
def test_exponential_rate_gives_no_dichotomy_at_any_shift(saddle, tau):
    """(e^{-τ})·A_n is never a strong exponential dichotomy for |τ| ≤ 0.5"""
    spec, cocycle = saddle
    rate = exponential_rate()
    cert = certify(ScaledCocycle(cocycle, rate, tau), rate, window=512,
                   projections=ProjectionFamily.analytic(spec))
    assert cert.verdict is Verdict.NONE


def test_qr_accumulation_agrees(saddle):
    spec, cocycle = saddle
    projections = ProjectionFamily.analytic(spec)
    plain = fit_certificate(cocycle, spec.rate, projections, window=256)
    stable = fit_certificate(cocycle, spec.rate, projections, window=256, qr=True)
    assert stable.lam == pytest.approx(plain.lam, abs=1e-8)
    assert stable.a == pytest.approx(plain.a, abs=1e-8)


def test_constant_diagonal_system():
    """diag(e^{-2}, e^{-1}, e) under μ_n = e^n: λ = 1 and a = 2 exactly"""
    spec = _spec("band_only")
    cocycle = LinearCocycle.from_spec(spec)
    cert = certify(cocycle, spec.rate, window=64, projections=ProjectionFamily.analytic(spec))
    assert cert.verdict is Verdict.STRONG
    assert cert.rank == 2
    assert cert.lam == pytest.approx(1.0, abs=1e-9)
    assert cert.a == pytest.approx(2.0, abs=1e-9)
    assert cert.K == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("name", ["rotation", "identity"])
def test_isometry_has_no_dichotomy(name):
    spec = _spec(name)
    cert = certify(LinearCocycle.from_spec(spec), spec.rate, window=64)
    assert cert.verdict is Verdict.NONE
    assert cert.rank == 0


def test_unresolved_gap_is_reported():
    cocycle = LinearCocycle.constant(np.diag([1.001, 0.999, 5.0]), name="near-neutral")
    with pytest.raises(GapNotResolvedError) as info:
        estimate_projections(cocycle, exponential_rate(), window=32)
    assert info.value.details["suggested_window"] == 64
    assert info.value.exit_code == 3


def test_small_window_is_rejected(saddle):
    spec, cocycle = saddle
    with pytest.raises(WindowError) as info:
        estimate_projections(cocycle, spec.rate, window=16)
    assert info.value.required_window == 32


def test_non_invariant_projections_give_no_verdict(saddle):
    spec, cocycle = saddle
    tilted = ProjectionFamily.constant(np.array([[0.5, 0.5], [0.5, 0.5]]))
    cert = fit_certificate(cocycle, spec.rate, tilted, window=128)
    assert cert.verdict is Verdict.NONE


def test_certificate_serializes_pairs(saddle):
    spec, cocycle = saddle
    cert = certify(cocycle, spec.rate, window=128, projections=ProjectionFamily.analytic(spec))
    data = cert.to_dict()
    assert data["verdict"] == "strong_dichotomy"
    assert len(data["pairs"]) == len(cert.fit_report.x)
    assert set(data["pairs"][0]) == {"n", "m", "x", "y_stable", "y_unstable", "y_forward", "y_backward"}
    assert "pairs" not in cert.to_dict(pair_samples=False)


def test_continuous_certificate_with_spot_check():
    spec = _spec("saddle_flow")
    flow = Flow(spec)
    cert = certify_continuous(flow, spec.rate, window=64, spot_checks=20)
    assert cert.verdict is Verdict.STRONG
    assert cert.rank == 1
    assert cert.spot_check["samples"] == 20
    assert set(cert.spot_check["worst_ratio"]) == {"stable", "unstable", "growth"}
    assert cert.spot_check["K_continuous"] >= cert.K


def test_polynomial_rate_theta_is_used_for_sequences():
    rate = builtin_rate("polynomial")
    assert rate.as_sequence().theta == 2.0
