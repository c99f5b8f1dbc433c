#!/usr/bin/env python3
# test_sysdef.py
"""
System-spec parsing, validation, saving and the sampled Lipschitz estimate

Usage:
    pytest test_sysdef.py
"""

import json
import os
import sys

import numpy as np
import pytest

# Add the project root to path to import our modules
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from core.errors import (ConfigurationError, InvalidGrowthRateError, ParseError, SchemaError,
                         ValidationError)
from core.sampling import SamplingGrid
from processing.sysdef import (SystemKind, estimate_lipschitz, jacobian, load_spec, parse_spec,
                               save_spec, validate_spec)

ROOT = os.path.dirname(os.path.abspath(__file__))
SYSTEMS = os.path.join(ROOT, "systems")


def _document(**overrides):
    document = {
        "kind": "discrete",
        "dim": 2,
        "index_start": 1,
        "growth_rate": {"builtin": "polynomial"},
        "linear": [["n/(n+1)", "0"], ["0", "(n+1)/n"]],
        "nonlinear": ["c/(n+1)*x1^2*exp(-x1^2)", "c/(n+1)*x2^2*exp(-x2^2)"],
        "constants": {"c": 0.01},
    }
    document.update(overrides)
    return document


def test_bundled_specs_load():
    for name in ("saddle", "saddle_flow", "band_only", "identity", "rotation", "decay"):
        spec = load_spec(os.path.join(SYSTEMS, f"{name}.json"))
        assert spec.name == name


def test_saddle_matrices_and_perturbation():
    spec = load_spec(os.path.join(SYSTEMS, "saddle.json"))
    assert spec.kind is SystemKind.DISCRETE
    assert np.allclose(spec.linear_matrix(3.0), np.diag([0.75, 4.0 / 3.0]))
    value = spec.nonlinear_value(1.0, np.array([1.0, 0.0]))
    assert value == pytest.approx([0.01 / 2 * np.exp(-1.0), 0.0])
    assert np.allclose(spec.projection_matrix(5.0), np.diag([1.0, 0.0]))


def test_nonlinear_value_is_batched():
    spec = parse_spec(_document())
    x = np.random.default_rng(0).normal(size=(7, 2))
    batch = spec.nonlinear_value(2.0, x)
    rows = np.vstack([spec.nonlinear_value(2.0, row) for row in x])
    assert batch.shape == (7, 2)
    assert np.allclose(batch, rows)


def test_isometric_systems_are_flagged():
    for name in ("identity", "rotation"):
        spec = load_spec(os.path.join(SYSTEMS, f"{name}.json"))
        assert "no_dichotomy_expected" in spec.flags
    assert "no_dichotomy_expected" not in load_spec(os.path.join(SYSTEMS, "saddle.json")).flags


@pytest.mark.parametrize("overrides, field", [
    ({"kind": "hybrid"}, "kind"),
    ({"dim": 0}, "dim"),
    ({"dim": True}, "dim"),
    ({"linear": [["1", "0"]]}, "linear"),
    ({"nonlinear": ["0"]}, "nonlinear"),
    ({"growth_rate": {"expr": "1+n"}}, "growth_rate.theta"),
    ({"growth_rate": {"builtin": "cubic"}}, "growth_rate.builtin"),
    ({"constants": {"x1": 1.0}}, "constants.x1"),
    ({"constants": {"c": float("inf")}}, "constants.c"),
    ({"extra": 1}, "extra"),
])
def test_schema_errors_name_the_field(overrides, field):
    with pytest.raises(SchemaError) as info:
        parse_spec(_document(**overrides))
    assert info.value.field == field
    assert info.value.exit_code == 2


def test_expression_errors_name_entry_and_offset():
    with pytest.raises(SchemaError) as info:
        parse_spec(_document(linear=[["n/(n+", "0"], ["0", "1"]]))
    assert info.value.field == "linear[0][0]"
    assert info.value.details["offset"] == 5
    assert isinstance(info.value.__cause__, ParseError)


def test_nonzero_perturbation_at_origin_rejected():
    spec = parse_spec(_document(nonlinear=["0.1", "0"]))
    with pytest.raises(ValidationError) as info:
        validate_spec(spec)
    assert info.value.condition == "g_n(0)=0 and Dg_n(0)=0"


def test_linear_term_in_perturbation_rejected():
    spec = parse_spec(_document(nonlinear=["0.5*x1", "0"]))
    with pytest.raises(ValidationError):
        validate_spec(spec)


def test_linearizable_false_skips_origin_check():
    spec = parse_spec(_document(nonlinear=["0.5*x1", "0"], linearizable=False))
    assert validate_spec(spec) is spec


def test_singular_step_rejected():
    spec = parse_spec(_document(linear=[["1", "0"], ["0", "0"]], nonlinear=["0", "0"]))
    with pytest.raises(ValidationError) as info:
        validate_spec(spec)
    assert info.value.condition == "cond(A_n) < cond_cap"
    assert info.value.details["index"] == 1


@pytest.mark.parametrize("expr, condition", [
    ("5 - n", "mu_n > 0"),
    ("1/(1+n)", "mu strictly increasing"),
    ("2 + n", "mu_0 = 1"),
])
def test_custom_growth_rate_is_scanned_on_load(tmp_path, expr, condition):
    path = tmp_path / "custom_rate.json"
    path.write_text(json.dumps(_document(growth_rate={"expr": expr, "theta": 2.0})))
    with pytest.raises(InvalidGrowthRateError) as info:
        load_spec(str(path))
    assert info.value.condition == condition
    assert info.value.exit_code == 2


def test_custom_growth_rate_above_theta_only_warns(caplog):
    spec = parse_spec(_document(growth_rate={"expr": "1 + n^2", "theta": 2.0}))
    with caplog.at_level("WARNING"):
        assert validate_spec(spec).rate.theta == 2.0
    assert "Ratio bound violated" in caplog.text


def test_missing_file_is_configuration_error(tmp_path):
    with pytest.raises(ConfigurationError):
        load_spec(str(tmp_path / "absent.json"))


def test_invalid_json_is_schema_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{\"kind\": ")
    with pytest.raises(SchemaError):
        load_spec(str(path))


def test_save_then_load_preserves_system(tmp_path):
    spec = load_spec(os.path.join(SYSTEMS, "saddle.json"))
    path = tmp_path / "copy.json"
    save_spec(spec, str(path))
    again = load_spec(str(path))
    assert again.spec_hash == spec.spec_hash
    assert np.allclose(again.linear_batch([1, 2, 3]), spec.linear_batch([1, 2, 3]))
    assert json.loads(path.read_text())["constants"]["c"] == 0.01


def test_constant_override_changes_hash_and_values():
    spec = load_spec(os.path.join(SYSTEMS, "saddle.json"))
    louder = spec.with_constants(c=0.05)
    x = np.array([0.5, 0.5])
    assert louder.spec_hash != spec.spec_hash
    assert np.allclose(louder.nonlinear_value(3.0, x), 5 * spec.nonlinear_value(3.0, x))


def test_jacobian_of_linear_map():
    matrix = np.array([[1.0, 2.0], [-3.0, 0.5]])
    points = np.random.default_rng(1).normal(size=(5, 2))
    jac = jacobian(lambda X: X @ matrix.T, points)
    assert jac.shape == (5, 2, 2)
    assert np.allclose(jac, matrix, atol=1e-8)
    assert np.allclose(jacobian(lambda X: X @ matrix.T, points[0]), matrix, atol=1e-8)


def test_lipschitz_estimate_for_saddle():
    """‖Dg_n‖ (μ_{n+1}/μ_n − 1)⁻¹ = c |ξ′| ≤ c"""
    spec = load_spec(os.path.join(SYSTEMS, "saddle.json"))
    estimate = estimate_lipschitz(spec, 32, SamplingGrid(radius=0.5, points_per_axis=9))
    assert 0.005 < estimate.c_hat <= 0.01 * (1 + 1e-6)
    assert estimate.contraction_product == pytest.approx(0.01 * 1 * 2.0 ** 2)
    assert estimate.contraction_ok


def test_lipschitz_needs_discrete_spec():
    spec = load_spec(os.path.join(SYSTEMS, "saddle_flow.json"))
    with pytest.raises(ConfigurationError):
        estimate_lipschitz(spec, 8, SamplingGrid())
