#!/usr/bin/env python3
# test_expr.py
"""
Expression language: lexer positions, parser errors, printer round trip and
the compiled numpy form

Usage:
    pytest test_expr.py
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

from core.errors import ParseError
from processing.expr import (BinOp, Call, Const, Neg, Var, compile_expr, evaluate, parse_expr,
                             print_expr, substitute, tokenize)

ENV = {"n": np.array([1.0, 2.0, 7.5]), "x1": np.array([-0.3, 0.0, 1.25])}


def test_precedence_and_unary_minus():
    """-x^2 is -(x^2); ^ is right associative"""
    assert evaluate(parse_expr("-x1^2"), {"x1": 3.0}) == -9.0
    assert evaluate(parse_expr("2^3^2"), {}) == 512.0
    assert evaluate(parse_expr("1 + 2*3 - 4/2"), {}) == 5.0


def test_functions_and_constants():
    assert evaluate(parse_expr("exp(ln(2))"), {}) == pytest.approx(2.0)
    assert evaluate(parse_expr("cos(pi)"), {}) == pytest.approx(-1.0)
    assert evaluate(parse_expr("e"), {}) == pytest.approx(math.e)


def test_example_nonlinearity_parses():
    node = parse_expr("c/(n+1)*x1^2*exp(-x1^2)", ["n", "x1", "c"])
    value = evaluate(substitute(node, {"c": 0.01}), {"n": 1.0, "x1": 1.0})
    assert value == pytest.approx(0.01 / 2 * math.exp(-1))


def test_scientific_notation_numbers():
    assert evaluate(parse_expr("1e-3 * 2.5E2"), {}) == pytest.approx(0.25)


def test_token_offsets():
    tokens = tokenize("x1 + 2.5")
    assert [(t.kind, t.offset) for t in tokens] == [("NAME", 0), ("OP", 3), ("NUMBER", 5), ("EOF", 8)]


@pytest.mark.parametrize("source, offset", [
    ("x1 + * 2", 5),
    ("(x1 + 1", 7),
    ("exp x1", 4),
    ("2 $ 3", 2),
    ("1.2.3", 0),
    ("x1 x1", 3),
])
def test_parse_errors_carry_offsets(source, offset):
    with pytest.raises(ParseError) as info:
        parse_expr(source)
    assert info.value.offset == offset
    assert info.value.exit_code == 2


def test_unknown_identifier_rejected_when_variables_given():
    with pytest.raises(ParseError) as info:
        parse_expr("x1 + y", ["x1"])
    assert info.value.offset == 5
    assert "x1" in info.value.expected


def test_overflowing_literal_rejected():
    with pytest.raises(ParseError) as info:
        parse_expr("2 * 1e400 * n")
    assert info.value.offset == 4
    assert "overflows" in info.value.message


def test_non_finite_substituted_constant_compiles():
    node = substitute(parse_expr("big * n - small"), {"big": math.inf, "small": -math.inf})
    compiled = compile_expr(node, ["n"])
    assert compiled(2.0) == math.inf
    assert np.isnan(compile_expr(substitute(parse_expr("q + n"), {"q": math.nan}), ["n"])(1.0))


def test_non_ascii_byte_offset():
    with pytest.raises(ParseError) as info:
        parse_expr("x1 + μ")
    assert info.value.offset == 5


def test_compiled_matches_tree_evaluation():
    node = parse_expr("n/(n+1) + x1^2*exp(-x1^2) - tanh(x1)")
    compiled = compile_expr(node, ["n", "x1"])
    assert np.allclose(compiled(ENV["n"], ENV["x1"]), evaluate(node, ENV))


def test_compile_reports_unbound_variables():
    with pytest.raises(KeyError):
        compile_expr(parse_expr("x1 + x2"), ["x1"])


def test_substitute_leaves_other_names():
    node = substitute(parse_expr("c*x1 + K"), {"c": 2.0})
    assert node.variables() == frozenset({"x1", "K"})


leaves = st.one_of(
    st.floats(min_value=-10, max_value=10, allow_nan=False).map(Const),
    st.sampled_from(["n", "x1"]).map(Var),
)


def _extend(children):
    return st.one_of(
        st.tuples(st.sampled_from(["+", "-", "*", "/", "^"]), children, children).map(
            lambda t: BinOp(t[0], t[1], t[2])),
        children.map(Neg),
        st.tuples(st.sampled_from(["exp", "sin", "tanh", "abs"]), children).map(lambda t: Call(t[0], t[1])),
    )


expressions = st.recursive(leaves, _extend, max_leaves=12)


@settings(max_examples=200, deadline=None)
@seed(11)
@given(node=expressions)
def test_printer_round_trip(node):
    """parse(print(e)) evaluates exactly like e"""
    reparsed = parse_expr(print_expr(node))
    expected = evaluate(node, ENV, shape=(3,))
    actual = evaluate(reparsed, ENV, shape=(3,))
    assert np.array_equal(expected, actual, equal_nan=True)
