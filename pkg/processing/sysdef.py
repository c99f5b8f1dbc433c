# processing/sysdef.py
"""
System-spec files: loading, validation, saving and Lipschitz estimation

A system spec is a single JSON document:

    {
      "kind": "discrete" | "continuous",
      "dim": 2,
      "index_start": 1,
      "growth_rate": {"builtin": "polynomial"}  or  {"expr": "1+n", "theta": 2.0},
      "linear": [["n/(n+1)", "0"], ["0", "(n+1)/n"]],
      "nonlinear": ["c/(n+1)*x1^2*exp(-x1^2)", "c/(n+1)*x2^2*exp(-x2^2)"],
      "constants": {"c": 0.01, "K": 1, "a": 1},
      "projections": [["1", "0"], ["0", "0"]],
      "linearizable": true,
      "metadata": {...}
    }

Expressions use the time variable n (discrete) or t (continuous), states
x1..xd and the declared constants. See docs/formats.md.
"""

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import (ConfigurationError, NumericalError, ParseError, SchemaError,
                         ValidationError)
from core.growth import GrowthRate, RateKind, builtin_rate, verify_ratio_bound
from core.sampling import SamplingGrid
from processing.expr import Const, Expr, compile_expr, parse_expr, substitute

DEFAULT_VALIDATION_WINDOW = 64
DEFAULT_COND_CAP = 1e12
JACOBIAN_STEP = 1e-5

KNOWN_FIELDS = {"kind", "dim", "index_start", "growth_rate", "linear", "nonlinear",
                "constants", "projections", "linearizable", "metadata"}

LINEARIZATION_CONDITION = "g_n(0)=0 and Dg_n(0)=0"


class SystemKind(Enum):
    DISCRETE = "discrete"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class SystemSpec:
    kind: SystemKind
    dim: int
    index_start: int
    rate: GrowthRate = field(compare=False)
    linear: Tuple[Tuple[Expr, ...], ...]
    nonlinear: Tuple[Expr, ...]
    constants: Dict[str, float] = field(default_factory=dict, compare=False)
    projections: Optional[Tuple[Tuple[Expr, ...], ...]] = None
    linearizable: bool = True
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False)
    document: Dict[str, Any] = field(default_factory=dict, compare=False, repr=False)
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        time = self.time_var
        states = [f"x{i + 1}" for i in range(self.dim)]
        folded = lambda node: substitute(node, self.constants)
        object.__setattr__(self, "_linear_fns", [
            [compile_expr(folded(entry), [time]) for entry in row] for row in self.linear])
        object.__setattr__(self, "_nonlinear_fns", [
            compile_expr(folded(entry), [time] + states) for entry in self.nonlinear])
        object.__setattr__(self, "_projection_fns", None if self.projections is None else [
            [compile_expr(folded(entry), [time]) for entry in row] for row in self.projections])
        object.__setattr__(self, "_nonlinear_is_zero", all(
            isinstance(folded(entry), Const) and folded(entry).value == 0.0
            for entry in self.nonlinear))

    @property
    def time_var(self) -> str:
        return "n" if self.kind is SystemKind.DISCRETE else "t"

    @property
    def is_discrete(self) -> bool:
        return self.kind is SystemKind.DISCRETE

    @property
    def nonlinear_is_zero(self) -> bool:
        return self._nonlinear_is_zero

    @property
    def spec_hash(self) -> str:
        canonical = json.dumps(self.document, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def name(self) -> str:
        return str(self.metadata.get("name", "system"))

    def constant(self, name: str, default: Optional[float] = None) -> Optional[float]:
        return self.constants.get(name, default)

    def linear_batch(self, times) -> np.ndarray:
        """A at every time in `times`, shape (T, d, d)"""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        out = np.empty((times.shape[0], self.dim, self.dim))
        with np.errstate(all="ignore"):
            for i, row in enumerate(self._linear_fns):
                for j, fn in enumerate(row):
                    out[:, i, j] = np.broadcast_to(fn(times), times.shape)
        return out

    def linear_matrix(self, time: float) -> np.ndarray:
        return self.linear_batch([time])[0]

    def nonlinear_value(self, time, x) -> np.ndarray:
        """g_n(x) or f(t, x) for x of shape (..., d); time broadcasts against x[..., 0]"""
        x = np.asarray(x, dtype=float)
        if self._nonlinear_is_zero:
            return np.zeros_like(x)
        columns = [x[..., i] for i in range(self.dim)]
        out = np.empty_like(x)
        with np.errstate(all="ignore"):
            for i, fn in enumerate(self._nonlinear_fns):
                out[..., i] = np.broadcast_to(fn(time, *columns), x.shape[:-1])
        return out

    def projection_matrix(self, time: float) -> Optional[np.ndarray]:
        if self._projection_fns is None:
            return None
        out = np.empty((self.dim, self.dim))
        for i, row in enumerate(self._projection_fns):
            for j, fn in enumerate(row):
                out[i, j] = float(np.asarray(fn(float(time))))
        return out

    def with_constants(self, **overrides: float) -> "SystemSpec":
        if not overrides:
            return self
        document = dict(self.document)
        constants = dict(document.get("constants", {}))
        constants.update({k: float(v) for k, v in overrides.items()})
        document["constants"] = constants
        updated = parse_spec(document)
        return replace(updated, flags=self.flags, metadata=self.metadata, rate=self.rate)

    def with_rate(self, rate: GrowthRate) -> "SystemSpec":
        document = dict(self.document)
        if rate.name in ("exponential", "polynomial", "logarithmic"):
            document["growth_rate"] = {"builtin": rate.name}
        return replace(self, rate=rate, document=document)

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.document)


# ---------------------------------------------------------------------------
# Parsing and validation
# ---------------------------------------------------------------------------

def _expr_entry(value: Any, field_name: str, allowed: Sequence[str]) -> Expr:
    if isinstance(value, bool) or not isinstance(value, (str, int, float)):
        raise SchemaError(f"{field_name} must be an expression string or a number", field=field_name)
    source = value if isinstance(value, str) else repr(float(value))
    try:
        return parse_expr(source, allowed)
    except ParseError as e:
        raise SchemaError(f"{field_name}: {e.message}", field=field_name,
                          offset=e.offset, expected=e.expected) from e


def _matrix(value: Any, field_name: str, dim: int, allowed: Sequence[str]) -> Tuple[Tuple[Expr, ...], ...]:
    if not isinstance(value, list) or len(value) != dim:
        raise SchemaError(f"{field_name} must be a list of {dim} rows", field=field_name)
    rows = []
    for i, row in enumerate(value):
        if not isinstance(row, list) or len(row) != dim:
            raise SchemaError(f"{field_name}[{i}] must hold {dim} entries", field=f"{field_name}[{i}]")
        rows.append(tuple(_expr_entry(entry, f"{field_name}[{i}][{j}]", allowed)
                          for j, entry in enumerate(row)))
    return tuple(rows)


def _growth_rate(value: Any, kind: SystemKind, constants: Dict[str, float]) -> GrowthRate:
    rate_kind = RateKind.DISCRETE if kind is SystemKind.DISCRETE else RateKind.DIFFERENTIABLE
    if not isinstance(value, dict):
        raise SchemaError("growth_rate must be an object", field="growth_rate")
    if "builtin" in value:
        try:
            return builtin_rate(str(value["builtin"]), rate_kind)
        except ConfigurationError as e:
            raise SchemaError(e.message, field="growth_rate.builtin") from e
    if "expr" not in value:
        raise SchemaError("growth_rate needs 'builtin' or 'expr'", field="growth_rate")
    if "theta" not in value:
        raise SchemaError("custom growth_rate needs a declared 'theta'", field="growth_rate.theta")
    time = "n" if kind is SystemKind.DISCRETE else "t"
    allowed = [time] + list(constants)
    node = substitute(_expr_entry(value["expr"], "growth_rate.expr", allowed), constants)
    func = compile_expr(node, [time])
    derivative = None
    if "derivative" in value:
        derivative = compile_expr(
            substitute(_expr_entry(value["derivative"], "growth_rate.derivative", allowed), constants),
            [time])
    return GrowthRate(func=func, theta=float(value["theta"]), kind=rate_kind,
                      derivative=derivative, name=str(value.get("name", "custom")))


def parse_spec(document: Dict[str, Any]) -> SystemSpec:
    """Build a SystemSpec from a decoded JSON document (schema checks only)"""
    if not isinstance(document, dict):
        raise SchemaError("system spec must be a JSON object", field="<document>")
    unknown = set(document) - KNOWN_FIELDS
    if unknown:
        raise SchemaError(f"unknown field(s) {sorted(unknown)}", field=sorted(unknown)[0])

    try:
        kind = SystemKind(document.get("kind"))
    except ValueError:
        raise SchemaError("kind must be 'discrete' or 'continuous'", field="kind") from None

    dim = document.get("dim")
    if isinstance(dim, bool) or not isinstance(dim, int) or dim < 1:
        raise SchemaError("dim must be an integer >= 1", field="dim")

    default_start = 0 if kind is SystemKind.DISCRETE else 1
    index_start = document.get("index_start", default_start)
    if isinstance(index_start, bool) or not isinstance(index_start, int) or index_start < 0:
        raise SchemaError("index_start must be an integer >= 0", field="index_start")

    constants_raw = document.get("constants", {})
    if not isinstance(constants_raw, dict):
        raise SchemaError("constants must be an object", field="constants")
    constants: Dict[str, float] = {}
    time = "n" if kind is SystemKind.DISCRETE else "t"
    states = [f"x{i + 1}" for i in range(dim)]
    for name, value in constants_raw.items():
        if not str(name).isidentifier() or name in states or name == time:
            raise SchemaError(f"invalid constant name '{name}'", field=f"constants.{name}")
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise SchemaError(f"constant '{name}' must be a number", field=f"constants.{name}")
        constants[name] = float(value)

    if "growth_rate" not in document:
        raise SchemaError("growth_rate is required", field="growth_rate")
    rate = _growth_rate(document["growth_rate"], kind, constants)

    if "linear" not in document:
        raise SchemaError("linear is required", field="linear")
    linear = _matrix(document["linear"], "linear", dim, [time] + list(constants))

    nonlinear_raw = document.get("nonlinear", ["0"] * dim)
    if not isinstance(nonlinear_raw, list) or len(nonlinear_raw) != dim:
        raise SchemaError(f"nonlinear must be a list of {dim} expressions", field="nonlinear")
    nonlinear = tuple(_expr_entry(entry, f"nonlinear[{i}]", [time] + states + list(constants))
                      for i, entry in enumerate(nonlinear_raw))

    projections = None
    if document.get("projections") is not None:
        projections = _matrix(document["projections"], "projections", dim, [time] + list(constants))

    linearizable = document.get("linearizable", True)
    if not isinstance(linearizable, bool):
        raise SchemaError("linearizable must be a boolean", field="linearizable")

    metadata = document.get("metadata", {})
    if not isinstance(metadata, dict):
        raise SchemaError("metadata must be an object", field="metadata")

    return SystemSpec(kind=kind, dim=dim, index_start=index_start, rate=rate, linear=linear,
                      nonlinear=nonlinear, constants=constants, projections=projections,
                      linearizable=linearizable, metadata=metadata, document=dict(document))


def jacobian(func: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
             step: float = JACOBIAN_STEP) -> np.ndarray:
    """Central-difference Jacobian of a batched map; x is (B, d) or (d,), step scaled by max(1, ‖x‖)"""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    points = np.atleast_2d(x)
    batch, dim = points.shape
    h = step * np.maximum(1.0, np.linalg.norm(points, axis=1))
    offsets = np.eye(dim)[:, None, :] * h[None, :, None]
    stacked = np.concatenate([points[None] + offsets, points[None] - offsets], axis=0)
    values = np.asarray(func(stacked.reshape(2 * dim * batch, dim)))
    values = values.reshape(2, dim, batch, -1)
    jac = (values[0] - values[1]) / (2 * h[None, :, None])
    jac = np.transpose(jac, (1, 2, 0))
    return jac[0] if single else jac


def validate_spec(spec: SystemSpec, window: int = DEFAULT_VALIDATION_WINDOW,
                  cond_cap: float = DEFAULT_COND_CAP) -> SystemSpec:
    """Growth-rate, invertibility, linearization and isometry checks on [index_start, index_start + window]"""
    flags = list(spec.flags)
    # positivity, mu_0 = 1 and strict monotonicity; a theta overrun only warns
    verify_ratio_bound(spec.rate, window)
    if spec.is_discrete:
        times = np.arange(spec.index_start, spec.index_start + window + 1, dtype=float)
    else:
        times = np.linspace(spec.index_start, spec.index_start + window, 4 * window + 1)

    matrices = spec.linear_batch(times)
    finite = np.all(np.isfinite(matrices), axis=(1, 2))
    if not np.all(finite):
        bad = times[int(np.argmin(finite))]
        raise ValidationError(f"linear part is not finite at {spec.time_var}={bad:g}",
                              condition="A finite on the window", index=float(bad))

    if spec.is_discrete:
        conds = np.linalg.cond(matrices)
        bad_mask = ~np.isfinite(conds) | (conds > cond_cap)
        if np.any(bad_mask):
            bad = int(times[int(np.argmax(bad_mask))])
            raise ValidationError(
                f"A_n is not numerically invertible at n={bad} (cond={conds[bad - spec.index_start]:.3g})",
                condition="cond(A_n) < cond_cap", index=bad, cond_cap=cond_cap)
        singular = np.linalg.svd(matrices, compute_uv=False)
        isometric = np.allclose(singular, 1.0, atol=1e-12)
    else:
        isometric = np.allclose(matrices + np.transpose(matrices, (0, 2, 1)), 0.0, atol=1e-12)

    if isometric and "no_dichotomy_expected" not in flags:
        flags.append("no_dichotomy_expected")
        logging.info(f"System '{spec.name}' is isometric on the window - no dichotomy expected")

    if spec.linearizable and not spec.nonlinear_is_zero:
        zeros = np.zeros((times.shape[0], spec.dim))
        at_zero = spec.nonlinear_value(times, zeros)
        norms = np.linalg.norm(at_zero, axis=1)
        if np.any(~np.isfinite(norms) | (norms > 1e-12)):
            bad = times[int(np.argmax(~np.isfinite(norms) | (norms > 1e-12)))]
            raise ValidationError(f"nonlinear part does not vanish at x=0 for {spec.time_var}={bad:g}",
                                  condition=LINEARIZATION_CONDITION, index=float(bad))
        tiled = np.tile(times, 2 * spec.dim)
        jac = jacobian(lambda X: spec.nonlinear_value(tiled, X), zeros)
        worst = np.max(np.abs(np.nan_to_num(jac, nan=np.inf)), axis=(1, 2))
        if np.any(worst > 1e-6):
            bad = times[int(np.argmax(worst > 1e-6))]
            raise ValidationError(
                f"Jacobian of the nonlinear part does not vanish at x=0 for {spec.time_var}={bad:g}",
                condition=LINEARIZATION_CONDITION, index=float(bad))

    logging.info(f"System '{spec.name}' validated on window [{times[0]:g}, {times[-1]:g}]")
    return replace(spec, flags=tuple(flags)) if flags != list(spec.flags) else spec


def load_spec(path: str, window: int = DEFAULT_VALIDATION_WINDOW,
              cond_cap: float = DEFAULT_COND_CAP) -> SystemSpec:
    """Read, parse and validate a system-spec file"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigurationError(f"cannot read system spec '{path}': {e}",
                                 condition="readable spec file", path=path) from e
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"spec file is not valid JSON: {e.msg} at offset {e.pos}",
                          field="<document>", offset=e.pos) from e
    spec = parse_spec(document)
    if not spec.metadata.get("name"):
        metadata = dict(spec.metadata)
        metadata["name"] = os.path.splitext(os.path.basename(path))[0]
        spec = replace(spec, metadata=metadata)
    return validate_spec(spec, window=window, cond_cap=cond_cap)


def save_spec(spec: SystemSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# Lipschitz estimation
# ---------------------------------------------------------------------------

@dataclass
class LipschitzEstimate:
    c_hat: float
    c_witness: Dict[str, Any]
    M_hat: float
    M_witness: Dict[str, Any]
    contraction_product: Optional[float]
    contraction_ok: Optional[bool]
    smallness_ok: Optional[bool]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "c_hat": self.c_hat,
            "c_witness": self.c_witness,
            "M_hat": self.M_hat,
            "M_witness": self.M_witness,
            "contraction_product": self.contraction_product,
            "contraction_ok": self.contraction_ok,
            "smallness_ok": self.smallness_ok,
        }


def contraction_product(c: Optional[float], K: Optional[float], a: Optional[float],
                        theta: float) -> Optional[float]:
    """c K θ^{a+1}; the backward nonlinear steps contract when this is below 1"""
    if c is None or K is None or a is None:
        return None
    return float(c * K * theta ** (a + 1))


def estimate_lipschitz(spec: SystemSpec, window: int, grid: SamplingGrid) -> LipschitzEstimate:
    """Sampled c and M with ‖Dg_n(x)‖ ≤ c μ_n′/μ_n and ‖Dg_n(x) − Dg_n(y)‖ ≤ M (μ_n′/μ_n)‖x − y‖"""
    if not spec.is_discrete:
        raise ConfigurationError("estimate_lipschitz needs a discrete system",
                                 condition="discrete spec")
    points = grid.lattice(spec.dim)
    rng = grid.rng()
    partners = points[rng.permutation(points.shape[0])]
    distinct = np.linalg.norm(points - partners, axis=1) > 0

    logmu = spec.rate.log_values(spec.index_start + window + 1)
    c_hat, M_hat = 0.0, 0.0
    c_witness: Dict[str, Any] = {"n": spec.index_start, "x": points[0].tolist()}
    M_witness: Dict[str, Any] = {"n": spec.index_start, "x": points[0].tolist(), "y": points[0].tolist()}

    for n in range(spec.index_start, spec.index_start + window):
        weight = 1.0 / np.expm1(logmu[n + 1] - logmu[n])
        jac = jacobian(lambda X: spec.nonlinear_value(float(n), X), points)
        if not np.all(np.isfinite(jac)):
            bad = int(np.argmin(np.all(np.isfinite(jac), axis=(1, 2))))
            raise NumericalError(f"Jacobian overflow at n={n}, x={points[bad].tolist()}",
                                 condition="finite Jacobian", index=n, x=points[bad])
        norms = np.linalg.norm(jac, ord=2, axis=(1, 2)) * weight
        best = int(np.argmax(norms))
        if norms[best] > c_hat:
            c_hat = float(norms[best])
            c_witness = {"n": n, "x": points[best].tolist()}

        if np.any(distinct):
            partner_jac = jacobian(lambda X: spec.nonlinear_value(float(n), X), partners)
            diff = np.linalg.norm(jac - partner_jac, ord=2, axis=(1, 2))
            dist = np.linalg.norm(points - partners, axis=1)
            ratios = np.where(distinct, diff / np.where(distinct, dist, 1.0), 0.0) * weight
            best = int(np.argmax(ratios))
            if ratios[best] > M_hat:
                M_hat = float(ratios[best])
                M_witness = {"n": n, "x": points[best].tolist(), "y": partners[best].tolist()}

    K = spec.constant("K")
    a = spec.constant("a")
    c = spec.constant("c", c_hat)
    product = contraction_product(c, K, a, spec.rate.theta)
    contraction_ok = None if product is None else product < 1
    if contraction_ok is False:
        logging.warning(f"Contraction precondition c*K*theta^(a+1) = {product:.4g} >= 1")
    lam = spec.constant("lambda")
    smallness_ok = None
    if lam is not None and K:
        smallness_ok = c_hat <= 0.1 * lam / K
        if not smallness_ok:
            logging.warning(f"Sampled c = {c_hat:.4g} exceeds the heuristic threshold 0.1*lambda/K")

    return LipschitzEstimate(c_hat=c_hat, c_witness=c_witness, M_hat=M_hat, M_witness=M_witness,
                             contraction_product=product, contraction_ok=contraction_ok,
                             smallness_ok=smallness_ok)
