# core/linearize.py
"""
Linearizing conjugacies

Base level: for a system x_{n+1} = B_n x_n + f_n(x_n) with an exponential
dichotomy, h_n = id + v_n with

    v_n(x) = −Σ_{j<n} ℬ(n, j+1) P_{j+1} f_j(x_j) + Σ_{n≤j<J} ℬ(n, j+1) Q_{j+1} f_j(x_j)

along the orbit x_j = 𝒢(j, n)(x), with f_j := 0 before the first index and a
fixed terminal index J. Then h_{n+1}∘(B_n + f_n) = B_n∘h_n.

Source level: ψ_k = 𝒜(k, k(m)) ∘ h_m ∘ 𝒢(k(m), k) on the block
k(m) ≤ k < k(m+1) of the rescaled system, and ψ_{k+1}∘(A_k + g_k) = A_k∘ψ_k.

Continuous time: H(t, x) = T(t, n) ψ_n(φ(n, t; x)) and
G(t, x) = φ(t, n; ψ_n⁻¹(T(n, t) x)) for n = ⌊t⌋.
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from processing.sysdef import contraction_product, jacobian
from .dichotomy import DichotomyCertificate, ProjectionFamily
from .errors import (ContractionFailure, DichotomyTooWeakError, IllConditionedError, NumericalError,
                     WindowError)
from .evolution import Flow, NonlinearCocycle
from .growth import GrowthRate
from .rescale import RescaledSystem, anchored_projections, max_horizon, rescale
from .sampling import SamplingGrid

DEFAULT_TAIL_EPS = 1e-12
GROWTH_CAP = 1e8
INVERSE_TOL = 1e-10
INVERSE_MAX_ITERS = 500
HOLDER_SCALES = np.logspace(-1, -4, 7)
DIFF_RADII = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)


def _batch(x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    return np.atleast_2d(x), x.ndim == 1


class BaseConjugacy:
    """h_n = id + v_n for a nonlinear cocycle with an exponential dichotomy"""

    def __init__(self, nonlinear: NonlinearCocycle, projections: ProjectionFamily, terminal: int,
                 tail_eps: float = DEFAULT_TAIL_EPS):
        self.nonlinear = nonlinear
        self.linear = nonlinear.linear
        self.projections = projections
        self.terminal = int(terminal)
        self.tail_eps = float(tail_eps)
        self.start = self.linear.start
        self.terms_used: Dict[str, int] = {"stable": 0, "unstable": 0}

    def _accept(self, term: np.ndarray, j: int, scale: float) -> float:
        norm = float(np.max(np.linalg.norm(term, axis=1))) if term.size else 0.0
        if not math.isfinite(norm):
            raise NumericalError(f"series term at j={j} is not finite", condition="finite series", index=j)
        if norm > GROWTH_CAP * scale:
            raise DichotomyTooWeakError(
                f"series term at j={j} has norm {norm:.3g}; the dichotomy is too weak for this nonlinearity",
                index=j, condition="summable Green's-function series")
        return norm

    def correction(self, n: int, x) -> np.ndarray:
        """v_n(x)"""
        x, single = _batch(x)
        total = np.zeros_like(x)
        if self.nonlinear.is_linear:
            return total[0] if single else total
        if not self.start <= n <= self.terminal:
            raise WindowError(f"base index {n} outside [{self.start}, {self.terminal}]",
                              required_window=None, condition="start <= n <= terminal")
        scale = max(1.0, float(np.max(np.linalg.norm(x, axis=1))))
        eye = np.eye(self.linear.dim)

        # forward: ℬ(n, j+1) Q_{j+1} f_j(x_j) for n ≤ j < J
        state, transfer = x, eye
        previous, quiet = math.inf, 0
        for j in range(n, self.terminal):
            following = self.nonlinear.step_map(j, state)
            forcing = following - state @ self.linear.step(j).T
            transfer = transfer @ self.linear.step_inverse(j)
            term = forcing @ (transfer @ self.projections.complement(j + 1)).T
            norm = self._accept(term, j, scale)
            total += term
            self.terms_used["unstable"] = j - n + 1
            quiet = quiet + 1 if norm < self.tail_eps and norm <= previous else 0
            if quiet >= 2:
                break
            previous, state = norm, following

        # backward: −ℬ(n, j+1) P_{j+1} f_j(x_j) for start ≤ j < n
        state, transfer = x, eye
        previous, quiet = math.inf, 0
        for j in range(n - 1, self.start - 1, -1):
            earlier = self.nonlinear.inverse_step(j, state)
            forcing = state - earlier @ self.linear.step(j).T
            term = forcing @ (transfer @ self.projections.at(j + 1)).T
            norm = self._accept(term, j, scale)
            total -= term
            self.terms_used["stable"] = n - j
            quiet = quiet + 1 if norm < self.tail_eps and norm <= previous else 0
            if quiet >= 2:
                break
            transfer = transfer @ self.linear.step(j)
            previous, state = norm, earlier
        return total[0] if single else total

    def __call__(self, n: int, x) -> np.ndarray:
        return np.asarray(x, dtype=float) + self.correction(n, x)

    def residual(self, n: int, x) -> np.ndarray:
        """‖h_{n+1}(F_n x) − B_n h_n(x)‖ per sample"""
        x, _ = _batch(x)
        left = self(n + 1, self.nonlinear.step_map(n, x))
        right = self(n, x) @ self.linear.step(n).T
        return np.linalg.norm(left - right, axis=1)


def base_conjugacy(certificate: DichotomyCertificate, nonlinear: NonlinearCocycle, n: int, x,
                   tail_eps: float = DEFAULT_TAIL_EPS, k_max: Optional[int] = None) -> np.ndarray:
    """h_n(x) for a system certified under the exponential rate; J = k_max (default 10·window)"""
    terminal = k_max if k_max is not None else 10 * certificate.window
    return BaseConjugacy(nonlinear, certificate.projections, terminal, tail_eps)(n, x)


# ---------------------------------------------------------------------------
# Source-level field
# ---------------------------------------------------------------------------

class ConjugacyField:
    """ψ_k assembled from base conjugacies of the rescaled system"""

    def __init__(self, rescaled: RescaledSystem, projections: ProjectionFamily,
                 certificate: Optional[DichotomyCertificate] = None, tail_eps: float = DEFAULT_TAIL_EPS):
        self.rescaled = rescaled
        self.projections = projections
        self.certificate = certificate
        self.tail_eps = tail_eps
        self.source = rescaled.source_nonlinear
        self.linear = rescaled.source_linear
        self.dim = self.linear.dim
        self.terminal = rescaled.horizon + 1
        self.base = None
        if rescaled.nonlinear is not None and not rescaled.nonlinear.is_linear:
            self.base = BaseConjugacy(rescaled.nonlinear, anchored_projections(rescaled, projections),
                                      self.terminal, tail_eps)
        logging.info(f"ConjugacyField initialized (terminal J={self.terminal}, "
                     f"source indices [{self.k_min}, {self.k_max}])")

    @property
    def k_min(self) -> int:
        return self.rescaled.anchor(self.rescaled.start)

    @property
    def k_max(self) -> int:
        """Largest k with ψ_k available"""
        return self.rescaled.anchor(self.terminal) - 1

    @property
    def k_range(self) -> Tuple[int, int]:
        """Source indices where the conjugacy identity can be checked"""
        return self.k_min, self.k_max - 1

    @property
    def is_identity(self) -> bool:
        return self.base is None

    def psi(self, k: int, x) -> np.ndarray:
        """ψ_k(x)"""
        x, single = _batch(x)
        if self.is_identity:
            out = x.copy()
        else:
            m = self.rescaled.block(k)
            anchor = self.rescaled.anchor(m)
            pulled = self.source.evaluate(anchor, k, x)
            out = self.base(m, pulled) @ self.linear.transfer(k, anchor).T
        return out[0] if single else out

    def psi_many(self, ks: Sequence[int], xs: np.ndarray) -> np.ndarray:
        """ψ_{k_i}(x_i), grouped by k"""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        out = np.empty_like(xs)
        groups: Dict[int, List[int]] = defaultdict(list)
        for i, k in enumerate(ks):
            groups[int(k)].append(i)
        for k, rows in groups.items():
            out[rows] = self.psi(k, xs[rows])
        return out

    def inverse_psi(self, k: int, y, tol: float = INVERSE_TOL, max_iters: int = INVERSE_MAX_ITERS,
                    damping: float = 1.0) -> np.ndarray:
        """Solve ψ_k(x) = y by x ← x − ω(ψ_k(x) − y)"""
        y, single = _batch(y)
        x = y.copy()
        if not self.is_identity:
            residual = math.inf
            for _ in range(max_iters):
                gap = self.psi(k, x) - y
                residual = float(np.max(np.linalg.norm(gap, axis=1)))
                if residual <= tol:
                    break
                x = x - damping * gap
            else:
                raise ContractionFailure(f"inverse of psi_{k} did not converge in {max_iters} iterations "
                                         f"(residual {residual:.3g})", index=k, residual=residual)
        return x[0] if single else x

    def residuals(self, ks: Sequence[int], xs: np.ndarray) -> np.ndarray:
        """‖ψ_{k+1}(A_k x + g_k(x)) − A_k ψ_k(x)‖ per sample"""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        out = np.empty(len(xs))
        groups: Dict[int, List[int]] = defaultdict(list)
        for i, k in enumerate(ks):
            groups[int(k)].append(i)
        for k, rows in groups.items():
            points = xs[rows]
            image = points @ self.linear.step(k).T if self.source is None else self.source.step_map(k, points)
            left = self.psi(k + 1, image)
            right = self.psi(k, points) @ self.linear.step(k).T
            out[rows] = np.linalg.norm(left - right, axis=1)
        return out

    def base_residuals(self, ns: Sequence[int], xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        if self.is_identity:
            return np.zeros(len(xs))
        return np.concatenate([self.base.residual(int(n), xs[i:i + 1]) for i, n in enumerate(ns)])

    def tail_bound(self, n: int) -> Optional[float]:
        """K c Σ_{j≥J} e^{−λ(j−n)} from the certificate"""
        cert = self.certificate
        c = None if self.source is None else self.source.constants.get("c")
        if cert is None or c is None or cert.lam <= 0:
            return None
        return cert.K * c * math.exp(-cert.lam * (self.terminal - n)) / -math.expm1(-cert.lam)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "terminal": self.terminal,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "tail_eps": self.tail_eps,
            "identity": self.is_identity,
            "projection_source": self.projections.source,
            "rescaled": {"horizon": self.rescaled.horizon, "start": self.rescaled.start,
                         "required_window": self.rescaled.required_window},
            "certificate": None if self.certificate is None else self.certificate.to_dict(pair_samples=False),
        }


def build_field(cocycle, nonlinear: Optional[NonlinearCocycle], rate: GrowthRate,
                projections: ProjectionFamily, window: int, certificate: Optional[DichotomyCertificate] = None,
                tail_eps: float = DEFAULT_TAIL_EPS, k_max: Optional[int] = None) -> ConjugacyField:
    """Rescale up to source index k_max (default 10·window) and assemble the field"""
    k_max = k_max if k_max is not None else 10 * window
    horizon = max_horizon(rate, k_max)
    if horizon < 1:
        raise WindowError(f"k_max={k_max} does not cover two rescaled blocks",
                          required_window=None, condition="k(2) <= k_max")
    system = rescale(cocycle, rate, horizon, nonlinear=nonlinear, source_window=k_max)
    if certificate is not None and nonlinear is not None:
        _check_smallness(nonlinear, certificate, rate)
    return ConjugacyField(system, projections, certificate, tail_eps)


def _check_smallness(nonlinear: NonlinearCocycle, certificate: DichotomyCertificate, rate: GrowthRate) -> None:
    c = nonlinear.constants.get("c")
    if c is None:
        return
    product = contraction_product(c, certificate.K, certificate.a, rate.theta)
    if product is not None and product >= 1:
        logging.warning(f"Smallness: c*K*theta^(a+1) = {product:.4g} >= 1 with fitted constants")
    if certificate.lam > 0 and c > 0.1 * certificate.lam / certificate.K:
        logging.warning(f"Smallness: c = {c:.4g} exceeds 0.1*lambda/K = {0.1 * certificate.lam / certificate.K:.4g}")


# ---------------------------------------------------------------------------
# Continuous time
# ---------------------------------------------------------------------------

class ContinuousConjugacy:
    """H and G for a flow, from the field of its discretization"""

    def __init__(self, flow: Flow, field: ConjugacyField):
        self.flow = flow
        self.field = field

    def _groups(self, t) -> Dict[int, np.ndarray]:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        blocks = np.floor(t).astype(int)
        return {int(n): np.flatnonzero(blocks == n) for n in np.unique(blocks)}

    def _linear(self, t, s, v: np.ndarray) -> np.ndarray:
        return self.flow.propagate(t, s, v, nonlinear=False)

    def H(self, t, x) -> np.ndarray:
        """T(t, n) ψ_n(φ(n, t; x))"""
        x, single = _batch(x)
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
        out = np.empty_like(x)
        for n, rows in self._groups(t).items():
            pulled = self.flow.propagate(float(n), t[rows], x[rows])
            out[rows] = self._linear(t[rows], float(n), self.field.psi(n, pulled))
        return out[0] if single else out

    def G(self, t, x) -> np.ndarray:
        """φ(t, n; ψ_n⁻¹(T(n, t) x))"""
        x, single = _batch(x)
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
        out = np.empty_like(x)
        for n, rows in self._groups(t).items():
            pulled = self._linear(float(n), t[rows], x[rows])
            out[rows] = self.flow.propagate(t[rows], float(n), self.field.inverse_psi(n, pulled))
        return out[0] if single else out


def continuous_conjugacy(flow: Flow, field: ConjugacyField, t, x, direction: str = "H") -> np.ndarray:
    conjugacy = ContinuousConjugacy(flow, field)
    if direction == "H":
        return conjugacy.H(t, x)
    if direction == "G":
        return conjugacy.G(t, x)
    raise ValueError(f"direction must be 'H' or 'G', got {direction!r}")


# ---------------------------------------------------------------------------
# Regularity
# ---------------------------------------------------------------------------

@dataclass
class RegularityReport:
    deriv_bound: float
    deriv_witness: Dict[str, Any]
    inv_deriv_bound: float
    inv_deriv_witness: Dict[str, Any]
    holder_exponent: Optional[float]
    holder_table: List[Dict[str, Any]]
    diff_at_zero: List[Dict[str, Any]]
    rho_hat: Optional[float]
    rho_formula: Optional[float]
    rho_tested: Optional[float]
    flags: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "deriv_bound": self.deriv_bound,
            "deriv_witness": self.deriv_witness,
            "inv_deriv_bound": self.inv_deriv_bound,
            "inv_deriv_witness": self.inv_deriv_witness,
            "holder_exponent": self.holder_exponent,
            "holder_table": self.holder_table,
            "diff_at_zero": self.diff_at_zero,
            "rho_hat": self.rho_hat,
            "rho_formula_per_unit_rho1": self.rho_formula,
            "rho_tested": self.rho_tested,
            "flags": list(self.flags),
        }


def derivative_bounds(field: ConjugacyField, ks: Sequence[int], points: np.ndarray) -> Dict[str, Any]:
    """max ‖Dψ_k(x)‖ and max ‖Dψ_k(x)⁻¹‖ over ks × points, with witnesses"""
    best, best_inv = 0.0, 0.0
    witness: Dict[str, Any] = {}
    witness_inv: Dict[str, Any] = {}
    for k in ks:
        jac = jacobian(lambda X: field.psi(k, X), points)
        norms = np.linalg.norm(jac, ord=2, axis=(1, 2))
        try:
            inverses = np.linalg.inv(jac)
        except np.linalg.LinAlgError as e:
            singular = int(np.argmin(np.abs(np.linalg.det(jac))))
            raise IllConditionedError(f"Dpsi_k is singular at k={k}, x={points[singular].tolist()}", index=int(k),
                                      condition="Dpsi_k(x) invertible", x=points[singular].tolist()) from e
        inverse_norms = np.linalg.norm(inverses, ord=2, axis=(1, 2))
        i, j = int(np.argmax(norms)), int(np.argmax(inverse_norms))
        if norms[i] > best:
            best, witness = float(norms[i]), {"k": int(k), "x": points[i].tolist()}
        if inverse_norms[j] > best_inv:
            best_inv, witness_inv = float(inverse_norms[j]), {"k": int(k), "x": points[j].tolist()}
    return {"deriv_bound": best, "deriv_witness": witness,
            "inv_deriv_bound": best_inv, "inv_deriv_witness": witness_inv}


def _fit_slope(logx: np.ndarray, logy: np.ndarray) -> Optional[float]:
    finite = np.isfinite(logy)
    if finite.sum() < 2:
        return None
    slope, _ = np.polyfit(logx[finite], logy[finite], 1)
    return float(slope)


def regularity_report(field: ConjugacyField, grid: SamplingGrid, ks: Optional[Sequence[int]] = None,
                      samples: int = 64, rho1: float = 1.0) -> RegularityReport:
    """Finite-difference C¹ bounds, Hölder slope, near-identity table and ρ diagnostics"""
    if ks is None:
        ks = range(field.k_min, min(field.k_max, field.k_min + 31) + 1)
    ks = list(ks)
    d = field.dim
    flags: List[str] = []

    points = grid.lattice(d)
    bounds = derivative_bounds(field, ks, points)

    # Hölder: ‖ψ(x) − ψ(y)‖ against ‖x − y‖ at shrinking scales
    base_points = grid.ball(samples, d, offset=1)
    directions = grid.sphere(samples, d, 1.0, offset=2)
    holder_table = []
    for delta in HOLDER_SCALES:
        if delta < 1e-6:
            continue
        worst, witness = 0.0, {}
        for k in ks:
            gaps = np.linalg.norm(field.psi(k, base_points + delta * directions) - field.psi(k, base_points), axis=1)
            i = int(np.argmax(gaps))
            if gaps[i] > worst:
                worst, witness = float(gaps[i]), {"k": int(k), "x": base_points[i].tolist()}
        holder_table.append({"scale": float(delta), "max_difference": worst, "witness": witness})
    with np.errstate(divide="ignore"):
        holder = _fit_slope(np.log([row["scale"] for row in holder_table]),
                            np.log([row["max_difference"] for row in holder_table]))

    # ψ_k(x) = x + o(‖x‖^{1+ϱ})
    diff_table = []
    for r in DIFF_RADII:
        sphere = grid.sphere(samples, d, r, offset=3)
        worst, witness = 0.0, {}
        for k in ks:
            ratios = np.linalg.norm(field.psi(k, sphere) - sphere, axis=1) / r
            i = int(np.argmax(ratios))
            if ratios[i] > worst:
                worst, witness = float(ratios[i]), {"k": int(k), "x": sphere[i].tolist()}
        diff_table.append({"radius": r, "max_relative_difference": worst, "witness": witness})
    with np.errstate(divide="ignore"):
        rho_hat = _fit_slope(np.log([row["radius"] for row in diff_table]),
                             np.log([row["max_relative_difference"] for row in diff_table]))
    values = [row["max_relative_difference"] for row in diff_table]
    if any(later > earlier * (1 + 1e-9) for earlier, later in zip(values, values[1:])):
        flags.append("diff_at_zero_not_monotone")

    cert = field.certificate
    rho_formula = None
    if cert is not None and field.source is not None and "c" in field.source.constants:
        theta = field.rescaled.rate.theta
        a_tilde = cert.a + cert.K * field.source.constants["c"] * theta
        rho_formula = rho1 / (cert.K * (math.e * theta ** 2) ** a_tilde)

    rho_tested = None
    for radius in (0.5, 0.25, 0.1, 0.05):
        coarse = SamplingGrid(radius, grid.points_per_axis, grid.seed)
        first = derivative_bounds(field, ks[:4], coarse.lattice(d))["deriv_bound"]
        second = derivative_bounds(field, ks[:4], coarse.denser().lattice(d))["deriv_bound"]
        if abs(second - first) <= 0.05 * max(first, 1e-300):
            rho_tested = radius
            break

    return RegularityReport(deriv_bound=bounds["deriv_bound"], deriv_witness=bounds["deriv_witness"],
                            inv_deriv_bound=bounds["inv_deriv_bound"],
                            inv_deriv_witness=bounds["inv_deriv_witness"], holder_exponent=holder,
                            holder_table=holder_table, diff_at_zero=diff_table, rho_hat=rho_hat,
                            rho_formula=rho_formula, rho_tested=rho_tested, flags=flags)
