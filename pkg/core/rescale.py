# core/rescale.py
"""
Time rescaling of a μ-dichotomy problem into an exponential one

Anchors k(n) = ⌊μ̃⁻¹(e^{n−1})⌋ + 1 cut the source index line into blocks
[k(n), k(n+1)). The rescaled system steps once per block:

    B_n = 𝒜(k(n+1), k(n))        f_n = 𝒢(k(n+1), k(n)) − B_n

so a strong μ-dichotomy of the source is a strong exponential dichotomy of
(B_n). Under μ = e^n the anchors are k(n) = n and nothing changes.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from processing.sysdef import jacobian
from .dichotomy import DichotomyCertificate, ProjectionFamily, Verdict, certify
from .errors import DomainError, WindowError
from .evolution import LinearCocycle, NonlinearCocycle
from .growth import GrowthRate, exponential_rate, interpolate

RESCALED_MIN_WINDOW = 8


def anchor(rate: GrowthRate, n) -> np.ndarray:
    """k(n) = ⌊μ̃⁻¹(e^{n−1})⌋ + 1 for n ≥ 1"""
    n = np.asarray(n, dtype=float)
    if np.any(n < 1):
        raise DomainError("anchors are defined for n >= 1", condition="n >= 1", argument=float(n.min()))
    inverse = interpolate(rate.as_sequence()).inverse_log(n - 1.0)
    return (np.floor(np.asarray(inverse) + 1e-12) + 1).astype(np.int64)


def max_horizon(rate: GrowthRate, source_window: int) -> int:
    """Largest rescaled horizon H whose last anchor k(H+1) lies inside the source window"""
    horizon = 0
    while int(anchor(rate, horizon + 2)) <= source_window:
        horizon += 1
    return horizon


class AnchoredCocycle(NonlinearCocycle):
    """The rescaled nonlinear cocycle: one source block per step"""

    def __init__(self, linear: LinearCocycle, source: NonlinearCocycle, anchors: Dict[int, int]):
        super().__init__(linear, None if source.is_linear else self._difference,
                         max_iters=source.max_iters, tol=source.tol,
                         constants=source.constants, theta=math.e)
        self.source = source
        self.anchors = anchors

    def _difference(self, n: int, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.step_map(n, x) - x @ self.linear.step(n).T

    def step_map(self, n: int, x: np.ndarray) -> np.ndarray:
        return self.source.forward(self.anchors[n + 1], self.anchors[n], x)

    def inverse_step(self, j: int, y: np.ndarray) -> np.ndarray:
        if self.anchors[j] == self.anchors[j + 1]:
            return np.array(y, dtype=float)
        return self.source.backward(self.anchors[j], self.anchors[j + 1], y)


@dataclass
class RescaledSystem:
    anchors: Dict[int, int]
    start: int
    horizon: int
    linear: LinearCocycle
    nonlinear: Optional[AnchoredCocycle]
    source_linear: Any
    source_nonlinear: Optional[NonlinearCocycle]
    rate: GrowthRate
    required_window: int
    source_window: int
    anchor_ratio_max: float
    flags: List[str] = field(default_factory=list)

    def anchor(self, n: int) -> int:
        try:
            return self.anchors[int(n)]
        except KeyError:
            raise WindowError(f"rescaled index {n} is outside [{self.start}, {self.horizon + 1}]",
                              required_window=None, condition="index within the rescaled horizon") from None

    def block(self, k: int) -> int:
        """The rescaled n with k(n) ≤ k < k(n+1)"""
        for n in range(self.start, self.horizon + 1):
            if self.anchors[n] <= k < self.anchors[n + 1]:
                return n
        raise WindowError(f"source index {k} lies outside the anchored blocks "
                          f"[{self.anchors[self.start]}, {self.anchors[self.horizon + 1]})",
                          required_window=k + 1, condition="k(start) <= k < k(horizon+1)")

    def B(self, n: int) -> np.ndarray:
        return self.linear.step(n)

    def f(self, n: int, x: np.ndarray) -> np.ndarray:
        if self.nonlinear is None:
            return np.zeros_like(np.asarray(x, dtype=float))
        return self.nonlinear.perturbation(n, x)

    def rows(self) -> List[Dict[str, Any]]:
        rows = []
        for n in range(self.start, self.horizon + 1):
            row = {"n": n, "k_n": self.anchors[n], "k_next": self.anchors[n + 1]}
            for (i, j), value in np.ndenumerate(self.B(n)):
                row[f"b{i + 1}{j + 1}"] = float(value)
            rows.append(row)
        return rows

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rate": self.rate.name,
            "start": self.start,
            "horizon": self.horizon,
            "required_window": self.required_window,
            "source_window": self.source_window,
            "anchor_ratio_max": self.anchor_ratio_max,
            "anchor_ratio_bound": math.e * self.rate.theta ** 2,
            "anchors": [{"n": n, "k": k} for n, k in sorted(self.anchors.items())],
            "B": [{"n": n, "matrix": self.B(n).tolist()} for n in range(self.start, self.horizon + 1)],
            "flags": list(self.flags),
        }


def rescale(cocycle, rate: GrowthRate, horizon: int, nonlinear: Optional[NonlinearCocycle] = None,
            source_window: Optional[int] = None) -> RescaledSystem:
    """Build (B_n, f_n) for rescaled indices up to `horizon`"""
    rate = rate.as_sequence()
    if horizon < 1:
        raise DomainError(f"rescaled horizon must be >= 1, got {horizon}", condition="horizon >= 1")
    indices = np.arange(1, horizon + 2)
    values = anchor(rate, indices)
    anchors = {int(n): int(k) for n, k in zip(indices, values)}
    start = next((n for n in range(1, horizon + 1) if anchors[n] >= cocycle.start), None)
    if start is None:
        raise WindowError(f"no anchor reaches the source start {cocycle.start} within horizon {horizon}",
                          required_window=None, condition="k(n) >= index_start")
    required = anchors[horizon + 1]
    if source_window is not None and required > source_window:
        raise WindowError(f"rescaled horizon {horizon} needs source indices up to {required}, "
                          f"window is {source_window}", required_window=required,
                          condition="k(horizon+1) <= source window")

    flags: List[str] = []
    log_mu = rate.log_values(required)
    ratios = np.array([log_mu[anchors[n + 1]] - log_mu[anchors[n]] for n in range(start, horizon + 1)])
    ratio_max = float(np.exp(ratios.max()))
    bound = math.e * rate.theta ** 2
    if ratio_max > bound * (1 + 1e-12):
        flags.append("anchor_ratio_bound_violated")
        logging.warning(f"Anchor ratio mu_k(n+1)/mu_k(n) = {ratio_max:.4g} exceeds e*theta^2 = {bound:.4g}")

    matrices = [cocycle.transfer(anchors[n + 1], anchors[n]) for n in range(start, horizon + 1)]
    linear = LinearCocycle.from_matrices(matrices, start=start, name=f"{cocycle.name}-rescaled")
    rescaled = None if nonlinear is None else AnchoredCocycle(linear, nonlinear, anchors)

    logging.info(f"Rescaled {cocycle.name} under {rate.name}: horizon {horizon}, "
                 f"source indices up to {required}")
    return RescaledSystem(anchors=anchors, start=start, horizon=horizon, linear=linear,
                          nonlinear=rescaled, source_linear=cocycle, source_nonlinear=nonlinear,
                          rate=rate, required_window=required,
                          source_window=source_window if source_window is not None else required,
                          anchor_ratio_max=ratio_max, flags=flags)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

@dataclass
class EquivalenceReport:
    source: DichotomyCertificate
    rescaled: DichotomyCertificate
    K_prime: float
    K_prime_witness: Dict[str, int]
    agreement: bool

    def to_dict(self) -> Dict[str, Any]:
        return {"source": self.source.to_dict(pair_samples=False),
                "rescaled": self.rescaled.to_dict(pair_samples=False),
                "K_prime": self.K_prime, "K_prime_witness": self.K_prime_witness,
                "agreement": self.agreement}


def anchored_projections(rs: RescaledSystem, projections: ProjectionFamily) -> ProjectionFamily:
    """P^B_n = P_{k(n)}"""
    return ProjectionFamily(lambda idx: projections.stack([rs.anchor(n) for n in idx]), projections.dim,
                            source=f"anchored-{projections.source}")


def verify_equivalence(rs: RescaledSystem, rate: GrowthRate, source_window: Optional[int] = None,
                       projections: Optional[ProjectionFamily] = None, **options) -> EquivalenceReport:
    """Certify the source under μ and the rescaled system under e^n, then fit K′

    K′ is the smallest constant with ‖ℬ(m, n)‖ ≤ K′ e^{a|m−n|} over the horizon,
    a taken from the source certificate.
    """
    window = source_window if source_window is not None else rs.source_window
    source = certify(rs.source_linear, rate, window, projections=projections, **options)
    rescaled = certify(rs.linear, exponential_rate(), rs.horizon,
                       projections=None if projections is None else anchored_projections(rs, projections),
                       min_window=min(RESCALED_MIN_WINDOW, rs.horizon), **options)

    best, witness = -math.inf, {"m": rs.start, "n": rs.start}
    for n in range(rs.start, rs.horizon + 1):
        for m in range(rs.start, rs.horizon + 1):
            mantissa, scale = rs.linear.log_transfer(m, n)
            value = math.log(np.linalg.norm(mantissa, 2)) + scale - source.a * abs(m - n)
            if value > best:
                best, witness = value, {"m": m, "n": n}
    K_prime = math.exp(best)

    agreement = (source.verdict is Verdict.STRONG) == (rescaled.verdict is Verdict.STRONG)
    if not agreement:
        logging.warning(f"Source verdict {source.verdict.value} and rescaled verdict "
                        f"{rescaled.verdict.value} disagree")
    return EquivalenceReport(source=source, rescaled=rescaled, K_prime=K_prime,
                             K_prime_witness=witness, agreement=agreement)


def fn_series_crosscheck(rs: RescaledSystem, n: int, x: np.ndarray) -> float:
    """‖Σ_j 𝒜(k(n+1), j+1) g_j(𝒢(j, k(n)) x) − f_n(x)‖, the sum over k(n) ≤ j < k(n+1)"""
    x = np.asarray(x, dtype=float)
    lo, hi = rs.anchor(n), rs.anchor(n + 1)
    difference = rs.f(n, x)
    if rs.source_nonlinear is None:
        return float(np.max(np.abs(difference))) if difference.size else 0.0
    source = rs.source_nonlinear
    orbit = source.orbit(lo, x, hi)
    series = np.zeros_like(x)
    for offset, j in enumerate(range(lo, hi)):
        term = source.perturbation(j, orbit[offset])
        series = series + term @ rs.source_linear.transfer(hi, j + 1).T
    return float(np.max(np.linalg.norm(np.atleast_2d(series - difference), axis=1)))


def df_bound_report(rs: RescaledSystem, K: float, a: float, c: float, points: np.ndarray,
                    slack: float = 1.1) -> Dict[str, Any]:
    """Sampled max ‖Df_n(x)‖ against c·C, C = θ^{1+2(a+ã)} K² e^{a+ã} ln(θ² e), ã = a + Kcθ"""
    theta = rs.rate.theta
    a_tilde = a + K * c * theta
    C = theta ** (1 + 2 * (a + a_tilde)) * K ** 2 * math.exp(a + a_tilde) * math.log(theta ** 2 * math.e)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    worst, witness = 0.0, {}
    for n in range(rs.start, rs.horizon + 1):
        norms = np.linalg.norm(jacobian(lambda X: rs.f(n, X), points), ord=2, axis=(1, 2))
        i = int(np.argmax(norms))
        if norms[i] > worst:
            worst, witness = float(norms[i]), {"n": n, "x": points[i].tolist()}
    bound = c * C
    return {"max_df": worst, "witness": witness, "C": C, "bound": bound,
            "ratio": worst / bound if bound > 0 else math.inf,
            "passed": worst <= slack * bound}
