# core/dichotomy.py
"""
Strong μ-dichotomy certificates on a finite window

A cocycle admits a strong μ-dichotomy with projections P_n (Q_n = Id − P_n)
when, for m ≥ n,

    ‖𝒜(m,n) P_n‖ ≤ K (μ_m/μ_n)^{-λ}      ‖𝒜(n,m) Q_m‖ ≤ K (μ_m/μ_n)^{-λ}
    ‖𝒜(m,n)‖     ≤ K (μ_m/μ_n)^{a}       ‖𝒜(n,m)‖     ≤ K (μ_m/μ_n)^{a}

with λ > 0 and a ≥ λ. Rates are least-squares slopes over the tail pairs,
K is the largest residual intercept over every pair, so the inequalities hold
on the window with the reported constants.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .cache import StepMemo
from .errors import GapNotResolvedError, WindowError
from .evolution import Flow
from .growth import GrowthRate

MIN_WINDOW = 32
DEFAULT_WINDOW = 256
DEFAULT_LAMBDA_MIN = 0.01
DEFAULT_K_CAP = 1e3
DEFAULT_GAP_FACTOR = 10.0
DEFAULT_GRID_DENSITY = 40
COMMUTE_TOLERANCE = 1e-6
SPOT_CHECK_SPAN = 8.0


class Verdict(Enum):
    STRONG = "strong_dichotomy"
    DICHOTOMY_ONLY = "dichotomy_only"
    NONE = "none"


def pair_grid(start: int, window: int, burn_in: Optional[int] = None,
              density: int = DEFAULT_GRID_DENSITY) -> np.ndarray:
    """Log-spaced integer indices in [max(start, window//64), window]"""
    lo = max(start, window // 64) if burn_in is None else max(start, int(burn_in))
    if window <= lo:
        raise WindowError(f"window {window} leaves no pairs after index {lo}",
                          required_window=max(2 * lo, MIN_WINDOW), condition="window > first pair index")
    grid = np.round(np.geomspace(max(lo, 1), window, density)).astype(int)
    grid = np.unique(np.concatenate([[lo], grid]))
    return grid[(grid >= lo) & (grid <= window)]


# ---------------------------------------------------------------------------
# Projection families
# ---------------------------------------------------------------------------

class ProjectionFamily:
    """n ↦ P_n, evaluated lazily and memoized

    `batch` maps an index list to stacked projections; every family is built
    from one.
    """

    def __init__(self, batch: Callable[[List[int]], np.ndarray], dim: int,
                 source: str = "estimated", details: Optional[Dict[str, Any]] = None):
        self._batch = batch
        self.dim = dim
        self.source = source
        self.details = dict(details or {})
        self._memo = StepMemo()

    @classmethod
    def constant(cls, matrix: np.ndarray, source: str = "constant") -> "ProjectionFamily":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        return cls(lambda idx: np.broadcast_to(matrix, (len(idx),) + matrix.shape).copy(),
                   matrix.shape[0], source=source)

    @classmethod
    def analytic(cls, spec) -> Optional["ProjectionFamily"]:
        """Projections declared in the system spec, or None"""
        if spec.projections is None:
            return None
        return cls(lambda idx: np.stack([spec.projection_matrix(float(n)) for n in idx]),
                   spec.dim, source="analytic")

    @classmethod
    def from_subspaces(cls, cocycle, stable: np.ndarray, stable_ref: int,
                       unstable: np.ndarray, unstable_ref: int, **details) -> "ProjectionFamily":
        """P_n onto 𝒜(n, stable_ref)·stable along 𝒜(n, unstable_ref)·unstable"""
        d = cocycle.dim
        k = stable.shape[1]
        if k == d:
            return cls.constant(np.eye(d), source="estimated")
        if k == 0:
            return cls.constant(np.zeros((d, d)), source="estimated")
        split = np.diag([1.0] * k + [0.0] * (d - k))

        def batch(indices: List[int]) -> np.ndarray:
            image = cocycle.push_columns(stable, stable_ref, indices)
            kernel = cocycle.push_columns(unstable, unstable_ref, indices)
            basis = np.concatenate([image, kernel], axis=2)
            return basis @ split @ np.linalg.inv(basis)

        return cls(batch, d, source="estimated", details={"rank": k, **details})

    def at(self, n: int) -> np.ndarray:
        cached = self._memo.get(int(n))
        if cached is None:
            cached = self._memo.put(int(n), self._batch([int(n)])[0])
        return cached

    def complement(self, n: int) -> np.ndarray:
        return np.eye(self.dim) - self.at(n)

    def stack(self, indices: Sequence[int]) -> np.ndarray:
        indices = [int(n) for n in indices]
        missing = [n for n in dict.fromkeys(indices) if self._memo.get(n) is None]
        if missing:
            for n, matrix in zip(missing, self._batch(missing)):
                self._memo.put(n, matrix)
        return np.stack([self._memo.get(n) for n in indices])

    def samples(self, indices: Sequence[int]) -> Dict[str, Any]:
        return {str(int(n)): matrix.tolist() for n, matrix in zip(indices, self.stack(indices))}


def estimate_projections(cocycle, rate: GrowthRate, cut: float = 0.0, window: int = DEFAULT_WINDOW,
                         gap_factor: float = DEFAULT_GAP_FACTOR,
                         min_window: int = MIN_WINDOW) -> ProjectionFamily:
    """Split the window transfer at growth exponent `cut`

    W = (μ_w/μ_b)^{-cut} 𝒜(w, b) with b = max(start, w//4). Right singular
    vectors with singular value below 1 span the stable space at b; left
    singular vectors of the rest span the unstable space at w.
    """
    if window < min_window:
        raise WindowError(f"window {window} is below the minimum {min_window}",
                          required_window=min_window, condition=f"window >= {min_window}")
    rate = rate.as_sequence()
    ref = max(cocycle.start, window // 4)
    if window <= ref:
        raise WindowError(f"window {window} does not extend past index {ref}",
                          required_window=4 * (ref + 1), condition="window > reference index")

    mantissa, scale = cocycle.log_transfer(window, ref)
    left, sigma, right_t = np.linalg.svd(mantissa)
    with np.errstate(divide="ignore"):
        log_sigma = np.log(sigma) + scale - cut * float(rate.log_ratio(window, ref))
    stable = log_sigma < 0
    k = int(stable.sum())
    gap = None
    if 0 < k < cocycle.dim:
        gap = float(log_sigma[~stable].min() - log_sigma[stable].max())
        if gap < math.log(gap_factor) and np.all(np.abs(log_sigma) < math.log(gap_factor)):
            # neutral window: nothing separates from 1, so no split is attempted
            stable[:] = False
            k, gap = 0, None
        elif gap < math.log(gap_factor):
            raise GapNotResolvedError(
                f"singular values straddling the cut differ by a factor {math.exp(gap):.3g} < {gap_factor:g}; "
                f"try a window larger than {window}", condition="singular-value gap across the cut",
                cut=cut, window=window, suggested_window=2 * window)

    logging.debug(f"Projections for {cocycle.name} at cut={cut:g}: rank {k}, gap={gap}")
    return ProjectionFamily.from_subspaces(
        cocycle, right_t[stable].T, ref, left[:, ~stable], window,
        cut=cut, reference=ref, log_singular_values=log_sigma.tolist())


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

@dataclass
class FitReport:
    """Per-pair log-norm samples against x = ln(μ_m/μ_n)"""
    n: np.ndarray
    m: np.ndarray
    x: np.ndarray
    y_stable: np.ndarray        # ln‖𝒜(m,n) P_n‖
    y_unstable: np.ndarray      # ln‖𝒜(n,m) Q_m‖
    y_forward: np.ndarray       # ln‖𝒜(m,n)‖
    y_backward: np.ndarray      # ln‖𝒜(n,m)‖
    lambda_fit: float
    a_fit: float
    envelope_lambda: float
    envelope_a: float
    K_dichotomy: float
    K_growth: float
    tail_pairs: int

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"n": int(self.n[i]), "m": int(self.m[i]), "x": float(self.x[i]),
             "y_stable": float(self.y_stable[i]), "y_unstable": float(self.y_unstable[i]),
             "y_forward": float(self.y_forward[i]), "y_backward": float(self.y_backward[i])}
            for i in range(len(self.x))
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lambda_fit": self.lambda_fit,
            "a_fit": self.a_fit,
            "envelope_lambda": self.envelope_lambda,
            "envelope_a": self.envelope_a,
            "K_dichotomy": self.K_dichotomy,
            "K_growth": self.K_growth,
            "tail_pairs": self.tail_pairs,
            "pairs": len(self.x),
        }


@dataclass
class DichotomyCertificate:
    projections: ProjectionFamily
    K: float
    lam: float
    a: float
    residual_commute: float
    residual_idempotent: float
    rank: int
    verdict: Verdict
    fit_report: FitReport
    window: int
    rate_name: str
    flags: List[str] = field(default_factory=list)
    spot_check: Optional[Dict[str, Any]] = None

    @property
    def is_strong(self) -> bool:
        return self.verdict is Verdict.STRONG

    def to_dict(self, pair_samples: bool = True) -> Dict[str, Any]:
        grid = sorted(set(int(n) for n in self.fit_report.n[:1]) | {int(self.window)})
        data = {
            "verdict": self.verdict.value,
            "K": self.K,
            "lambda": self.lam,
            "a": self.a,
            "residual_commute": self.residual_commute,
            "residual_idempotent": self.residual_idempotent,
            "rank": self.rank,
            "window": self.window,
            "rate": self.rate_name,
            "projection_source": self.projections.source,
            "projections": self.projections.samples(grid),
            "fit": self.fit_report.to_dict(),
            "flags": list(self.flags),
        }
        if pair_samples:
            data["pairs"] = self.fit_report.rows()
        if self.spot_check is not None:
            data["spot_check"] = self.spot_check
        return data


def _log_norms(mantissas: np.ndarray, logs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.linalg.norm(mantissas, ord=2, axis=(-2, -1))) + logs


def _slope(x: np.ndarray, y: np.ndarray) -> float:
    finite = np.isfinite(y)
    if finite.sum() < 2:
        return -math.inf if not finite.any() else 0.0
    slope, _ = np.polyfit(x[finite], y[finite], 1)
    return float(slope)


def fit_certificate(cocycle, rate: GrowthRate, projections: ProjectionFamily,
                    window: int = DEFAULT_WINDOW, burn_in: Optional[int] = None,
                    density: int = DEFAULT_GRID_DENSITY, lambda_min: float = DEFAULT_LAMBDA_MIN,
                    k_cap: float = DEFAULT_K_CAP, qr: bool = False) -> DichotomyCertificate:
    """Fit (K, λ, a) for the given projections on the pair grid of the window"""
    rate = rate.as_sequence()
    grid = pair_grid(cocycle.start, window, burn_in, density)
    table = cocycle.pair_table(grid, qr=qr)
    P = projections.stack(grid)
    Q = np.eye(cocycle.dim) - P

    i, k = np.triu_indices(len(grid), 1)
    log_mu = np.asarray(rate.log(grid.astype(float)))
    x = log_mu[k] - log_mu[i]
    keep = x > 0
    i, k, x = i[keep], k[keep], x[keep]
    if len(x) == 0:
        raise WindowError(f"no pairs with distinct weights on window {window}",
                          required_window=2 * window, condition="non-empty pair set")

    forward, backward = table.forward[i, k], table.backward[i, k]
    y_stable = _log_norms(forward @ P[i], table.forward_log[i, k])
    y_unstable = _log_norms(backward @ Q[k], table.backward_log[i, k])
    y_forward = _log_norms(forward, table.forward_log[i, k])
    y_backward = _log_norms(backward, table.backward_log[i, k])

    y_d = np.maximum(y_stable, y_unstable)
    y_g = np.maximum(y_forward, y_backward)
    n_values, m_values = grid[i], grid[k]
    tail = n_values >= window // 4
    if tail.sum() < 3:
        tail = np.ones_like(tail)

    flags: List[str] = []
    lam = -_slope(x[tail], y_d[tail])
    a = _slope(x[tail], y_g[tail])
    envelope_lambda = float(-np.max(y_d / x))
    envelope_a = float(np.max(y_g / x))
    if a < lam:
        logging.warning(f"Fitted a={a:.4g} below lambda={lam:.4g} for {cocycle.name}; clamping a := lambda")
        flags.append("a_clamped_to_lambda")
        a = lam

    finite_d = np.isfinite(y_d)
    K_d = math.exp(float(np.max(y_d[finite_d] + lam * x[finite_d]))) if finite_d.any() and math.isfinite(lam) else math.inf
    K_g = math.exp(float(np.max(y_g - a * x)))
    K = max(K_d, K_g, 1.0)

    # invariance P_{n+1} A_n = A_n P_n, relative to ‖A_n‖
    lo = int(grid[0])
    indices = list(range(lo, window + 1))
    stacked = projections.stack(indices)
    steps = cocycle.steps(lo, window)
    commute = np.linalg.norm(steps @ stacked[:-1] - stacked[1:] @ steps, ord=2, axis=(1, 2))
    commute /= np.linalg.norm(steps, ord=2, axis=(1, 2))
    residual_commute = float(commute.max()) if len(commute) else 0.0
    residual_idempotent = float(np.abs(stacked @ stacked - stacked).max())
    ranks = np.rint(np.trace(stacked, axis1=1, axis2=2)).astype(int)
    rank = int(ranks[0])
    if np.any(ranks != rank):
        flags.append("rank_not_constant")

    if not math.isfinite(lam) or lam <= lambda_min:
        verdict = Verdict.NONE
    elif residual_commute > COMMUTE_TOLERANCE or "rank_not_constant" in flags:
        flags.append("projections_not_invariant")
        verdict = Verdict.NONE
    elif K_d > k_cap:
        verdict = Verdict.NONE
    elif K_g > k_cap or not math.isfinite(a):
        verdict = Verdict.DICHOTOMY_ONLY
    else:
        verdict = Verdict.STRONG

    report = FitReport(n=n_values, m=m_values, x=x, y_stable=y_stable, y_unstable=y_unstable,
                       y_forward=y_forward, y_backward=y_backward, lambda_fit=lam, a_fit=a,
                       envelope_lambda=envelope_lambda, envelope_a=envelope_a, K_dichotomy=K_d,
                       K_growth=K_g, tail_pairs=int(tail.sum()))
    logging.info(f"Certificate for {cocycle.name} under {rate.name}: {verdict.value} "
                 f"(K={K:.4g}, lambda={lam:.4g}, a={a:.4g})")
    return DichotomyCertificate(projections=projections, K=K, lam=lam, a=a,
                                residual_commute=residual_commute,
                                residual_idempotent=residual_idempotent, rank=rank, verdict=verdict,
                                fit_report=report, window=window, rate_name=rate.name, flags=flags)


def certify(cocycle, rate: GrowthRate, window: int = DEFAULT_WINDOW, cut: float = 0.0,
            projections: Optional[ProjectionFamily] = None,
            gap_factor: float = DEFAULT_GAP_FACTOR, min_window: int = MIN_WINDOW,
            **options) -> DichotomyCertificate:
    """Estimate projections (unless given) and fit a certificate"""
    if projections is None:
        projections = estimate_projections(cocycle, rate, cut, window, gap_factor, min_window)
    return fit_certificate(cocycle, rate, projections, window, **options)


def certify_continuous(flow: Flow, rate: GrowthRate, window: int = DEFAULT_WINDOW,
                       spot_checks: int = 100, seed: int = 0, slack: float = 1.1,
                       projections: Optional[ProjectionFamily] = None, **options) -> DichotomyCertificate:
    """Certify the discretization A_n = T(n+1, n), then spot-check the continuous bounds

    The spot check samples non-integer (t, s) with |t − s| ≤ 8, interpolates
    P(t) = T(t, n) P_n T(n, t) for n = ⌊t⌋ and records the worst ratio of
    each norm to its bound.
    """
    linear, _ = flow.discretize()
    if projections is None:
        projections = ProjectionFamily.analytic(flow.spec)
    cert = certify(linear, rate, window, projections=projections, **options)
    if cert.verdict is Verdict.NONE or spot_checks <= 0:
        return cert

    rng = np.random.default_rng(seed)
    lo = float(cert.fit_report.n.min())
    hi = float(window) - SPOT_CHECK_SPAN - 1.0
    if hi <= lo:
        return cert
    worst = {"stable": 0.0, "unstable": 0.0, "growth": 0.0}
    witness: Dict[str, Any] = {}

    def projection(t: float) -> np.ndarray:
        n = math.floor(t)
        return flow.transfer(t, n) @ cert.projections.at(n) @ flow.transfer(n, t)

    for _ in range(spot_checks):
        s = float(rng.uniform(lo, hi))
        t = s + float(rng.uniform(0.05, SPOT_CHECK_SPAN))
        if float(t).is_integer() or float(s).is_integer():
            t += 0.125
        spread = float(rate.log(t) - rate.log(s))
        forward = flow.transfer_through(linear, t, s)
        backward = flow.transfer_through(linear, s, t)
        decay = cert.K * math.exp(-cert.lam * spread)
        growth = cert.K * math.exp(cert.a * spread)
        ratios = {
            "stable": np.linalg.norm(forward @ projection(s), 2) / decay,
            "unstable": np.linalg.norm(backward @ (np.eye(flow.dim) - projection(t)), 2) / decay,
            "growth": max(np.linalg.norm(forward, 2), np.linalg.norm(backward, 2)) / growth,
        }
        for name, ratio in ratios.items():
            if ratio > worst[name]:
                worst[name] = float(ratio)
                witness[name] = {"t": t, "s": s}

    passed = all(ratio <= slack for ratio in worst.values())
    if not passed:
        cert.flags.append("continuous_spot_check_exceeded")
        logging.warning(f"Continuous spot check exceeded the discrete constants by "
                        f"{max(worst.values()):.3g}x for {flow.spec.name}")
    cert.spot_check = {"samples": spot_checks, "worst_ratio": worst, "witness": witness,
                       "slack": slack, "passed": passed,
                       "K_continuous": cert.K * max(1.0, max(worst.values()))}
    return cert
