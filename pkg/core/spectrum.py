# core/spectrum.py
"""
Dichotomy spectrum by τ-scan and bisection

τ is spectral when the scaled system x_{n+1} = (μ_{n+1}/μ_n)^{-τ} A_n x_n has
no strong μ-dichotomy on the window. Grid verdicts are merged into intervals
whose endpoints are refined by bisection; spectral points hiding between two
hyperbolic grid points are found from the jump of the stable rank.
"""

import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dichotomy import (DEFAULT_WINDOW, MIN_WINDOW, Verdict, certify, pair_grid)
from .errors import ConfigurationError, GapNotResolvedError, NotHyperbolicError
from .evolution import Flow, ScaledCocycle
from .growth import GrowthRate, exponential_rate

DEFAULT_TAU_MIN = -3.0
DEFAULT_TAU_MAX = 3.0
DEFAULT_DTAU = 0.05
DEFAULT_REFINE = 1e-3

Interval = Tuple[float, float]


@dataclass
class TauSample:
    tau: float
    verdict: str
    lambda_fit: Optional[float] = None
    a_fit: Optional[float] = None
    K: Optional[float] = None
    rank: Optional[int] = None
    note: Optional[str] = None

    @property
    def spectral(self) -> bool:
        return self.verdict != Verdict.STRONG.value

    def to_dict(self) -> Dict[str, Any]:
        return {"tau": self.tau, "verdict": self.verdict, "lambda_fit": self.lambda_fit,
                "a_fit": self.a_fit, "K": self.K, "rank": self.rank, "note": self.note}


@dataclass
class SpectrumEstimate:
    intervals: List[Interval]
    tau_range: Interval
    resolution: float
    refined: float
    samples: List[TauSample]
    window: int
    flags: List[str] = field(default_factory=list)
    cross_check: Optional[Dict[str, Any]] = None

    @property
    def per_tau_log(self) -> Dict[float, str]:
        return {s.tau: s.verdict for s in self.samples}

    def contains(self, tau: float, slack: float = 0.0) -> bool:
        return any(lo - slack <= tau <= hi + slack for lo, hi in self.intervals)

    def grid_samples(self) -> List[TauSample]:
        """Samples on the scan grid only (refinement samples excluded)"""
        return [s for s in self.samples if s.note != "refinement"]

    def rows(self) -> List[Dict[str, Any]]:
        return [{"tau": s.tau, "verdict": s.verdict, "lambda_fit": s.lambda_fit, "a_fit": s.a_fit}
                for s in self.grid_samples()]

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "intervals": [[lo, hi] for lo, hi in self.intervals],
            "error_bar": self.refined,
            "tau_range": list(self.tau_range),
            "resolution": self.resolution,
            "refined": self.refined,
            "window": self.window,
            "per_tau_log": [s.to_dict() for s in self.samples],
            "flags": list(self.flags),
        }
        if self.cross_check is not None:
            data["cross_check"] = self.cross_check
        return data


@dataclass
class SpectralConditions:
    k: Optional[int]
    r: int
    one_sided: bool
    gap: Optional[float]
    gap_ok: Optional[bool]
    bands_ok: Optional[bool]
    band_checks: List[Dict[str, Any]]
    alpha1_sup: Optional[float]

    def to_dict(self) -> Dict[str, Any]:
        return {"k": self.k, "r": self.r, "one_sided": self.one_sided, "gap": self.gap,
                "gap_ok": self.gap_ok, "bands_ok": self.bands_ok,
                "band_checks": self.band_checks, "alpha1_sup": self.alpha1_sup}


# ---------------------------------------------------------------------------
# Scan
# ---------------------------------------------------------------------------

class _Classifier:
    """Memoized τ ↦ sample; thread-safe"""

    def __init__(self, cocycle, rate: GrowthRate, window: int, min_window: int, options: Dict[str, Any]):
        self.cocycle = cocycle
        self.rate = rate
        self.window = window
        self.min_window = min_window
        self.options = options
        self._samples: Dict[float, TauSample] = {}
        self._lock = threading.Lock()

    def __call__(self, tau: float, note: Optional[str] = None) -> TauSample:
        tau = round(float(tau), 12)
        with self._lock:
            if tau in self._samples:
                return self._samples[tau]
        scaled = ScaledCocycle(self.cocycle, self.rate, tau)
        try:
            cert = certify(scaled, self.rate, self.window, min_window=self.min_window, **self.options)
            sample = TauSample(tau, cert.verdict.value, cert.lam, cert.a, cert.K, cert.rank, note)
        except GapNotResolvedError as e:
            sample = TauSample(tau, Verdict.NONE.value, note=note or "gap_not_resolved")
            logging.debug(f"tau={tau:g}: {e.message}")
        with self._lock:
            return self._samples.setdefault(tau, sample)

    def spectral(self, tau: float) -> bool:
        return self(tau, "refinement").spectral

    def samples(self) -> List[TauSample]:
        with self._lock:
            return [self._samples[t] for t in sorted(self._samples)]


def _boundary(classify: _Classifier, spectral_side: float, clear_side: float, tol: float) -> float:
    """Bisect the spectral edge between a spectral and a hyperbolic τ; returns the spectral-side end"""
    while abs(spectral_side - clear_side) > tol:
        middle = 0.5 * spectral_side + 0.5 * clear_side
        if classify.spectral(middle):
            spectral_side = middle
        else:
            clear_side = middle
    return spectral_side


def _hidden(classify: _Classifier, lo: float, rank_lo: int, hi: float, rank_hi: int,
            tol: float) -> List[Interval]:
    """Spectral components between two hyperbolic τ of different stable rank"""
    while hi - lo > tol:
        middle = 0.5 * lo + 0.5 * hi
        sample = classify(middle, "refinement")
        if sample.spectral:
            return [(_boundary(classify, middle, lo, tol), _boundary(classify, middle, hi, tol))]
        if sample.rank == rank_lo:
            lo = middle
        elif sample.rank == rank_hi:
            hi = middle
        else:
            return (_hidden(classify, lo, rank_lo, middle, sample.rank, tol)
                    + _hidden(classify, middle, sample.rank, hi, rank_hi, tol))
    point = 0.5 * (lo + hi)
    return [(point, point)]


def tau_grid(tau_min: float, tau_max: float, dtau: float) -> np.ndarray:
    if dtau <= 0:
        raise ConfigurationError(f"dtau must be positive, got {dtau}", condition="dtau > 0")
    if tau_max <= tau_min:
        raise ConfigurationError(f"empty tau range [{tau_min}, {tau_max}]", condition="tau_min < tau_max")
    count = int(math.floor((tau_max - tau_min) / dtau + 1e-9))
    return np.round(tau_min + dtau * np.arange(count + 1), 12)


def scan_spectrum(cocycle, rate: GrowthRate, tau_min: float = DEFAULT_TAU_MIN,
                  tau_max: float = DEFAULT_TAU_MAX, dtau: float = DEFAULT_DTAU,
                  window: int = DEFAULT_WINDOW, refine: float = DEFAULT_REFINE,
                  workers: Optional[int] = None, min_window: int = MIN_WINDOW,
                  **options) -> SpectrumEstimate:
    """Intervals of τ where the τ-scaled cocycle has no strong μ-dichotomy"""
    rate = rate.as_sequence()
    taus = tau_grid(tau_min, tau_max, dtau)
    classify = _Classifier(cocycle, rate, window, min_window, options)

    # shared tables are filled once before the workers start
    cocycle.ensure(window)
    cocycle.pair_table(pair_grid(cocycle.start, window, options.get("burn_in"),
                                 options.get("density", 40)), qr=options.get("qr", False))

    logging.info(f"Scanning {len(taus)} tau values on [{taus[0]:g}, {taus[-1]:g}] for {cocycle.name}")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        grid = list(executor.map(classify, taus))

    intervals: List[Interval] = []
    flags: List[str] = []
    i = 0
    while i < len(grid):
        if not grid[i].spectral:
            j = i + 1
            if j < len(grid) and not grid[j].spectral and grid[j].rank != grid[i].rank:
                intervals.extend(_hidden(classify, grid[i].tau, grid[i].rank, grid[j].tau, grid[j].rank, refine))
            i = j
            continue
        j = i
        while j + 1 < len(grid) and grid[j + 1].spectral:
            j += 1
        lo = grid[i].tau if i == 0 else _boundary(classify, grid[i].tau, grid[i - 1].tau, refine)
        hi = grid[j].tau if j == len(grid) - 1 else _boundary(classify, grid[j].tau, grid[j + 1].tau, refine)
        intervals.append((lo, hi))
        i = j + 1

    collapsed = []
    for lo, hi in sorted(intervals):
        if hi - lo < 2 * refine:
            lo = hi = round(0.5 * (lo + hi), 12)
        collapsed.append((float(lo), float(hi)))

    if all(sample.spectral for sample in grid):
        flags.append("all_tau_spectral")
        logging.warning(f"No tau in [{taus[0]:g}, {taus[-1]:g}] gave a strong dichotomy for {cocycle.name}; "
                        f"reporting the whole range (window too small or no dichotomy)")
    if len(collapsed) > cocycle.dim:
        flags.append("more_intervals_than_dimension")
        logging.warning(f"Spectrum estimate has {len(collapsed)} intervals for d={cocycle.dim}")

    return SpectrumEstimate(intervals=collapsed, tau_range=(float(taus[0]), float(taus[-1])),
                            resolution=dtau, refined=refine, samples=classify.samples(),
                            window=window, flags=flags)


# ---------------------------------------------------------------------------
# Conditions
# ---------------------------------------------------------------------------

def check_conditions(estimate: SpectrumEstimate) -> SpectralConditions:
    """Sandwich, gap and band inequalities on the estimated endpoints"""
    intervals = sorted(estimate.intervals)
    if not intervals:
        raise ConfigurationError("spectrum estimate has no intervals; widen the tau range",
                                 condition="non-empty spectrum")
    for lo, hi in intervals:
        if lo <= 0 <= hi:
            raise NotHyperbolicError(f"0 lies in the spectral interval [{lo:g}, {hi:g}]",
                                     condition="a_k <= b_k < 0 < a_{k+1}", interval=[lo, hi])

    r = len(intervals)
    k = sum(1 for _, hi in intervals if hi < 0)
    if k == 0 or k == r:
        logging.info("One-sided spectrum: gap and band conditions do not apply")
        return SpectralConditions(k=k, r=r, one_sided=True, gap=None, gap_ok=None, bands_ok=None,
                                  band_checks=[], alpha1_sup=None)

    a1, b_k = intervals[0][0], intervals[k - 1][1]
    a_next, b_r = intervals[k][0], intervals[-1][1]
    gap = a_next - b_k
    gap_ok = gap > max(b_r, -a1)

    band_checks = []
    for i, (lo, hi) in enumerate(intervals, start=1):
        limit = -b_k if i <= k else a_next
        band_checks.append({"band": i, "width": hi - lo, "limit": limit, "ok": hi - lo <= limit})
    bands_ok = all(check["ok"] for check in band_checks)
    alpha1_sup = min(gap / b_r, gap / (-a1))
    return SpectralConditions(k=k, r=r, one_sided=False, gap=gap, gap_ok=gap_ok, bands_ok=bands_ok,
                              band_checks=band_checks, alpha1_sup=alpha1_sup)


def hausdorff_distance(first: Sequence[Interval], second: Sequence[Interval]) -> float:
    """Hausdorff distance between two finite unions of closed intervals"""
    if not first and not second:
        return 0.0
    if not first or not second:
        return math.inf

    def distance(point: float, intervals: Sequence[Interval]) -> float:
        return min(0.0 if lo <= point <= hi else min(abs(point - lo), abs(point - hi))
                   for lo, hi in intervals)

    def directed(source: Sequence[Interval], target: Sequence[Interval]) -> float:
        ordered = sorted(target)
        candidates = [p for interval in source for p in interval]
        for (_, left), (right, _) in zip(ordered, ordered[1:]):
            middle = 0.5 * (left + right)
            candidates.extend(middle for lo, hi in source if lo <= middle <= hi)
        return max(distance(p, target) for p in candidates)

    return max(directed(first, second), directed(second, first))


def translate(estimate: SpectrumEstimate, shift: float) -> List[Interval]:
    return [(lo + shift, hi + shift) for lo, hi in estimate.intervals]


# ---------------------------------------------------------------------------
# Rescaled and continuous spectra
# ---------------------------------------------------------------------------

@dataclass
class RescaledSpectra:
    source: SpectrumEstimate
    rescaled: SpectrumEstimate
    distance: float
    horizon: int

    def to_dict(self) -> Dict[str, Any]:
        return {"source": self.source.to_dict(), "rescaled": self.rescaled.to_dict(),
                "hausdorff_distance": self.distance, "rescaled_horizon": self.horizon}


def spectrum_of_rescaled(cocycle, rate: GrowthRate, window: int = DEFAULT_WINDOW,
                         horizon: Optional[int] = None, source_window: Optional[int] = None,
                         nonlinear=None, **scan) -> RescaledSpectra:
    """Spectrum of 𝔸 under μ beside the spectrum of its rescaling 𝔹 under e^n

    The rescaled horizon defaults to the largest n whose anchors fit inside
    the source window; the rescaled scan relaxes the minimum window to 8.
    """
    from .rescale import max_horizon, rescale

    source_window = source_window or window
    horizon = horizon or max_horizon(rate, source_window)
    source = scan_spectrum(cocycle, rate, window=window, **scan)
    system = rescale(cocycle, rate, horizon, nonlinear=nonlinear, source_window=source_window)
    rescaled = scan_spectrum(system.linear, exponential_rate(), window=horizon,
                             min_window=min(8, horizon), **scan)
    if horizon < MIN_WINDOW:
        rescaled.flags.append("short_rescaled_horizon")
    distance = hausdorff_distance(source.intervals, rescaled.intervals)
    logging.info(f"Rescaled spectrum on horizon {horizon}: Hausdorff distance {distance:.4g}")
    return RescaledSpectra(source=source, rescaled=rescaled, distance=distance, horizon=horizon)


def direct_verdicts(flow: Flow, rate: GrowthRate, taus: Sequence[float],
                    window: int = DEFAULT_WINDOW, **options) -> Dict[float, str]:
    """Verdicts from integrating x′ = (A(t) − τ μ′(t)/μ(t) Id) x directly"""
    verdicts = {}
    for tau in taus:
        linear, _ = flow.shifted(rate, tau).discretize()
        try:
            verdicts[float(tau)] = certify(linear, rate, window, **options).verdict.value
        except GapNotResolvedError:
            verdicts[float(tau)] = Verdict.NONE.value
    return verdicts


def continuous_spectrum(flow: Flow, rate: GrowthRate, direct_taus: Optional[Sequence[float]] = None,
                        **scan) -> SpectrumEstimate:
    """Spectrum of x′ = A(t)x through its discretization A_n = T(n+1, n)"""
    linear, _ = flow.discretize()
    estimate = scan_spectrum(linear, rate.as_sequence(), **scan)
    if direct_taus:
        window = scan.get("window", DEFAULT_WINDOW)
        direct = direct_verdicts(flow, rate, direct_taus, window)
        lookup = {round(s.tau, 12): s.verdict for s in estimate.samples}
        estimate.cross_check = {
            str(tau): {"direct": verdict,
                       "discretized": lookup.get(round(tau, 12)) or
                       ("none" if estimate.contains(tau) else Verdict.STRONG.value)}
            for tau, verdict in direct.items()
        }
    return estimate
