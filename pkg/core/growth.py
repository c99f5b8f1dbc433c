# core/growth.py
"""
Growth rates and time rescaling helpers

A growth rate is a strictly increasing positive sequence μ_n with μ_0 = 1
(discrete kind) or a differentiable function μ(t) (continuous kind). Each rate
carries a declared ratio bound θ with μ_{n+1}/μ_n ≤ θ. The piecewise-linear
interpolant μ̃ and its inverse drive the rescaling of module rescale.
"""

import logging
import math
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, Optional

import numpy as np

from .errors import ConfigurationError, DomainError, InvalidGrowthRateError, WindowError

# Index beyond which the interpolant inverse refuses to search
MAX_SEARCH_INDEX = 10_000_000

DEFAULT_RATIO_HORIZON = 10_000


class RateKind(Enum):
    DISCRETE = "discrete"
    DIFFERENTIABLE = "differentiable"


@dataclass
class RatioBound:
    theta_hat: float
    argmax: int
    declared: float
    horizon: int
    within_declared: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "theta_hat": self.theta_hat,
            "argmax": self.argmax,
            "declared": self.declared,
            "horizon": self.horizon,
            "within_declared": self.within_declared,
        }


class GrowthRate:
    """Growth rate μ with ratio bound θ

    `func` must accept numpy arrays. `log_func`, when given, returns ln μ
    exactly (exponential rates stay exact far beyond float overflow of e^n).
    """

    def __init__(self, func: Callable[[np.ndarray], np.ndarray], theta: float,
                 kind: RateKind = RateKind.DISCRETE,
                 derivative: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 log_func: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 name: str = "custom", domain_start: Optional[float] = None):
        if theta < 1:
            raise InvalidGrowthRateError(f"declared theta {theta} is below 1",
                                         condition="theta >= 1", theta=theta)
        self._func = func
        self._log_func = log_func
        self._derivative = derivative
        self.theta = float(theta)
        self.kind = kind
        self.name = name
        if domain_start is None:
            domain_start = 0 if kind is RateKind.DISCRETE else 1
        self.domain_start = domain_start
        self._log_values = np.empty(0)
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f"GrowthRate(name={self.name!r}, kind={self.kind.value}, theta={self.theta:.6g})"

    @property
    def is_exponential(self) -> bool:
        return self.name == "exponential"

    def __call__(self, n):
        arr = np.asarray(n, dtype=float)
        if np.any(arr < 0):
            raise DomainError(f"growth rate {self.name} evaluated below 0",
                              condition="argument >= 0", argument=float(arr.min()))
        value = np.asarray(self._func(arr), dtype=float)
        value = np.broadcast_to(value, arr.shape)
        return float(value) if value.ndim == 0 else np.array(value)

    def log(self, n):
        """ln μ at n (vectorized)"""
        arr = np.asarray(n, dtype=float)
        if np.any(arr < 0):
            raise DomainError(f"growth rate {self.name} evaluated below 0",
                              condition="argument >= 0", argument=float(arr.min()))
        if self._log_func is not None:
            value = np.asarray(self._log_func(arr), dtype=float)
        else:
            value = np.log(np.asarray(self._func(arr), dtype=float))
        value = np.broadcast_to(value, arr.shape)
        return float(value) if value.ndim == 0 else np.array(value)

    def log_ratio(self, m, n):
        """ln(μ_m / μ_n)"""
        return self.log(m) - self.log(n)

    def ratio(self, m, n):
        return np.exp(self.log_ratio(m, n))

    def derivative(self, t):
        """μ′(t); central differences when no closed form was supplied"""
        arr = np.asarray(t, dtype=float)
        if self._derivative is not None:
            value = np.broadcast_to(np.asarray(self._derivative(arr), dtype=float), arr.shape)
        else:
            h = 1e-6 * np.maximum(1.0, np.abs(arr))
            value = (np.asarray(self._func(arr + h)) - np.asarray(self._func(arr - h))) / (2 * h)
        return float(value) if np.ndim(value) == 0 else np.array(value)

    def log_derivative(self, t):
        """μ′(t)/μ(t), the coefficient of the shifted field A(t) − τ μ′/μ Id"""
        if self.is_exponential:
            return np.ones_like(np.asarray(t, dtype=float))
        return self.derivative(t) / self(t)

    def log_values(self, upto: int) -> np.ndarray:
        """Cached ln μ_0 … ln μ_upto (discrete kind)"""
        if self.kind is not RateKind.DISCRETE:
            raise ConfigurationError(f"rate {self.name} is differentiable; use as_sequence()",
                                     condition="discrete growth rate")
        with self._lock:
            if len(self._log_values) <= upto:
                size = max(upto + 1, 2 * len(self._log_values), 64)
                values = np.asarray(self.log(np.arange(size, dtype=float)), dtype=float)
                values.flags.writeable = False
                self._log_values = values
            return self._log_values[:upto + 1]

    def values(self, upto: int) -> np.ndarray:
        return np.exp(self.log_values(upto))

    def as_sequence(self) -> "GrowthRate":
        """Discrete rate μ_n = μ(n)/μ(0) induced by a differentiable rate"""
        if self.kind is RateKind.DISCRETE:
            return self
        log0 = self.log(0.0)
        return GrowthRate(
            func=lambda n: np.exp(self.log(n) - log0),
            log_func=lambda n: self.log(n) - log0,
            theta=self.theta,
            kind=RateKind.DISCRETE,
            name=self.name,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "kind": self.kind.value, "theta": self.theta,
                "domain_start": self.domain_start}


def builtin_rate(name: str, kind: RateKind = RateKind.DISCRETE) -> GrowthRate:
    """Builtin growth rates

    Declared θ values follow from monotone ratios: e^{n+1}/e^n = e; (2+n)/(1+n)
    decreases from 2; ln(e+n+1)/ln(e+n) decreases from ln(e+1).
    """
    if name == "exponential":
        return GrowthRate(np.exp, theta=math.e, kind=kind, derivative=np.exp,
                          log_func=lambda n: np.asarray(n, dtype=float), name=name)
    if name == "polynomial":
        return GrowthRate(lambda n: 1.0 + n, theta=2.0, kind=kind,
                          derivative=lambda t: np.ones_like(t), log_func=np.log1p, name=name)
    if name == "logarithmic":
        return GrowthRate(lambda n: np.log(math.e + n), theta=math.log(math.e + 1.0), kind=kind,
                          derivative=lambda t: 1.0 / (math.e + t), name=name)
    raise ConfigurationError(f"unknown builtin growth rate '{name}'",
                             condition="builtin in {exponential, polynomial, logarithmic}",
                             name=name)


def exponential_rate() -> GrowthRate:
    return builtin_rate("exponential")


def verify_ratio_bound(rate: GrowthRate, horizon: int = DEFAULT_RATIO_HORIZON) -> RatioBound:
    """Scan μ_{n+1}/μ_n for 0 ≤ n < horizon against the declared θ"""
    if horizon < 1:
        raise ConfigurationError(f"ratio horizon must be >= 1, got {horizon}",
                                 condition="horizon >= 1")
    sequence = rate.as_sequence()
    with np.errstate(divide="ignore", invalid="ignore"):
        log_values = np.asarray(sequence.log(np.arange(horizon + 1, dtype=float)))
    if not np.all(np.isfinite(log_values)):
        bad = int(np.argmin(np.isfinite(log_values)))
        raise InvalidGrowthRateError(f"growth rate {rate.name} is not positive at n={bad}",
                                     condition="mu_n > 0", index=bad)
    if abs(log_values[0]) > 1e-12:
        raise InvalidGrowthRateError(f"growth rate {rate.name} has mu_0 = {math.exp(log_values[0])}",
                                     condition="mu_0 = 1", index=0)
    steps = np.diff(log_values)
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0))
        raise InvalidGrowthRateError(
            f"growth rate {rate.name} is not strictly increasing at n={bad}",
            condition="mu strictly increasing", index=bad)

    argmax = int(np.argmax(steps))
    theta_hat = float(np.exp(steps[argmax]))
    within = theta_hat <= rate.theta + 1e-12
    if not within:
        logging.warning(f"Ratio bound violated for {rate.name}: theta_hat={theta_hat:.6g} "
                        f"> declared {rate.theta:.6g} at n={argmax}")
    return RatioBound(theta_hat=theta_hat, argmax=argmax, declared=rate.theta,
                      horizon=horizon, within_declared=within)


class Interpolant:
    """Piecewise-linear interpolant μ̃ of a discrete rate and its inverse

    Branches of the inverse are located by binary search over ln μ_n, so the
    inverse is exact at the knots (μ̃⁻¹(μ_n) = n).
    """

    def __init__(self, rate: GrowthRate):
        if rate.kind is not RateKind.DISCRETE:
            raise ConfigurationError(f"interpolation needs a discrete rate, got {rate.kind.value}",
                                     condition="discrete growth rate")
        self.rate = rate

    def forward(self, t):
        arr = np.asarray(t, dtype=float)
        if np.any(arr < 0):
            raise DomainError("interpolant evaluated below 0", condition="t >= 0",
                              argument=float(arr.min()))
        n = np.floor(arr).astype(np.int64)
        logv = self.rate.log_values(int(n.max(initial=0)) + 1)
        lower = np.exp(logv[n])
        upper = np.exp(logv[n + 1])
        value = lower + (arr - n) * (upper - lower)
        return float(value) if value.ndim == 0 else value

    def _log_table_covering(self, target: float) -> np.ndarray:
        size = 64
        while True:
            logv = self.rate.log_values(size)
            if logv[-1] > target:
                return logv
            if size >= MAX_SEARCH_INDEX:
                raise WindowError(
                    f"growth rate {self.rate.name} does not reach e^{target:.4g} "
                    f"below index {MAX_SEARCH_INDEX}", required_window=None, target_log=target)
            size = min(2 * size, MAX_SEARCH_INDEX)

    def inverse_log(self, x):
        """μ̃⁻¹(e^x), evaluated in log space"""
        arr = np.asarray(x, dtype=float)
        if np.any(arr < 0):
            raise DomainError("interpolant inverse evaluated below mu_0 = 1",
                              condition="s >= mu_0", argument=float(np.exp(arr.min())))
        logv = self._log_table_covering(float(arr.max(initial=0.0)))
        n = np.searchsorted(logv, arr, side="right") - 1
        n = np.clip(n, 0, len(logv) - 2)
        fraction = np.expm1(arr - logv[n]) / np.expm1(logv[n + 1] - logv[n])
        value = n + fraction
        return float(value) if value.ndim == 0 else value

    def inverse(self, s):
        arr = np.asarray(s, dtype=float)
        if np.any(arr < 1):
            raise DomainError("interpolant inverse evaluated below mu_0 = 1",
                              condition="s >= mu_0", argument=float(arr.min()))
        return self.inverse_log(np.log(arr))


def interpolate(rate: GrowthRate) -> Interpolant:
    return Interpolant(rate)
