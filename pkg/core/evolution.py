# core/evolution.py
"""
Evolution operators

- LinearCocycle: 𝒜(m, n) = A_{m-1}⋯A_n (m ≥ n), A_m⁻¹⋯A_{n-1}⁻¹ (m < n)
- ScaledCocycle: the τ-shifted system x_{n+1} = (μ_{n+1}/μ_n)^{-τ} A_n x_n
- NonlinearCocycle: 𝒢(m, n) built from G_n = A_n + g_n, inverted step by step
  through the contraction x ↦ A_n⁻¹(y − g_n(x))
- Flow: RK4 transfer matrices T(t, s) and nonlinear flow φ(t, s; x) of a
  continuous system, plus its discretization A_n = T(n+1, n),
  g_n(x) = φ(n+1, n; x) − A_n x

All nonlinear maps accept a single state (d,) or a batch (B, d).
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve, solve_triangular

from .cache import StepMemo
from .errors import (ConfigurationError, ContractionFailure, DomainError, IllConditionedError,
                     NumericalError)
from .growth import GrowthRate
from processing.sysdef import contraction_product, jacobian

DEFAULT_COND_CAP = 1e12
DEFAULT_RK4_STEP = 1e-3
DEFAULT_MAX_ITERS = 200
DEFAULT_INVERSION_TOL = 1e-12

_CHUNK = 64


def _check_index(cocycle, index: int, label: str) -> int:
    if int(index) != index:
        raise DomainError(f"{label}={index} is not an integer index", condition="integer index")
    index = int(index)
    if index < cocycle.start:
        raise DomainError(f"{label}={index} lies before the first index {cocycle.start}",
                          condition="index >= index_start", index=index)
    return index


@dataclass
class PairTable:
    """Transfers between every pair of grid indices, stored as mantissa · e^{log}

    forward[i, k]  = 𝒜(grid[k], grid[i]) for k ≥ i
    backward[i, k] = 𝒜(grid[i], grid[k]) for k ≥ i
    """
    grid: np.ndarray
    forward: np.ndarray
    forward_log: np.ndarray
    backward: np.ndarray
    backward_log: np.ndarray

    def shifted(self, log_mu: np.ndarray, tau: float) -> "PairTable":
        """Pair table of the τ-scaled cocycle; log_mu holds ln μ at the grid points"""
        if tau == 0:
            return self
        spread = log_mu[None, :] - log_mu[:, None]
        return PairTable(self.grid, self.forward, self.forward_log - tau * spread,
                         self.backward, self.backward_log + tau * spread)


class LinearCocycle:
    """Discrete linear cocycle over step matrices A_n, n ≥ start

    `step_source` maps an integer index array to stacked step matrices. Step
    matrices, their inverses and condition numbers are memoized in tables that
    only grow; reads never block once a table covers the requested range.
    """

    def __init__(self, step_source: Callable[[np.ndarray], np.ndarray], dim: int, start: int = 0,
                 cond_cap: float = DEFAULT_COND_CAP, name: str = "cocycle",
                 memo_key: Optional[str] = None, source: Any = None):
        self._step_source = step_source
        self.dim = int(dim)
        self.start = int(start)
        self.cond_cap = float(cond_cap)
        self.name = name
        self.source = source
        self._steps = np.empty((0, self.dim, self.dim))
        self._inverses = np.empty((0, self.dim, self.dim))
        self._conds = np.empty(0)
        self._limit: Optional[int] = None
        self._lock = threading.Lock()
        self._disk = StepMemo(namespace=memo_key)
        self._transfers = StepMemo()
        self._factors = StepMemo()
        self._tables = StepMemo()
        logging.info(f"LinearCocycle '{name}' initialized (d={self.dim}, start={self.start})")

    @classmethod
    def from_spec(cls, spec, cond_cap: float = DEFAULT_COND_CAP) -> "LinearCocycle":
        if not spec.is_discrete:
            raise ConfigurationError("continuous systems reach a cocycle through Flow.discretize()",
                                     condition="discrete spec")
        return cls(spec.linear_batch, spec.dim, spec.index_start, cond_cap=cond_cap,
                   name=spec.name, memo_key=spec.spec_hash[:20], source=spec)

    @classmethod
    def from_matrices(cls, matrices: Sequence[np.ndarray], start: int = 0,
                      name: str = "matrices", cond_cap: float = DEFAULT_COND_CAP) -> "LinearCocycle":
        """Cocycle over a finite list of step matrices (the window is the list length)"""
        table = np.asarray(matrices, dtype=float)

        def source(indices):
            offsets = np.asarray(indices) - start
            if np.any(offsets >= len(table)):
                raise DomainError(f"cocycle '{name}' has only {len(table)} steps",
                                  condition="index within the supplied steps",
                                  index=int(np.asarray(indices).max()))
            return table[offsets]

        cocycle = cls(source, table.shape[1], start, cond_cap=cond_cap, name=name)
        cocycle._limit = start + len(table) - 1
        return cocycle

    @classmethod
    def constant(cls, matrix: np.ndarray, start: int = 0, name: str = "constant") -> "LinearCocycle":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        return cls(lambda idx: np.broadcast_to(matrix, (len(idx),) + matrix.shape).copy(),
                   matrix.shape[0], start, name=name)

    def memo_stats(self) -> Dict[str, Any]:
        """Hit and miss counts of the in-memory memos"""
        return {label: memo.get_stats() for label, memo in
                (("transfers", self._transfers), ("factors", self._factors), ("tables", self._tables))}

    # -- step tables -------------------------------------------------------

    def ensure(self, upto: int) -> None:
        """Make A_n, A_n⁻¹ and cond(A_n) available for start ≤ n ≤ upto"""
        needed = int(upto) - self.start + 1
        if needed <= len(self._conds):
            return
        with self._lock:
            have = len(self._conds)
            if needed <= have:
                return
            size = _CHUNK
            while size < needed:
                size *= 2
            if self._limit is not None:
                size = max(needed, min(size, self._limit - self.start + 1))

            name = f"steps-{self.start}-{size}"
            arrays = self._disk.load_arrays(name)
            if arrays is not None and arrays["steps"].shape[0] >= size:
                steps, inverses, conds = arrays["steps"], arrays["inverses"], arrays["conds"]
            else:
                indices = np.arange(self.start + have, self.start + size)
                fresh = np.asarray(self._step_source(indices), dtype=float)
                fresh = fresh.reshape(len(indices), self.dim, self.dim)
                with np.errstate(all="ignore"):
                    finite = np.all(np.isfinite(fresh), axis=(1, 2))
                    conds = np.full(len(indices), np.inf)
                    conds[finite] = np.linalg.cond(fresh[finite]) if np.any(finite) else conds[finite]
                bad = ~np.isfinite(conds) | (conds > self.cond_cap)
                if np.any(bad):
                    first = int(np.argmax(bad))
                    bad_index = int(indices[first])
                    if bad_index <= upto:
                        raise IllConditionedError(
                            f"A_n is not invertible within cond_cap at n={bad_index} "
                            f"(cond={conds[first]:.3g})", index=bad_index, cond_cap=self.cond_cap)
                    fresh, conds, indices = fresh[:first], conds[:first], indices[:first]
                # LAPACK getrf/getri: LU with partial pivoting
                inverses = np.linalg.inv(fresh) if len(fresh) else fresh.copy()
                steps = np.concatenate([self._steps, fresh])
                inverses = np.concatenate([self._inverses, inverses])
                conds = np.concatenate([self._conds, conds])
                if not np.any(bad):
                    self._disk.save_arrays(name, steps=steps, inverses=inverses, conds=conds)

            for array in (steps, inverses, conds):
                array.flags.writeable = False
            self._steps, self._inverses = steps, inverses
            self._conds = conds

    def step(self, n: int) -> np.ndarray:
        n = _check_index(self, n, "n")
        self.ensure(n)
        return self._steps[n - self.start]

    def step_inverse(self, n: int) -> np.ndarray:
        n = _check_index(self, n, "n")
        self.ensure(n)
        return self._inverses[n - self.start]

    def steps(self, lo: int, hi: int) -> np.ndarray:
        """A_lo … A_{hi-1}"""
        lo = _check_index(self, lo, "lo")
        if hi <= lo:
            return np.empty((0, self.dim, self.dim))
        self.ensure(hi - 1)
        return self._steps[lo - self.start:hi - self.start]

    def inverse_steps(self, lo: int, hi: int) -> np.ndarray:
        lo = _check_index(self, lo, "lo")
        if hi <= lo:
            return np.empty((0, self.dim, self.dim))
        self.ensure(hi - 1)
        return self._inverses[lo - self.start:hi - self.start]

    def condition_numbers(self, lo: int, hi: int) -> np.ndarray:
        self.ensure(hi - 1)
        return self._conds[lo - self.start:hi - self.start]

    def solve_step(self, n: int, y: np.ndarray) -> np.ndarray:
        """A_n⁻¹ y via the cached LU factorization of A_n; y is (d,) or (B, d)"""
        factor = self._factors.get(n)
        if factor is None:
            factor = self._factors.put(n, lu_factor(self.step(n)))
        y = np.asarray(y, dtype=float)
        return lu_solve(factor, y.T).T

    # -- transfers ---------------------------------------------------------

    def transfer(self, m: int, n: int) -> np.ndarray:
        """𝒜(m, n)"""
        m = _check_index(self, m, "m")
        n = _check_index(self, n, "n")
        if m == n:
            return np.eye(self.dim)
        cached = self._transfers.get((m, n))
        if cached is not None:
            return cached.copy()
        if m > n:
            product = np.eye(self.dim)
            for matrix in self.steps(n, m):
                product = matrix @ product
        else:
            product = np.eye(self.dim)
            for matrix in self.inverse_steps(m, n):
                product = product @ matrix
        if not np.all(np.isfinite(product)):
            raise NumericalError(f"transfer 𝒜({m},{n}) overflowed; use log_transfer",
                                 condition="finite transfer", m=m, n=n)
        self._transfers.put((m, n), product)
        return product.copy()

    def log_transfer(self, m: int, n: int) -> Tuple[np.ndarray, float]:
        """𝒜(m, n) as (mantissa, log scale) with max|mantissa| = 1"""
        m = _check_index(self, m, "m")
        n = _check_index(self, n, "n")
        product = np.eye(self.dim)
        scale = 0.0
        if m >= n:
            for matrix in self.steps(n, m):
                product = matrix @ product
                peak = np.abs(product).max()
                product /= peak
                scale += math.log(peak)
        else:
            for matrix in self.inverse_steps(m, n):
                product = product @ matrix
                peak = np.abs(product).max()
                product /= peak
                scale += math.log(peak)
        return product, scale

    def push_columns(self, columns: np.ndarray, ref: int, indices: Sequence[int]) -> np.ndarray:
        """Unit-normalized columns of 𝒜(n, ref)·columns for every n in indices, shape (N, d, k)"""
        columns = np.asarray(columns, dtype=float)
        columns = columns / np.linalg.norm(columns, axis=0, keepdims=True)
        indices = [int(i) for i in indices]
        out = np.empty((len(indices), self.dim, columns.shape[1]))
        if not indices:
            return out
        self.ensure(max(max(indices), ref))
        targets: Dict[int, List[int]] = {}
        for position, index in enumerate(indices):
            targets.setdefault(index, []).append(position)

        current = columns.copy()
        for j in range(ref, max(max(indices), ref) + 1):
            for position in targets.get(j, ()):
                out[position] = current
            if j < max(indices):
                current = self._steps[j - self.start] @ current
                current /= np.linalg.norm(current, axis=0, keepdims=True)

        current = columns.copy()
        for j in range(ref - 1, min(min(indices), ref) - 1, -1):
            current = self._inverses[j - self.start] @ current
            current /= np.linalg.norm(current, axis=0, keepdims=True)
            for position in targets.get(j, ()):
                out[position] = current
        return out

    def pair_table(self, grid: Sequence[int], qr: bool = False) -> PairTable:
        """Forward and backward transfers between all grid pairs (memoized per grid)"""
        key = (tuple(int(g) for g in grid), bool(qr))
        table = self._tables.get(key)
        if table is None:
            table = self._tables.put(key, self._march_pairs(np.asarray(key[0]), qr))
        return table

    def _march_pairs(self, grid: np.ndarray, qr: bool) -> PairTable:
        size, d = len(grid), self.dim
        first, last = int(grid[0]), int(grid[-1])
        _check_index(self, first, "grid[0]")
        self.ensure(last)
        forward = np.zeros((size, size, d, d))
        backward = np.zeros((size, size, d, d))
        forward_log = np.full((size, size), -np.inf)
        backward_log = np.full((size, size), -np.inf)

        eye = np.eye(d)
        X = np.broadcast_to(eye, (size, d, d)).copy()
        Y = np.broadcast_to(eye, (size, d, d)).copy()
        Q = np.broadcast_to(eye, (size, d, d)).copy()
        xs = np.zeros(size)
        ys = np.zeros(size)
        position = {int(g): k for k, g in enumerate(grid)}
        active = 0
        for j in range(first, last + 1):
            while active < size and grid[active] == j:
                active += 1
            k = position.get(j)
            if k is not None:
                if qr:
                    # X holds R; the transfer is Q R e^{xs}, its inverse R⁻¹ Qᵀ e^{-xs}
                    for i in range(k + 1):
                        value = Q[i] @ X[i]
                        peak = np.abs(value).max()
                        forward[i, k] = value / peak
                        forward_log[i, k] = xs[i] + math.log(peak)
                        value = solve_triangular(X[i], Q[i].T)
                        peak = np.abs(value).max()
                        backward[i, k] = value / peak
                        backward_log[i, k] = math.log(peak) - xs[i]
                else:
                    forward[:k + 1, k] = X[:k + 1]
                    forward_log[:k + 1, k] = xs[:k + 1]
                    backward[:k + 1, k] = Y[:k + 1]
                    backward_log[:k + 1, k] = ys[:k + 1]
            if j == last:
                break
            step = self._steps[j - self.start]
            if qr:
                q, r = np.linalg.qr(step @ Q[:active])
                Q[:active] = q
                X[:active] = r @ X[:active]
            else:
                X[:active] = step @ X[:active]
                Y[:active] = Y[:active] @ self._inverses[j - self.start]
                peaks = np.abs(Y[:active]).max(axis=(1, 2))
                Y[:active] /= peaks[:, None, None]
                ys[:active] += np.log(peaks)
            peaks = np.abs(X[:active]).max(axis=(1, 2))
            X[:active] /= peaks[:, None, None]
            xs[:active] += np.log(peaks)
        return PairTable(grid, forward, forward_log, backward, backward_log)


class ScaledCocycle:
    """The cocycle (μ_m/μ_n)^{-τ}·𝒜(m, n); shares every table with its base"""

    def __init__(self, base, rate: GrowthRate, tau: float):
        self.base = base
        self.rate = rate.as_sequence()
        self.tau = float(tau)
        self.dim = base.dim
        self.start = base.start
        self.name = f"{base.name}[tau={self.tau:g}]"

    def _factor(self, m: int, n: int) -> float:
        return math.exp(-self.tau * float(self.rate.log_ratio(m, n)))

    def ensure(self, upto: int) -> None:
        self.base.ensure(upto)

    def step(self, n: int) -> np.ndarray:
        return self._factor(n + 1, n) * self.base.step(n)

    def step_inverse(self, n: int) -> np.ndarray:
        return self.base.step_inverse(n) / self._factor(n + 1, n)

    def steps(self, lo: int, hi: int) -> np.ndarray:
        if hi <= lo:
            return np.empty((0, self.dim, self.dim))
        idx = np.arange(lo, hi, dtype=float)
        factors = np.exp(-self.tau * self.rate.log_ratio(idx + 1, idx))
        return self.base.steps(lo, hi) * factors[:, None, None]

    def solve_step(self, n: int, y: np.ndarray) -> np.ndarray:
        return self.base.solve_step(n, y) / self._factor(n + 1, n)

    def transfer(self, m: int, n: int) -> np.ndarray:
        return self._factor(m, n) * self.base.transfer(m, n)

    def log_transfer(self, m: int, n: int) -> Tuple[np.ndarray, float]:
        mantissa, scale = self.base.log_transfer(m, n)
        return mantissa, scale - self.tau * float(self.rate.log_ratio(m, n))

    def push_columns(self, columns: np.ndarray, ref: int, indices: Sequence[int]) -> np.ndarray:
        return self.base.push_columns(columns, ref, indices)

    def pair_table(self, grid: Sequence[int], qr: bool = False) -> PairTable:
        table = self.base.pair_table(grid, qr)
        return table.shifted(self.rate.log(np.asarray(grid, dtype=float)), self.tau)


# ---------------------------------------------------------------------------
# Nonlinear cocycle
# ---------------------------------------------------------------------------

class NonlinearCocycle:
    """𝒢(m, n) = G_{m-1}∘…∘G_n with G_n(x) = A_n x + g_n(x)"""

    def __init__(self, linear, perturbation: Optional[Callable[[int, np.ndarray], np.ndarray]],
                 max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_INVERSION_TOL,
                 constants: Optional[Dict[str, float]] = None, theta: Optional[float] = None):
        self.linear = linear
        self._perturbation = perturbation
        self.max_iters = int(max_iters)
        self.tol = float(tol)
        self.constants = dict(constants or {})
        self.theta = theta
        self.dim = linear.dim
        self.start = linear.start
        self._warned = False

    @classmethod
    def from_spec(cls, spec, linear: Optional[LinearCocycle] = None, **kwargs) -> "NonlinearCocycle":
        linear = linear or LinearCocycle.from_spec(spec)
        perturbation = None if spec.nonlinear_is_zero else (
            lambda n, x: spec.nonlinear_value(float(n), x))
        return cls(linear, perturbation, constants=spec.constants, theta=spec.rate.theta, **kwargs)

    @property
    def is_linear(self) -> bool:
        return self._perturbation is None

    def perturbation(self, n: int, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._perturbation is None:
            return np.zeros_like(x)
        return np.asarray(self._perturbation(n, x), dtype=float)

    def step_map(self, n: int, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x @ self.linear.step(n).T + self.perturbation(n, x)

    def contraction_product(self) -> Optional[float]:
        if self.theta is None:
            return None
        return contraction_product(*(self.constants.get(name) for name in ("c", "K", "a")), self.theta)

    def _check_precondition(self) -> None:
        if self._warned:
            return
        self._warned = True
        product = self.contraction_product()
        if product is not None and product >= 1:
            logging.warning(f"Contraction precondition c*K*theta^(a+1) = {product:.4g} >= 1; "
                            f"backward steps may not converge")

    def forward(self, m: int, n: int, x: np.ndarray) -> np.ndarray:
        if m < n:
            raise DomainError(f"forward evaluation needs m >= n, got m={m}, n={n}",
                              condition="m >= n")
        x = np.array(x, dtype=float)
        for j in range(n, m):
            x = self.step_map(j, x)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"nonlinear orbit overflowed between {n} and {m}",
                                 condition="finite orbit", m=m, n=n)
        return x

    def inverse_step(self, j: int, y: np.ndarray) -> np.ndarray:
        """Solve G_j(x) = y by x ← A_j⁻¹(y − g_j(x)) from x₀ = A_j⁻¹ y"""
        y = np.asarray(y, dtype=float)
        x = self.linear.solve_step(j, y)
        if self._perturbation is None:
            return x
        self._check_precondition()
        delta = np.inf
        for _ in range(self.max_iters):
            updated = self.linear.solve_step(j, y - self.perturbation(j, x))
            delta = float(np.max(np.abs(updated - x))) if updated.size else 0.0
            x = updated
            if not math.isfinite(delta):
                break
            if delta <= self.tol * max(1.0, float(np.max(np.abs(x)))):
                return x
        raise ContractionFailure(f"backward step at n={j} did not converge in {self.max_iters} "
                                 f"iterations (last |dx|={delta:.3g})", index=j, residual=delta)

    def backward(self, m: int, n: int, y: np.ndarray) -> np.ndarray:
        if m >= n:
            raise DomainError(f"backward evaluation needs m < n, got m={m}, n={n}", condition="m < n")
        _check_index(self.linear, m, "m")
        y = np.array(y, dtype=float)
        for j in range(n - 1, m - 1, -1):
            y = self.inverse_step(j, y)
        return y

    def evaluate(self, m: int, n: int, x: np.ndarray) -> np.ndarray:
        """𝒢(m, n)(x) for any order of m and n"""
        if m >= n:
            return self.forward(m, n, x)
        return self.backward(m, n, x)

    def orbit(self, n: int, x: np.ndarray, upto: int) -> np.ndarray:
        """States 𝒢(j, n)(x) for j = n … upto, stacked along axis 0"""
        x = np.array(x, dtype=float)
        states = [x]
        for j in range(n, upto):
            x = self.step_map(j, x)
            states.append(x)
        return np.stack(states)


class FlowCocycle(NonlinearCocycle):
    """Time-one maps G_n = φ(n+1, n; ·) of a flow; backward steps integrate backward"""

    def __init__(self, linear: LinearCocycle, flow, **kwargs):
        super().__init__(linear, None if flow.spec.nonlinear_is_zero else self._difference, **kwargs)
        self.flow = flow

    def _difference(self, n: int, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.step_map(n, x) - x @ self.linear.step(int(n)).T

    def step_map(self, n: int, x: np.ndarray) -> np.ndarray:
        if self.is_linear:
            return np.asarray(x, dtype=float) @ self.linear.step(n).T
        return self.flow.propagate(float(n) + 1.0, float(n), x)

    def inverse_step(self, j: int, y: np.ndarray) -> np.ndarray:
        if self.is_linear:
            return self.linear.solve_step(j, y)
        return self.flow.propagate(float(j), float(j) + 1.0, y)


# ---------------------------------------------------------------------------
# Bound checks
# ---------------------------------------------------------------------------

def discrete_gronwall(K: float, alpha: float, z: np.ndarray) -> np.ndarray:
    """Envelope K α exp(K Σ_{j<m} z_j) bounding any u with u_m ≤ K(α + Σ_{j<m} z_j u_j)"""
    z = np.asarray(z, dtype=float)
    partial = np.concatenate([[0.0], np.cumsum(z)])
    return K * alpha * np.exp(K * partial)


@dataclass
class GronwallReport:
    a_tilde: float
    derivative_ratio: float
    pointwise_ratio: float
    holder_ratio: float
    witness: Dict[str, Any] = field(default_factory=dict)
    slack: float = 1.1

    @property
    def passed(self) -> bool:
        return self.derivative_ratio <= self.slack and self.pointwise_ratio <= self.slack

    def to_dict(self) -> Dict[str, Any]:
        return {"a_tilde": self.a_tilde, "derivative_ratio": self.derivative_ratio,
                "pointwise_ratio": self.pointwise_ratio, "holder_ratio": self.holder_ratio,
                "witness": self.witness, "slack": self.slack, "passed": self.passed}


def gronwall_report(nonlinear: NonlinearCocycle, rate: GrowthRate, K: float, a: float, c: float,
                    pairs: Sequence[Tuple[int, int]], points: np.ndarray,
                    slack: float = 1.1) -> GronwallReport:
    """Ratios of ‖D𝒢(m,n)(x)‖ and ‖𝒢(m,n)(x)‖/‖x‖ to K(μ_max/μ_min)^ã, ã = a + K c θ

    The Hölder column is ‖D𝒢(x) − D𝒢(y)‖ / (‖x − y‖ (μ_m/μ_n)^{3ã+Kcθ} log(μ_m/μ_n)) for m > n.
    """
    rate = rate.as_sequence()
    theta = rate.theta
    a_tilde = a + K * c * theta
    points = np.atleast_2d(np.asarray(points, dtype=float))
    norms = np.linalg.norm(points, axis=1)
    nonzero = norms > 0
    partners = np.roll(points, 1, axis=0)
    gaps = np.linalg.norm(points - partners, axis=1)

    worst_d, worst_p, worst_h = 0.0, 0.0, 0.0
    witness: Dict[str, Any] = {}
    for m, n in pairs:
        spread = abs(float(rate.log_ratio(max(m, n), min(m, n))))
        bound = K * math.exp(a_tilde * spread)
        jac = jacobian(lambda X: nonlinear.evaluate(m, n, X), points)
        ratio_d = np.linalg.norm(jac, ord=2, axis=(1, 2)) / bound
        values = nonlinear.evaluate(m, n, points)
        ratio_p = np.where(nonzero, np.linalg.norm(values, axis=1) / (bound * np.where(nonzero, norms, 1.0)), 0.0)
        i = int(np.argmax(ratio_d))
        if ratio_d[i] > worst_d:
            worst_d = float(ratio_d[i])
            witness["derivative"] = {"m": m, "n": n, "x": points[i].tolist()}
        i = int(np.argmax(ratio_p))
        if ratio_p[i] > worst_p:
            worst_p = float(ratio_p[i])
            witness["pointwise"] = {"m": m, "n": n, "x": points[i].tolist()}
        if m > n and spread > 0:
            jac_partner = np.roll(jac, 1, axis=0)
            scale = math.exp((3 * a_tilde + K * c * theta) * spread) * spread
            valid = gaps > 0
            ratio_h = np.where(valid, np.linalg.norm(jac - jac_partner, ord=2, axis=(1, 2))
                               / (np.where(valid, gaps, 1.0) * scale), 0.0)
            worst_h = max(worst_h, float(ratio_h.max()))
    return GronwallReport(a_tilde=a_tilde, derivative_ratio=worst_d, pointwise_ratio=worst_p,
                          holder_ratio=worst_h, witness=witness, slack=slack)


# ---------------------------------------------------------------------------
# Continuous time
# ---------------------------------------------------------------------------

def _step_plan(t: float, s: float, h: float) -> Tuple[np.ndarray, np.ndarray]:
    """Start times and signed step sizes from s to t: full steps then a final partial step"""
    span = abs(t - s)
    if span == 0:
        return np.empty(0), np.empty(0)
    count = max(1, math.ceil(span / h - 1e-9))
    direction = 1.0 if t > s else -1.0
    sizes = np.full(count, h)
    sizes[-1] = span - (count - 1) * h
    starts = s + direction * h * np.arange(count)
    return starts, direction * sizes


class Flow:
    """Continuous system x′ = A(t)x + f(t, x) integrated by fixed-step RK4

    With `shift=(rate, tau)` the linear part becomes A(t) − τ μ′(t)/μ(t) Id.
    """

    def __init__(self, spec, step: float = DEFAULT_RK4_STEP,
                 shift: Optional[Tuple[GrowthRate, float]] = None, cond_cap: float = DEFAULT_COND_CAP):
        if spec.is_discrete:
            raise ConfigurationError("Flow needs a continuous system", condition="continuous spec")
        if step <= 0:
            raise ConfigurationError(f"RK4 step must be positive, got {step}", condition="h > 0")
        self.spec = spec
        self.dim = spec.dim
        self.start = spec.index_start
        self.step = float(step)
        self.shift = shift
        self.cond_cap = cond_cap
        self._stages = StepMemo()
        logging.info(f"Flow '{spec.name}' initialized (h={self.step:g}"
                     + (f", tau={shift[1]:g})" if shift else ")"))

    def shifted(self, rate: GrowthRate, tau: float) -> "Flow":
        return Flow(self.spec, self.step, shift=(rate, tau), cond_cap=self.cond_cap)

    def matrix_field(self, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        matrices = self.spec.linear_batch(times)
        if self.shift is not None:
            rate, tau = self.shift
            coefficient = tau * np.asarray(rate.log_derivative(times))
            matrices = matrices - coefficient[:, None, None] * np.eye(self.dim)[None]
        return matrices

    def _check_time(self, *values) -> None:
        for value in values:
            low = float(np.min(value))
            if low < self.start - 1e-12:
                raise DomainError(f"time {low:g} lies before the domain start {self.start}",
                                  condition="t, s >= domain_start", time=low)

    def _stage_matrices(self, t: float, s: float):
        key = (float(t), float(s))
        cached = self._stages.get(key)
        if cached is not None:
            return cached
        starts, sizes = _step_plan(t, s, self.step)
        stages = (starts, sizes, self.matrix_field(starts),
                  self.matrix_field(starts + sizes / 2), self.matrix_field(starts + sizes))
        if len(self._stages) < 512:
            self._stages.put(key, stages)
        return stages

    def transfer(self, t: float, s: float) -> np.ndarray:
        """T(t, s) by RK4 on X′ = A(τ)X from s to t"""
        self._check_time(t, s)
        X = np.eye(self.dim)
        if t == s:
            return X
        _, sizes, A0, Am, A1 = self._stage_matrices(t, s)
        for k, h in enumerate(sizes):
            k1 = A0[k] @ X
            k2 = Am[k] @ (X + 0.5 * h * k1)
            k3 = Am[k] @ (X + 0.5 * h * k2)
            k4 = A1[k] @ (X + h * k3)
            X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(X)):
            raise NumericalError(f"T({t:g},{s:g}) overflowed", condition="finite transfer")
        return X

    def transfer_through(self, linear: LinearCocycle, t: float, s: float) -> np.ndarray:
        """T(t, s) routed through the integer grid: T(t, b) 𝒜(b, a) T(a, s)

        `linear` must be this flow's discretization; only the fractional ends
        are integrated.
        """
        if t >= s:
            a, b = math.ceil(s), math.floor(t)
            crosses = a <= b
        else:
            a, b = math.floor(s), math.ceil(t)
            crosses = b <= a
        if not crosses or a == b:
            return self.transfer(t, s)
        return self.transfer(t, b) @ linear.transfer(b, a) @ self.transfer(a, s)

    def unit_transfers(self, indices: np.ndarray) -> np.ndarray:
        """T(n+1, n) for every n in indices, integrated together"""
        indices = np.asarray(indices, dtype=float)
        self._check_time(indices)
        offsets, sizes = _step_plan(1.0, 0.0, self.step)
        out = np.empty((len(indices), self.dim, self.dim))
        for lo in range(0, len(indices), _CHUNK):
            block = indices[lo:lo + _CHUNK]
            times = block[:, None] + offsets[None, :]
            shape = (len(block), len(offsets), self.dim, self.dim)
            A0 = self.matrix_field(times.ravel()).reshape(shape)
            Am = self.matrix_field((times + sizes / 2).ravel()).reshape(shape)
            A1 = self.matrix_field((times + sizes).ravel()).reshape(shape)
            X = np.broadcast_to(np.eye(self.dim), (len(block), self.dim, self.dim)).copy()
            for k, h in enumerate(sizes):
                k1 = A0[:, k] @ X
                k2 = Am[:, k] @ (X + 0.5 * h * k1)
                k3 = Am[:, k] @ (X + 0.5 * h * k2)
                k4 = A1[:, k] @ (X + h * k3)
                X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            out[lo:lo + len(block)] = X
        return out

    def _vector_field(self, matrices: np.ndarray, times, x: np.ndarray, nonlinear: bool) -> np.ndarray:
        if matrices.ndim == 2:
            value = x @ matrices.T
        else:
            value = np.einsum("bij,bj->bi", matrices, x)
        if nonlinear and not self.spec.nonlinear_is_zero:
            value = value + self.spec.nonlinear_value(times, x)
        return value

    def propagate(self, t, s, x: np.ndarray, nonlinear: bool = True) -> np.ndarray:
        """State at time t of the solution through (s, x); t and s may be per-sample arrays"""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x).copy()
        self._check_time(t, s)
        if np.ndim(t) == 0 and np.ndim(s) == 0:
            result = self._propagate_shared(float(t), float(s), x, nonlinear)
        else:
            t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
            s = np.broadcast_to(np.asarray(s, dtype=float), (x.shape[0],))
            result = self._propagate_masked(t, s, x, nonlinear)
        if not np.all(np.isfinite(result)):
            raise NumericalError("flow overflowed", condition="finite flow")
        return result[0] if single else result

    def _propagate_shared(self, t: float, s: float, x: np.ndarray, nonlinear: bool) -> np.ndarray:
        if t == s:
            return x
        starts, sizes, A0, Am, A1 = self._stage_matrices(t, s)
        F = self._vector_field
        for k, h in enumerate(sizes):
            tau = starts[k]
            k1 = F(A0[k], tau, x, nonlinear)
            k2 = F(Am[k], tau + h / 2, x + 0.5 * h * k1, nonlinear)
            k3 = F(Am[k], tau + h / 2, x + 0.5 * h * k2, nonlinear)
            k4 = F(A1[k], tau + h, x + h * k3, nonlinear)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return x

    def _propagate_masked(self, t: np.ndarray, s: np.ndarray, x: np.ndarray, nonlinear: bool) -> np.ndarray:
        span = np.abs(t - s)
        direction = np.sign(t - s)
        counts = np.where(span > 0, np.maximum(1, np.ceil(span / self.step - 1e-9)), 0).astype(int)
        last = span - (counts - 1) * self.step
        F = self._vector_field
        for k in range(int(counts.max(initial=0))):
            sizes = np.where(k < counts - 1, self.step, np.where(k == counts - 1, last, 0.0))
            h = (direction * sizes)[:, None]
            tau = s + direction * self.step * k
            half = tau + h[:, 0] / 2
            full = tau + h[:, 0]
            A0, Am, A1 = self.matrix_field(tau), self.matrix_field(half), self.matrix_field(full)
            k1 = F(A0, tau, x, nonlinear)
            k2 = F(Am, half, x + 0.5 * h * k1, nonlinear)
            k3 = F(Am, half, x + 0.5 * h * k2, nonlinear)
            k4 = F(A1, full, x + h * k3, nonlinear)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return x

    def nonlinear_flow(self, t, s, x: np.ndarray) -> np.ndarray:
        """φ(t, s; x)"""
        return self.propagate(t, s, x, nonlinear=True)

    def discretize(self) -> Tuple[LinearCocycle, NonlinearCocycle]:
        """A_n = T(n+1, n) and g_n(x) = φ(n+1, n; x) − A_n x"""
        tag = "" if self.shift is None else f"-tau{self.shift[1]:g}"
        linear = LinearCocycle(self.unit_transfers, self.dim, self.start, cond_cap=self.cond_cap,
                               name=f"{self.spec.name}-discretized{tag}",
                               memo_key=f"{self.spec.spec_hash[:20]}-rk4-{self.step:g}{tag}",
                               source=self.spec)
        nonlinear = FlowCocycle(linear, self, constants=self.spec.constants, theta=self.spec.rate.theta)
        return linear, nonlinear


def discretize(flow: Flow) -> Tuple[LinearCocycle, NonlinearCocycle]:
    return flow.discretize()
