# controller.py
"""
AnalysisController: one pipeline per command-line subcommand

Each pipeline returns a report dictionary plus the rows of its CSV table;
`run` wires the controller to the exporters and maps errors to exit codes.
"""

import logging
import os
import sys
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core.dichotomy import ProjectionFamily, certify, certify_continuous
from core.errors import (EXIT_OK, ConfigurationError, MudichoError, NotHyperbolicError)
from core.evolution import Flow, LinearCocycle, NonlinearCocycle, gronwall_report
from core.growth import builtin_rate, verify_ratio_bound
from core.linearize import ContinuousConjugacy, build_field, regularity_report
from core.rescale import fn_series_crosscheck, max_horizon, rescale, verify_equivalence
from core.sampling import SamplingGrid
from core.spectrum import check_conditions, continuous_spectrum, scan_spectrum, spectrum_of_rescaled
from export.report_exporter import (flatten_matrix, provenance, render_csv, render_json,
                                    save_as_csv, save_as_json, write_meta)
from processing.sysdef import estimate_lipschitz, load_spec
from session import RunConfig

IDENTITY_HORIZON = 64
IDENTITY_POINTS = 1000
HAUSDORFF_TOLERANCE = 0.1
DERIVATIVE_RADIUS = 0.1
CONTINUOUS_RADIUS = 0.3
LIPSCHITZ_WINDOW = 64
FLOW_TABLE_ROWS = 32


@dataclass
class Outcome:
    report: Dict[str, Any]
    kind: str
    rows: List[Dict[str, Any]]


class AnalysisController:
    """Loads the system once and runs the configured pipeline"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.spec = self._load_spec()
        self.rate = self.spec.rate
        self.flow: Optional[Flow] = None
        if self.spec.is_discrete:
            self.linear = LinearCocycle.from_spec(self.spec, cond_cap=config.cond_cap)
            self.nonlinear = NonlinearCocycle.from_spec(self.spec, self.linear)
        else:
            self.flow = Flow(self.spec, step=config.step, cond_cap=config.cond_cap)
            self.linear, self.nonlinear = self.flow.discretize()
        logging.info(f"AnalysisController initialized for '{self.spec.name}' "
                     f"({self.spec.kind.value}, d={self.spec.dim}, rate={self.rate.name})")

    def _load_spec(self):
        config = self.config
        spec = load_spec(config.spec_path, cond_cap=config.cond_cap)
        spec = spec.with_constants(**config.constants)
        if config.rate:
            spec = spec.with_rate(builtin_rate(config.rate, spec.rate.kind))
        return spec

    # -- helpers -----------------------------------------------------------

    @property
    def analytic_projections(self) -> Optional[ProjectionFamily]:
        return ProjectionFamily.analytic(self.spec)

    def _scan_options(self) -> Dict[str, Any]:
        c = self.config
        return dict(tau_min=c.tau_min, tau_max=c.tau_max, dtau=c.dtau, window=c.window,
                    refine=c.refine, workers=c.parallel, gap_factor=c.gap_factor, **c.fit_options)

    def _certificate(self, window: Optional[int] = None):
        window = window or self.config.window
        options = dict(gap_factor=self.config.gap_factor, **self.config.fit_options)
        if self.flow is not None:
            return certify_continuous(self.flow, self.rate, window, seed=self.config.grid.seed,
                                      projections=self.analytic_projections, **options)
        return certify(self.linear, self.rate, window, projections=self.analytic_projections, **options)

    def _system_block(self) -> Dict[str, Any]:
        return {"name": self.spec.name, "kind": self.spec.kind.value, "dim": self.spec.dim,
                "index_start": self.spec.index_start, "rate": self.rate.to_dict(),
                "constants": dict(sorted(self.spec.constants.items())), "flags": list(self.spec.flags)}

    # -- pipelines ---------------------------------------------------------

    def run_dichotomy(self) -> Outcome:
        cert = self._certificate()
        report = {"certificate": cert.to_dict()}
        if self.spec.is_discrete and not self.spec.nonlinear_is_zero:
            window = min(self.config.window, LIPSCHITZ_WINDOW)
            report["lipschitz"] = estimate_lipschitz(self.spec, window, self.config.grid).to_dict()
        logging.info(f"Dichotomy verdict for '{self.spec.name}': {cert.verdict.value}")
        return Outcome(report, "dichotomy", cert.fit_report.rows())

    def run_spectrum(self) -> Outcome:
        if self.flow is not None:
            estimate = continuous_spectrum(self.flow, self.rate, direct_taus=[0.0], **self._scan_options())
        else:
            estimate = scan_spectrum(self.linear, self.rate, **self._scan_options())
        report = {"spectrum": estimate.to_dict(), "conditions": self._conditions(estimate)}
        logging.info(f"Spectrum of '{self.spec.name}': {estimate.intervals}")
        return Outcome(report, "spectrum", estimate.rows())

    def _conditions(self, estimate) -> Dict[str, Any]:
        try:
            return check_conditions(estimate).to_dict()
        except (NotHyperbolicError, ConfigurationError) as e:
            logging.warning(f"Spectral conditions not evaluated: {e.message}")
            return e.to_dict()

    def _rescaled(self, horizon: Optional[int] = None):
        window = self.config.window
        horizon = horizon or max_horizon(self.rate, window)
        nonlinear = None if self.nonlinear.is_linear else self.nonlinear
        return rescale(self.linear, self.rate, horizon, nonlinear=nonlinear, source_window=window)

    def run_rescale(self) -> Outcome:
        rs = self._rescaled()
        rows = [{"n": row["n"], "k_n": row["k_n"], "k_next": row["k_next"],
                 **{key: value for key, value in row.items() if key.startswith("b")}} for row in rs.rows()]
        return Outcome({"rescaled": rs.to_dict()}, "rescale", rows)

    def run_linearize(self) -> Outcome:
        config = self.config
        cert = self._certificate()
        field = build_field(self.linear, self.nonlinear, self.rate, cert.projections, config.window,
                            certificate=cert, tail_eps=config.tail_eps, k_max=config.effective_k_max)
        d = self.spec.dim
        k_lo, k_hi = field.k_range
        k_hi = min(k_hi, config.window)
        rng = config.grid.rng(10)
        ks = rng.integers(k_lo, k_hi + 1, size=config.samples)
        xs = config.grid.ball(config.samples, d, offset=11)
        residuals = field.residuals(ks, xs)

        rows = []
        for k, x, r in zip(ks, xs, residuals):
            row = {"k": int(k)}
            row.update({f"x{i + 1}": float(v) for i, v in enumerate(x)})
            row["residual"] = float(r)
            rows.append(row)
        order = np.argsort(ks, kind="stable")
        rows = [rows[i] for i in order]

        base_ns = rng.integers(field.rescaled.start, field.rescaled.horizon + 1, size=min(64, config.samples))
        base_max = float(field.base_residuals(base_ns, xs[:len(base_ns)]).max()) if len(base_ns) else 0.0
        head = xs[:64]
        head_ks = ks[:64]
        recovered = np.vstack([field.inverse_psi(int(k), field.psi(int(k), x[None]))
                               for k, x in zip(head_ks, head)])
        roundtrip = float(np.max(np.linalg.norm(recovered - head, axis=1)))

        local = replace(config.grid, radius=min(config.grid.radius, DERIVATIVE_RADIUS))
        regularity = regularity_report(field, local)
        residual_max = float(residuals.max()) if len(residuals) else 0.0
        if residual_max > config.tol:
            logging.warning(f"Conjugacy residual {residual_max:.3g} exceeds tolerance {config.tol:g}")
        report = {
            "certificate": cert.to_dict(pair_samples=False),
            "field": field.to_dict(),
            "residual_max": residual_max,
            "residual_tol": config.tol,
            "residual_pass": residual_max <= config.tol,
            "base_residual_max": base_max,
            "inverse_roundtrip_max": roundtrip,
            "tail_bound": field.tail_bound(field.rescaled.start),
            "regularity": regularity.to_dict(),
        }
        if self.flow is not None:
            report["continuous"] = self._continuous_check(field, k_lo, k_hi)
        return Outcome(report, "linearize", rows)

    def _continuous_check(self, field, k_lo: int, k_hi: int) -> Dict[str, Any]:
        """max ‖H(t, G(t, x)) − x‖ at seeded (t, x)"""
        conjugacy = ContinuousConjugacy(self.flow, field)
        count = min(200, self.config.samples)
        grid = replace(self.config.grid, radius=min(self.config.grid.radius, CONTINUOUS_RADIUS))
        t = grid.rng(20).uniform(k_lo, k_hi, size=count)
        xs = grid.ball(count, self.spec.dim, offset=21)
        error = np.linalg.norm(conjugacy.H(t, conjugacy.G(t, xs)) - xs, axis=1)
        i = int(np.argmax(error))
        return {"samples": count, "H_of_G_max": float(error[i]),
                "witness": {"t": float(t[i]), "x": xs[i].tolist()}}

    def run_flow(self) -> Outcome:
        if self.flow is None:
            raise ConfigurationError("flow needs a continuous system", condition="continuous spec")
        start = float(self.spec.index_start)
        pairs = parse_times(self.config.times) if self.config.times else \
            [(start + 1.0, start), (start + 2.5, start + 0.5), (start, start + 3.0)]
        points = self.config.grid.ball(4, self.spec.dim, offset=30)
        transfers = []
        for t, s in pairs:
            transfers.append({"t": t, "s": s, "T": self.flow.transfer(t, s).tolist(),
                              "phi": self.flow.nonlinear_flow(t, s, points).tolist()})
        first = self.spec.index_start
        rows = [{"n": n, **flatten_matrix("a", self.linear.step(n))}
                for n in range(first, first + min(self.config.window, FLOW_TABLE_ROWS))]
        report = {"transfers": transfers, "points": points.tolist(), "step": self.flow.step,
                  "discretized": rows}
        return Outcome(report, "flow", rows)

    # -- verify ------------------------------------------------------------

    def run_verify(self) -> Outcome:
        checks = {
            "rescale-identity": self._check_identity,
            "fn-series": self._check_fn_series,
            "equivalence": self._check_equivalence,
            "ratio-bound": self._check_ratio_bound,
            "gronwall": self._check_gronwall,
            "conditions": self._check_conditions,
        }
        result = checks[self.config.check]()
        status = "pass" if result["passed"] else "fail"
        logging.info(f"verify {self.config.check}: {status}")
        return Outcome({"check": self.config.check, "status": status, "result": result},
                       "verify", result.pop("rows", []))

    def _check_identity(self) -> Dict[str, Any]:
        """B_n = A_n and f_n = g_n when the rescaling is the identity"""
        horizon = min(IDENTITY_HORIZON, max_horizon(self.rate, self.config.window))
        rs = self._rescaled(horizon)
        anchors_identity = all(rs.anchor(n) == n for n in range(rs.start, rs.horizon + 2))
        matrices_equal = all(np.array_equal(rs.B(n), self.linear.step(n))
                             for n in range(rs.start, rs.horizon + 1))
        points = self.config.grid.ball(IDENTITY_POINTS, self.spec.dim, offset=40)
        f_error = 0.0
        for n in range(rs.start, rs.horizon + 1):
            gap = rs.f(n, points) - self.nonlinear.perturbation(n, points)
            f_error = max(f_error, float(np.max(np.abs(gap))))
        return {"horizon": rs.horizon, "anchors_identity": anchors_identity,
                "matrices_equal": matrices_equal, "f_max_difference": f_error,
                "passed": anchors_identity and matrices_equal and f_error <= 1e-12}

    def _check_fn_series(self) -> Dict[str, Any]:
        rs = self._rescaled()
        points = self.config.grid.ball(32, self.spec.dim, offset=41)
        rows = [{"n": n, "difference": fn_series_crosscheck(rs, n, points)}
                for n in range(rs.start, rs.horizon + 1)]
        worst = max((row["difference"] for row in rows), default=0.0)
        return {"max_difference": worst, "tol": self.config.tol,
                "passed": worst <= self.config.tol, "rows": rows}

    def _check_equivalence(self) -> Dict[str, Any]:
        rs = self._rescaled()
        report = verify_equivalence(rs, self.rate, self.config.window, projections=self.analytic_projections,
                                    gap_factor=self.config.gap_factor, **self.config.fit_options)
        scan = self._scan_options()
        scan.pop("window")
        spectra = spectrum_of_rescaled(self.linear, self.rate, window=self.config.window,
                                       horizon=rs.horizon, **scan)
        return {"certificates": report.to_dict(), "spectra": spectra.to_dict(),
                "passed": report.agreement and spectra.distance <= HAUSDORFF_TOLERANCE}

    def _check_ratio_bound(self) -> Dict[str, Any]:
        bound = verify_ratio_bound(self.rate, self.config.window)
        return {**bound.to_dict(), "passed": bound.within_declared}

    def _check_gronwall(self) -> Dict[str, Any]:
        cert = self._certificate()
        c = self.spec.constant("c")
        if c is None:
            if self.flow is not None:
                raise ConfigurationError("gronwall check needs a constant 'c' for continuous systems",
                                         condition="constant c declared")
            window = min(self.config.window, LIPSCHITZ_WINDOW)
            c = estimate_lipschitz(self.spec, window, self.config.grid).c_hat
        start = self.linear.start
        span = min(self.config.window, 64)
        indices = np.unique(np.geomspace(max(start, 1), start + span, 8).astype(int))
        pairs = [(int(m), int(n)) for n in indices for m in indices if m != n]
        points = SamplingGrid(min(self.config.grid.radius, 0.5), seed=self.config.grid.seed).ball(
            64, self.spec.dim, offset=42)
        report = gronwall_report(self.nonlinear, self.rate, cert.K, cert.a, c, pairs, points)
        return {**report.to_dict(), "c": c, "K": cert.K, "a": cert.a}

    def _check_conditions(self) -> Dict[str, Any]:
        estimate = scan_spectrum(self.linear, self.rate, **self._scan_options())
        conditions = check_conditions(estimate)
        passed = conditions.one_sided or bool(conditions.gap_ok and conditions.bands_ok)
        return {"spectrum": estimate.to_dict(), "conditions": conditions.to_dict(), "passed": passed}

    # -- dispatch ----------------------------------------------------------

    def execute(self) -> Outcome:
        pipelines = {
            "dichotomy": self.run_dichotomy,
            "spectrum": self.run_spectrum,
            "rescale": self.run_rescale,
            "linearize": self.run_linearize,
            "verify": self.run_verify,
            "flow": self.run_flow,
        }
        outcome = pipelines[self.config.command]()
        outcome.report = {"command": self.config.command, "system": self._system_block(),
                          "provenance": provenance(self.spec.spec_hash, self.config.to_dict()),
                          **outcome.report}
        logging.debug(f"Memo statistics for '{self.spec.name}': {self.linear.memo_stats()}")
        return outcome


def parse_times(text: str) -> List[Tuple[float, float]]:
    """'t,s;t,s' pairs"""
    pairs = []
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        try:
            t, s = (float(v) for v in chunk.split(","))
        except ValueError:
            raise ConfigurationError(f"--times expects 't,s;t,s', got '{text}'",
                                     condition="time pairs") from None
        pairs.append((t, s))
    return pairs


def _emit(outcome: Outcome, config: RunConfig, started: datetime) -> None:
    if config.out_path is None:
        if config.output == "csv":
            render_csv(outcome.kind, outcome.rows, sys.stdout)
        else:
            sys.stdout.write(render_json(outcome.report))
        return
    if config.output == "csv":
        save_as_csv(outcome.kind, outcome.rows, config.out_path)
        save_as_json(outcome.report, os.path.splitext(config.out_path)[0] + ".json")
    else:
        save_as_json(outcome.report, config.out_path)
    write_meta(config.out_path, started)


def run(config: RunConfig) -> int:
    """Run one command; returns the process exit code"""
    started = datetime.now(timezone.utc)
    try:
        outcome = AnalysisController(config).execute()
        _emit(outcome, config, started)
        return EXIT_OK
    except MudichoError as e:
        logging.error(f"{type(e).__name__}: {e.message}")
        error = e.to_dict()
        sys.stdout.write(render_json(error))
        if config.out_path:
            save_as_json(error, config.out_path)
        return e.exit_code
