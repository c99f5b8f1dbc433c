# session.py
"""
Run configuration shared by the command line and the controller
"""

import argparse
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from core.dichotomy import (DEFAULT_GAP_FACTOR, DEFAULT_K_CAP, DEFAULT_LAMBDA_MIN,
                            DEFAULT_WINDOW)
from core.errors import ConfigurationError
from core.evolution import DEFAULT_COND_CAP, DEFAULT_RK4_STEP
from core.linearize import DEFAULT_TAIL_EPS
from core.sampling import SamplingGrid
from core.spectrum import DEFAULT_DTAU, DEFAULT_REFINE, DEFAULT_TAU_MAX, DEFAULT_TAU_MIN

COMMANDS = ("dichotomy", "spectrum", "rescale", "linearize", "verify", "flow")
CHECKS = ("rescale-identity", "fn-series", "equivalence", "ratio-bound", "gronwall", "conditions")
OUTPUTS = ("json", "csv")


@dataclass
class RunConfig:
    command: str
    spec_path: str
    window: int = DEFAULT_WINDOW
    tau_min: float = DEFAULT_TAU_MIN
    tau_max: float = DEFAULT_TAU_MAX
    dtau: float = DEFAULT_DTAU
    refine: float = DEFAULT_REFINE
    tol: float = 1e-6
    grid: SamplingGrid = field(default_factory=SamplingGrid)
    output: str = "json"
    out_path: Optional[str] = None
    parallel: Optional[int] = None
    rate: Optional[str] = None
    constants: Dict[str, float] = field(default_factory=dict)
    check: Optional[str] = None
    qr_accumulate: bool = False
    tail_eps: float = DEFAULT_TAIL_EPS
    k_max: Optional[int] = None
    step: float = DEFAULT_RK4_STEP
    lambda_min: float = DEFAULT_LAMBDA_MIN
    k_cap: float = DEFAULT_K_CAP
    gap_factor: float = DEFAULT_GAP_FACTOR
    cond_cap: float = DEFAULT_COND_CAP
    samples: int = 500
    times: Optional[str] = None

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigurationError(f"unknown command '{self.command}'", condition="known subcommand")
        if self.output not in OUTPUTS:
            raise ConfigurationError(f"output must be json or csv, got '{self.output}'",
                                     condition="output in {json, csv}")
        if self.command == "verify" and self.check not in CHECKS:
            raise ConfigurationError(f"verify needs --check one of {', '.join(CHECKS)}",
                                     condition="known verify check")
        if self.window < 1:
            raise ConfigurationError(f"window must be positive, got {self.window}", condition="window >= 1")
        if self.parallel is not None and self.parallel < 1:
            raise ConfigurationError(f"--parallel must be >= 1, got {self.parallel}", condition="workers >= 1")

    @property
    def effective_k_max(self) -> int:
        return self.k_max if self.k_max is not None else 10 * self.window

    @property
    def fit_options(self) -> Dict[str, Any]:
        return {"lambda_min": self.lambda_min, "k_cap": self.k_cap, "qr": self.qr_accumulate}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "spec_path": self.spec_path,
            "window": self.window,
            "tau_min": self.tau_min,
            "tau_max": self.tau_max,
            "dtau": self.dtau,
            "refine": self.refine,
            "tol": self.tol,
            "grid": self.grid.to_dict(),
            "output": self.output,
            "out_path": self.out_path,
            "parallel": self.parallel,
            "rate": self.rate,
            "constants": dict(sorted(self.constants.items())),
            "check": self.check,
            "qr_accumulate": self.qr_accumulate,
            "tail_eps": self.tail_eps,
            "k_max": self.k_max,
            "step": self.step,
            "lambda_min": self.lambda_min,
            "k_cap": self.k_cap,
            "gap_factor": self.gap_factor,
            "cond_cap": self.cond_cap,
            "samples": self.samples,
            "times": self.times,
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "RunConfig":
        values = dict(data)
        values["grid"] = SamplingGrid.from_dict(values.get("grid", {}))
        values["constants"] = {k: float(v) for k, v in values.get("constants", {}).items()}
        return RunConfig(**values)

    @staticmethod
    def from_args(args: argparse.Namespace) -> "RunConfig":
        constants = {}
        for name in ("c", "eta"):
            value = getattr(args, name, None)
            if value is not None:
                constants[name] = value
        for item in getattr(args, "const", None) or []:
            name, _, value = item.partition("=")
            try:
                constants[name.strip()] = float(value)
            except ValueError:
                raise ConfigurationError(f"--const expects NAME=VALUE, got '{item}'",
                                         condition="numeric constant override") from None
        return RunConfig(
            command=args.command,
            spec_path=args.spec,
            window=args.window,
            tau_min=args.tau_min,
            tau_max=args.tau_max,
            dtau=args.dtau,
            refine=args.refine,
            tol=args.tol,
            grid=SamplingGrid(radius=args.radius, points_per_axis=args.points_per_axis, seed=args.seed),
            output=args.output,
            out_path=args.out,
            parallel=args.parallel,
            rate=args.rate,
            constants=constants,
            check=getattr(args, "check", None),
            qr_accumulate=args.qr_accumulate,
            tail_eps=args.tail_eps,
            k_max=args.k_max,
            step=args.step,
            lambda_min=args.lambda_min,
            k_cap=args.k_cap,
            gap_factor=args.gap_factor,
            cond_cap=args.cond_cap,
            samples=args.samples,
            times=getattr(args, "times", None),
        )
