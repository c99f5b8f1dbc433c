# export/report_exporter.py
"""
JSON and CSV report writers

JSON reports are written with sorted keys so identical runs produce identical
bytes; wall-clock data goes to a `<out>.meta.json` side file instead.
"""

import csv
import json
import logging
import math
import platform
import sys
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

REPORT_SCHEMA_VERSION = "1"

# Frozen CSV layouts (documented in docs/formats.md); matrix and state
# columns are appended per dimension.
CSV_COLUMNS = {
    "dichotomy": ["n", "m", "x", "y_stable", "y_unstable", "y_forward", "y_backward"],
    "spectrum": ["tau", "verdict", "lambda_fit", "a_fit"],
    "rescale": ["n", "k_n", "k_next"],
    "linearize": ["k", "residual"],
    "flow": ["n"],
}


def to_plain(value: Any) -> Any:
    """numpy and tuple values to JSON-native ones; non-finite floats become strings"""
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_plain(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


def render_json(report: Dict[str, Any]) -> str:
    return json.dumps(to_plain(report), indent=2, sort_keys=True) + "\n"


def save_as_json(report: Dict[str, Any], output_path: str) -> None:
    with open(output_path, "w", encoding="utf-8") as f:
        f.write(render_json(report))
    logging.info(f"Wrote JSON report {output_path}")


def csv_fieldnames(kind: str, rows: Sequence[Dict[str, Any]]) -> List[str]:
    """Frozen leading columns, then any per-dimension columns in first-row order"""
    fixed = list(CSV_COLUMNS.get(kind, []))
    if not rows:
        return fixed
    extra = [key for key in rows[0] if key not in fixed]
    if kind == "linearize":
        return ["k"] + extra + ["residual"]
    return fixed + extra


def render_csv(kind: str, rows: Sequence[Dict[str, Any]], stream) -> None:
    writer = csv.DictWriter(stream, fieldnames=csv_fieldnames(kind, rows), lineterminator="\n",
                            extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({key: _cell(value) for key, value in row.items()})


def save_as_csv(kind: str, rows: Sequence[Dict[str, Any]], output_path: str) -> None:
    with open(output_path, "w", newline="", encoding="utf-8") as f:
        render_csv(kind, rows, f)
    logging.info(f"Wrote {len(rows)} CSV rows to {output_path}")


def _cell(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    return to_plain(value)


def provenance(spec_hash: str, config: Dict[str, Any], versions: Optional[Dict[str, str]] = None) -> Dict[str, Any]:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "spec_hash": spec_hash,
        "config": config,
        "versions": versions if versions is not None else package_versions(),
    }


def package_versions() -> Dict[str, str]:
    import scipy
    from core import __version__

    return {"mudicho": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_meta(output_path: str, started: datetime, extra: Optional[Dict[str, Any]] = None) -> str:
    """Timestamps for a report, kept out of the report itself"""
    finished = datetime.now(timezone.utc)
    meta = {
        "report": output_path,
        "started": started.isoformat(),
        "finished": finished.isoformat(),
        "elapsed_seconds": (finished - started).total_seconds(),
        "argv": list(sys.argv),
    }
    meta.update(extra or {})
    path = output_path + ".meta.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_plain(meta), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def flatten_matrix(prefix: str, matrix: Iterable[Iterable[float]]) -> Dict[str, float]:
    return {f"{prefix}{i + 1}{j + 1}": float(value)
            for i, row in enumerate(matrix) for j, value in enumerate(row)}
