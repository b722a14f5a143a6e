"""CSV and JSON artifacts written by the command-line front end."""

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence

import numpy as np

from .scheduler import JobTrace

logger = logging.getLogger(__name__)

JOB_COLUMNS = ["job_id", "worker_id", "generation_id", "submit", "start", "end", "status"]
MAD_COLUMNS = ["eval_index", "mad"]
BEST_COLUMNS = ["eval_index", "best_rmse", "end_time"]
QUANTILE_COLUMNS = ["eval_index", "acquisition", "q05", "median", "q95"]


def _num(value) -> str:
    if value is None:
        return ""
    value = float(value)
    return "" if math.isnan(value) else repr(value)


def _write_rows(path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    logger.debug("wrote %s", path)
    return path


def acquisition_columns(p: int, d: int) -> List[str]:
    return (["stage"] + [f"theta_{i}" for i in range(1, p + 1)]
            + [f"eta_{i}" for i in range(1, d + 1)] + ["score", "t_start", "t_end"])


def write_acquisitions(path: Path, result) -> Path:
    """Initial design (stage 0) followed by the acquired parameters in completion order."""
    problem = result.config.problem
    columns = acquisition_columns(problem.p, problem.d)

    def rows():
        for rec in list(result.initial) + list(result.acquisitions):
            row = {"stage": rec.stage, "score": _num(rec.score),
                   "t_start": _num(rec.t_start), "t_end": _num(rec.t_end)}
            row.update({f"theta_{i}": _num(v) for i, v in enumerate(rec.theta, start=1)})
            row.update({f"eta_{i}": _num(v) for i, v in enumerate(rec.eta, start=1)})
            yield row

    return _write_rows(Path(path), columns, rows())


def write_mad_trace(path: Path, result) -> Path:
    return _write_rows(Path(path), MAD_COLUMNS,
                       ({"eval_index": i, "mad": _num(v)} for i, v in result.mad_trace))


def write_best_trace(path: Path, result) -> Path:
    return _write_rows(Path(path), BEST_COLUMNS,
                       ({"eval_index": i, "best_rmse": _num(v), "end_time": _num(t)}
                        for i, v, t in result.best_residual_trace))


def write_job_trace(path: Path, trace: JobTrace) -> Path:
    def rows():
        for row in trace.rows():
            yield {k: (_num(v) if k in ("submit", "start", "end") else ("" if v is None else v))
                   for k, v in row.items()}

    return _write_rows(Path(path), JOB_COLUMNS, rows())


def write_json(path: Path, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def summary_payload(result, config_echo: Dict[str, Any], run_id=None) -> Dict[str, Any]:
    best = result.best_residual_trace[-1][1] if result.best_residual_trace else None
    return {
        "final_mad": result.final_mad,
        "wall_time": result.wall_time,
        "seed": result.config.seed,
        "config": config_echo,
        "acquired": len(result.acquisitions),
        "failures": result.failures,
        "stopped_early": result.stopped_early,
        "aborted": result.aborted,
        "best_rmse": best,
        "makespan": result.job_trace.makespan,
        "run_id": run_id,
    }


def write_run(out_dir: Path, result, config_echo: Dict[str, Any], run_id=None) -> Dict[str, Path]:
    """Write every per-run artifact into ``out_dir``."""
    out_dir = Path(out_dir)
    return {
        "acquisitions": write_acquisitions(out_dir / "acquisitions.csv", result),
        "mad_trace": write_mad_trace(out_dir / "mad_trace.csv", result),
        "jobs_trace": write_job_trace(out_dir / "jobs_trace.csv", result.job_trace),
        "best_trace": write_best_trace(out_dir / "best_trace.csv", result),
        "summary": write_json(out_dir / "summary.json", summary_payload(result, config_echo, run_id)),
    }


def mad_quantiles(traces: Dict[str, List[List[tuple]]]) -> List[Dict[str, Any]]:
    """Per acquisition kind and eval index: 5%, 50% and 95% quantiles across replicates."""
    rows = []
    for kind, per_seed in traces.items():
        by_index: Dict[int, List[float]] = {}
        for trace in per_seed:
            for index, value in trace:
                by_index.setdefault(int(index), []).append(float(value))
        for index in sorted(by_index):
            q05, med, q95 = np.quantile(by_index[index], [0.05, 0.5, 0.95])
            rows.append({"eval_index": index, "acquisition": kind,
                         "q05": _num(q05), "median": _num(med), "q95": _num(q95)})
    return rows


def write_mad_quantiles(path: Path, traces: Dict[str, List[List[tuple]]]) -> Path:
    return _write_rows(Path(path), QUANTILE_COLUMNS, mad_quantiles(traces))
