"""Command-line front end: single runs, replicate sweeps and scheduler simulations.

Usage::

    python -m client.cli run --config exp.json --out results/ [--seed 3]
    python -m client.cli replicate --config exp.json --out results/ --seeds 0 1 2 --jobs 4
    python -m client.cli schedule --config sched.json --out results/ [--seed 3]

Data goes to files under ``--out``; diagnostics go to stderr.
"""

import argparse
import copy
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from jsonschema import Draft202012Validator

from app import AppContext, create_app
from app import crud
from app.designer import RunConfig, RunResult, run_design
from app.exceptions import ConfigInvalid, SimulatorFailure, exit_code_for
from app.outputs import write_job_trace, write_json, write_mad_quantiles, write_run
from app.problems import external_problem, get_problem
from app.scheduler import make_duration_model, simulate_schedule

logger = logging.getLogger("seqcal.cli")

SCHEMA_PATH = Path(__file__).resolve().parents[1] / "app" / "schema" / "experiment.schema.json"

# keys handled here rather than passed to RunConfig
_FRONT_END_KEYS = ("problem", "seeds", "compare", "out", "database", "schedule")


def _validator() -> Draft202012Validator:
    with open(SCHEMA_PATH, encoding="utf-8") as fh:
        return Draft202012Validator(json.load(fh))


def load_config(path) -> Dict[str, Any]:
    """Read and schema-validate an experiment file."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"config {path} is not valid JSON: {exc}") from exc

    errors = sorted(_validator().iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.absolute_path)
        if not where and err.validator == "additionalProperties":
            where = "(root)"
        raise ConfigInvalid(f"{where or '(root)'}: {err.message}", field=where or None)
    return doc


def build_problem(spec):
    if isinstance(spec, str):
        return get_problem(spec)
    if "external" in spec:
        return external_problem(spec["external"])
    return get_problem(spec["name"], **spec.get("options", {}))


def build_run_config(doc: Dict[str, Any], seed: Optional[int] = None,
                     acquisition: Optional[str] = None) -> RunConfig:
    if "problem" not in doc:
        raise ConfigInvalid("problem is required", field="problem")
    options = {k: copy.deepcopy(v) for k, v in doc.items() if k not in _FRONT_END_KEYS}
    if seed is not None:
        options["seed"] = seed
    if acquisition is not None:
        options["acquisition"] = acquisition
    try:
        problem = build_problem(doc["problem"])
    except TypeError as exc:
        raise ConfigInvalid(f"bad problem options: {exc}", field="problem.options") from exc
    return RunConfig(problem=problem, **options)


def config_echo(doc: Dict[str, Any], cfg: RunConfig) -> Dict[str, Any]:
    """The experiment document as actually run (seed and acquisition resolved)."""
    echo = copy.deepcopy(doc)
    echo.pop("seeds", None)
    echo.pop("compare", None)
    echo["seed"] = cfg.seed
    echo["acquisition"] = cfg.acquisition
    return echo


def _record(ctx: AppContext, cfg: RunConfig, result: RunResult) -> Optional[int]:
    if ctx.session_factory is None:
        return None
    session = ctx.session_factory()
    try:
        return crud.record_run(session, cfg, result).id
    finally:
        session.close()


def _execute(doc: Dict[str, Any], out_dir: Path, seed: Optional[int], ctx: AppContext,
             acquisition: Optional[str] = None) -> RunResult:
    cfg = build_run_config(doc, seed, acquisition)
    echo = config_echo(doc, cfg)
    try:
        result = run_design(cfg)
    except SimulatorFailure as exc:
        if exc.partial_result is not None:
            run_id = _record(ctx, cfg, exc.partial_result)
            write_run(out_dir, exc.partial_result, echo, run_id)
            logger.error("run aborted; partial results written to %s", out_dir)
        raise
    run_id = _record(ctx, cfg, result)
    write_run(out_dir, result, echo, run_id)
    logger.info("run finished: acquisition=%s seed=%d final MAD=%s -> %s",
                cfg.acquisition, cfg.seed, result.final_mad, out_dir)
    return result


def _context(doc: Dict[str, Any], ctx: Optional[AppContext]) -> AppContext:
    if ctx is not None:
        return ctx
    overrides = {"DATABASE_URL": doc["database"]} if doc.get("database") else None
    return create_app(overrides)


def _out_dir(doc: Dict[str, Any], out: Optional[str]) -> Path:
    return Path(out or doc.get("out") or "results")


def cmd_run(config_path, out_dir=None, seed: Optional[int] = None,
            ctx: Optional[AppContext] = None) -> int:
    doc = load_config(config_path)
    ctx = _context(doc, ctx)
    _execute(doc, _out_dir(doc, out_dir), seed, ctx)
    return 0


def cmd_replicate(config_path, seeds: Optional[Sequence[int]] = None, out_dir=None,
                  jobs: Optional[int] = None, ctx: Optional[AppContext] = None) -> int:
    """Run every (acquisition, seed) pair and aggregate MAD quantiles per acquisition kind."""
    doc = load_config(config_path)
    ctx = _context(doc, ctx)
    seeds = list(seeds if seeds is not None else doc.get("seeds", [doc.get("seed", 0)]))
    kinds = list(doc.get("compare") or [doc.get("acquisition", "eivar")])
    root = _out_dir(doc, out_dir)
    jobs = max(1, int(jobs or ctx.config.JOBS))

    # fail on a bad config before spawning anything
    for kind in kinds:
        build_run_config(doc, seeds[0], kind)

    tasks = [(kind, s) for kind in kinds for s in seeds]

    def one(task):
        kind, s = task
        return _execute(doc, root / kind / f"seed_{s}", s, ctx, acquisition=kind)

    logger.info("replicating %d runs (%d kinds x %d seeds) on %d threads",
                len(tasks), len(kinds), len(seeds), jobs)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(one, tasks))

    traces: Dict[str, List[list]] = {kind: [] for kind in kinds}
    for (kind, _), result in zip(tasks, results):
        traces[kind].append(result.mad_trace)
    write_mad_quantiles(root / "mad_quantiles.csv", traces)
    return 0


def cmd_schedule(config_path, out_dir=None, seed: Optional[int] = None,
                 ctx: Optional[AppContext] = None) -> int:
    """Simulate the configured procedure and its synchronous counterpart without an emulator."""
    doc = load_config(config_path)
    _context(doc, ctx)
    spec = doc.get("schedule")
    if spec is None:
        raise ConfigInvalid("schedule section is required", field="schedule")
    k, c, a = spec["workers"], spec["trigger"], spec["per_trigger"]
    if c > k:
        raise ConfigInvalid("trigger must satisfy 1 <= trigger <= workers", field="schedule.trigger")
    seed = seed if seed is not None else doc.get("seed", 0)
    acq = float(spec.get("acquisition_duration", 0.0))
    root = _out_dir(doc, out_dir)

    def simulate(trigger, per_trigger):
        return simulate_schedule(k, trigger, per_trigger, spec["n0"], spec["n"],
                                 make_duration_model(spec["duration"], seed=seed), acq)

    configured = simulate(c, a)
    sync = simulate(k, k)
    write_job_trace(root / "jobs_trace.csv", configured)
    write_job_trace(root / "jobs_trace_sync.csv", sync)

    def summary(trace):
        gens = trace.generations()
        return {"makespan": trace.makespan, "idle_time": trace.idle_time(k),
                "generations": len([g for g in gens if g > 0]),
                "generation_jobs": {str(g): ids for g, ids in sorted(gens.items())}}

    write_json(root / "schedule_summary.json", {
        "workers": k, "trigger": c, "per_trigger": a,
        "configured": summary(configured), "sync": summary(sync),
    })
    logger.info("schedule: makespan %.4g (sync %.4g), idle %.4g (sync %.4g)",
                configured.makespan, sync.makespan, configured.idle_time(k), sync.idle_time(k))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqcal", description="Sequential Bayesian calibration experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one experiment")
    rep = sub.add_parser("replicate", help="execute an experiment over several seeds")
    sched = sub.add_parser("schedule", help="simulate the job schedule without an emulator")
    for p in (run, rep, sched):
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", default=None, help="output directory")
    for p in (run, sched):
        p.add_argument("--seed", type=int, default=None, help="override the seed in the file")
    rep.add_argument("--seeds", type=int, nargs="+", default=None, help="replicate seeds")
    rep.add_argument("--jobs", type=int, default=None, help="concurrent replicates")
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed)
        if args.command == "replicate":
            return cmd_replicate(args.config, args.seeds, args.out, args.jobs)
        return cmd_schedule(args.config, args.out, args.seed)
    except Exception as exc:
        return exit_code_for(exc)


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
