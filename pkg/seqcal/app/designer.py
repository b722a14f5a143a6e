"""Sequential, batch-synchronous and asynchronous design drivers.

All three drivers share one loop over a :class:`~app.scheduler.WorkerPool`:

* sequential: one worker, refit and acquire after every completion;
* batch: the whole initial design and every stage of ``b`` jobs complete
  before the emulator is refitted and ``b`` new parameters are acquired;
* async: ``k`` workers, every ``c`` completions trigger a refit and ``a``
  new parameters are dispatched immediately.

Within a trigger, parameters still pending are folded into the emulator
with believer (or liar) updates before each selection.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import qmc

from .acquisition import KINDS, AcquisitionContext, select
from .emulator import Dataset, PcgpEmulator, emu_believe, emu_fit, emu_liar, emu_predict
from .exceptions import ConfigInvalid, LengthMismatch, SimulatorFailure
from .posterior import Bounds, ObsModel, fit_ancillary, post_mean_var
from .problems import Problem
from .scheduler import FAILED, Job, JobTrace, WorkerPool, make_duration_model

logger = logging.getLogger(__name__)

MODES = ("sequential", "batch", "async")
STRATEGIES = ("believer", "liar-mean", "liar-min", "liar-max")


@dataclass
class RunConfig:
    problem: Problem
    acquisition: str = "eivar"
    mode: str = "sequential"
    n0: int = 10
    n: int = 0
    batch: int = 1
    workers: Optional[int] = None
    trigger: Optional[int] = None
    per_trigger: Optional[int] = None
    candidate_size: int = 100
    reference_grid: int = 50
    reference_size: int = 10_000
    seed: int = 0
    strategy: str = "believer"
    stopping: Dict[str, Any] = field(default_factory=lambda: {"rule": "count"})
    max_failures: int = 3
    duration: Optional[Dict[str, Any]] = None
    acquisition_duration: float = 0.0
    pool_mode: str = "simulated"
    keep_states: bool = False
    discrepancy: Optional[Dict[str, Any]] = None
    q: Optional[int] = None
    gamma: float = 0.995
    fit_workers: int = 1

    def __post_init__(self):
        self.acquisition = self.acquisition.lower()
        if self.acquisition not in KINDS:
            raise ConfigInvalid(f"acquisition must be one of {KINDS}", field="acquisition")
        if self.mode not in MODES:
            raise ConfigInvalid(f"mode must be one of {MODES}", field="mode")
        if self.n0 < 2:
            raise ConfigInvalid("n0 must be at least 2", field="n0")
        if self.n < 0:
            raise ConfigInvalid("n must be non-negative", field="n")
        if self.batch < 1:
            raise ConfigInvalid("batch must be at least 1", field="batch")
        if self.mode == "batch" and self.n % self.batch:
            raise ConfigInvalid(f"n={self.n} is not divisible by batch={self.batch}", field="batch")
        if self.mode == "async":
            k, c, a = self.workers, self.trigger, self.per_trigger
            if k is None or k < 1:
                raise ConfigInvalid("async mode needs workers >= 1", field="workers")
            if c is None or not 1 <= c <= k:
                raise ConfigInvalid("trigger must satisfy 1 <= trigger <= workers", field="trigger")
            if a is None or a < 1:
                raise ConfigInvalid("per_trigger must be at least 1", field="per_trigger")
        if self.strategy not in STRATEGIES:
            raise ConfigInvalid(f"strategy must be one of {STRATEGIES}", field="strategy")
        if self.candidate_size < 1:
            raise ConfigInvalid("candidate_size must be positive", field="candidate_size")
        rule = self.stopping.get("rule", "count")
        if rule not in ("count", "mad"):
            raise ConfigInvalid("stopping rule must be 'count' or 'mad'", field="stopping.rule")
        if rule == "mad":
            if "threshold" not in self.stopping:
                raise ConfigInvalid("the mad stopping rule needs a threshold", field="stopping.threshold")
            if not self.problem.analytic:
                raise ConfigInvalid("the mad stopping rule needs a problem with analytic truth",
                                    field="stopping.rule")
        if self.acquisition == "imse" and self.problem.d != 1:
            raise ConfigInvalid("imse needs a scalar-output problem", field="acquisition")
        if self.discrepancy is not None and self.problem.design_points is None:
            raise ConfigInvalid(f"problem {self.problem.name!r} has no design points", field="discrepancy")
        if self.pool_mode not in ("simulated", "real"):
            raise ConfigInvalid("pool_mode must be 'simulated' or 'real'", field="pool_mode")

    def describe(self) -> Dict[str, Any]:
        out = {k: v for k, v in self.__dict__.items() if k != "problem"}
        out["problem"] = self.problem.name
        return out


@dataclass(frozen=True)
class AcquisitionRecord:
    stage: int
    generation: int
    job_id: int
    theta: np.ndarray
    eta: np.ndarray
    score: float
    t_start: float
    t_end: float


@dataclass
class RunResult:
    config: RunConfig
    initial: List[AcquisitionRecord] = field(default_factory=list)
    acquisitions: List[AcquisitionRecord] = field(default_factory=list)
    mad_trace: List[Tuple[int, float]] = field(default_factory=list)
    best_residual_trace: List[Tuple[int, float, float]] = field(default_factory=list)
    job_trace: JobTrace = field(default_factory=JobTrace)
    failures: int = 0
    stopped_early: bool = False
    aborted: bool = False
    states: List[Tuple[int, PcgpEmulator, ObsModel]] = field(default_factory=list)
    budget_log: List[Tuple[int, int, int]] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def final_mad(self) -> Optional[float]:
        return self.mad_trace[-1][1] if self.mad_trace else None

    @property
    def thetas(self) -> np.ndarray:
        if not self.acquisitions:
            return np.empty((0, self.config.problem.p))
        return np.vstack([r.theta for r in self.acquisitions])


def mad(reference_truth, estimate) -> float:
    """Mean absolute difference between true and estimated posterior values."""
    truth = np.ravel(np.asarray(reference_truth, dtype=float))
    est = np.ravel(np.asarray(estimate, dtype=float))
    if truth.shape != est.shape:
        raise LengthMismatch(f"{truth.shape[0]} reference values but {est.shape[0]} estimates")
    return float(np.mean(np.abs(truth - est)))


def make_initial_design(bounds: Bounds, n0: int, seed=None) -> np.ndarray:
    """Latin hypercube design of ``n0`` points inside ``bounds``."""
    sampler = qmc.LatinHypercube(d=bounds.dim, seed=np.random.default_rng(seed))
    return bounds.from_unit(sampler.random(n0))


def make_reference(bounds: Bounds, grid: int = 50, size: int = 10_000, seed=0) -> np.ndarray:
    """Regular ``grid x grid`` lattice for two parameters, a Latin hypercube otherwise."""
    if bounds.dim == 2:
        axes = [np.linspace(lo, hi, grid) for lo, hi in zip(bounds.lower, bounds.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])
    return make_initial_design(bounds, size, seed)


def make_candidates(bounds: Bounds, size: int, rng: np.random.Generator) -> np.ndarray:
    return bounds.from_unit(rng.random((size, bounds.dim)))


def estimated_posterior(emu: PcgpEmulator, obs: ObsModel, prior, thetas) -> np.ndarray:
    return post_mean_var(emu_predict(emu, thetas), obs, prior.density(thetas)).mean


class _Driver:
    def __init__(self, cfg: RunConfig, k: int, trigger: int, per_trigger: int, drain_initial: bool):
        self.cfg = cfg
        self.problem = cfg.problem
        self.k, self.trigger, self.per_trigger = k, trigger, per_trigger
        self.drain_initial = drain_initial

        design_ss, cand_ss, fit_ss, dur_ss, select_ss, holdout_ss = np.random.SeedSequence(cfg.seed).spawn(6)
        self.design_ss = design_ss
        self.fit_ss = fit_ss
        self.cand_rng = np.random.default_rng(cand_ss)
        self.select_rng = np.random.default_rng(select_ss)

        bounds = self.problem.bounds
        self.reference = make_reference(bounds, cfg.reference_grid, cfg.reference_size)
        self.truth = self.problem.true_posterior(self.reference) if self.problem.analytic else None
        self.holdout = self.holdout_truth = None
        if cfg.stopping.get("rule") == "mad":
            self.holdout = make_initial_design(bounds, int(cfg.stopping.get("holdout_size", 500)), holdout_ss)
            self.holdout_truth = self.problem.true_posterior(self.holdout)

        duration = make_duration_model(cfg.duration or self.problem.duration, seed=dur_ss)
        self.pool = WorkerPool(k, self.problem.evaluate, mode=cfg.pool_mode, duration_model=duration,
                               acquisition_duration=cfg.acquisition_duration)

        self.params: List[np.ndarray] = []
        self.outputs: List[np.ndarray] = []
        self.pending: Dict[int, np.ndarray] = {}
        self.meta: Dict[int, Tuple[int, float]] = {}
        self.remaining = cfg.n
        self.best = math.inf
        self.result = RunResult(cfg)

    # bookkeeping

    def _log_budget(self) -> None:
        self.result.budget_log.append((len(self.params), len(self.pending), self.remaining))

    def _submit(self, theta: np.ndarray, generation: int, stage: int, score: float) -> Job:
        job = self.pool.submit(theta, generation)
        self.pending[job.id] = np.asarray(theta, dtype=float)
        self.meta[job.id] = (stage, score)
        self._log_budget()
        return job

    def _collect(self, count: int) -> None:
        for job in self.pool.await_completions(count):
            theta = self.pending.pop(job.id)
            stage, score = self.meta[job.id]
            if job.status == FAILED:
                self.result.failures += 1
                self.remaining += 1
                self._log_budget()
                logger.warning("job %d failed (%d so far); parameter dropped", job.id, self.result.failures)
                if self.result.failures > self.cfg.max_failures:
                    self._finish(aborted=True)
                    raise SimulatorFailure(
                        f"{self.result.failures} simulator failures exceed max_failures={self.cfg.max_failures}: "
                        f"{job.error}",
                        partial_result=self.result,
                    )
                continue

            eta = np.asarray(job.result, dtype=float)
            self.params.append(theta)
            self.outputs.append(eta)
            record = AcquisitionRecord(stage, job.generation_id, job.id, theta, eta, score,
                                       float(job.start_time), float(job.end_time))
            (self.result.acquisitions if stage > 0 else self.result.initial).append(record)

            rmse = float(np.sqrt(np.mean((self.problem.obs.data - eta) ** 2)))
            self.best = min(self.best, rmse)
            self.result.best_residual_trace.append((len(self.params), self.best, float(job.end_time)))
            self._log_budget()

    # modelling

    def _observation_model(self, data: Dataset, emu: PcgpEmulator) -> ObsModel:
        if self.cfg.discrepancy is None:
            return self.problem.obs
        opts = self.cfg.discrepancy
        anc, _ = fit_ancillary(data, emu, self.problem.obs.data, self.problem.design_points,
                               self.problem.bounds, seed=self.fit_ss.spawn(1)[0],
                               anc_bounds=opts.get("bounds"), fix_sigma_b=bool(opts.get("fix_sigma_b", False)),
                               n_starts=int(opts.get("starts", 4)))
        return ObsModel(self.problem.obs.data, anc.cov())

    def _refit(self) -> Optional[Tuple[PcgpEmulator, ObsModel]]:
        if len(self.params) < 2:
            return None
        data = Dataset(np.vstack(self.params), np.vstack(self.outputs))
        emu = emu_fit(data, q=self.cfg.q, gamma=self.cfg.gamma, seed=self.fit_ss.spawn(1)[0],
                      workers=self.cfg.fit_workers)
        obs = self._observation_model(data, emu)
        index = len(self.result.acquisitions)
        if self.truth is not None:
            value = mad(self.truth, estimated_posterior(emu, obs, self.problem.prior, self.reference))
            if self.result.mad_trace and self.result.mad_trace[-1][0] == index:
                self.result.mad_trace[-1] = (index, value)
            else:
                self.result.mad_trace.append((index, value))
            logger.info("refit after %d acquisitions: q=%d MAD=%.6g", index, emu.q, value)
        else:
            logger.info("refit after %d acquisitions: q=%d", index, emu.q)
        if self.cfg.keep_states:
            self.result.states.append((index, emu, obs))
        return emu, obs

    def _holdout_reached(self, emu: PcgpEmulator, obs: ObsModel) -> bool:
        if self.holdout is None:
            return False
        value = mad(self.holdout_truth, estimated_posterior(emu, obs, self.problem.prior, self.holdout))
        logger.debug("holdout MAD %.6g (threshold %.6g)", value, self.cfg.stopping["threshold"])
        return value <= float(self.cfg.stopping["threshold"])

    def _augment(self, emu: PcgpEmulator, theta: np.ndarray) -> PcgpEmulator:
        strategy = self.cfg.strategy
        if strategy == "believer":
            return emu_believe(emu, theta)
        outputs = np.vstack(self.outputs)
        lie = {"liar-mean": outputs.mean, "liar-min": outputs.min, "liar-max": outputs.max}[strategy](axis=0)
        return emu_liar(emu, theta, lie)

    def _acquire(self, count: int, generation: int, fitted) -> None:
        candidates = make_candidates(self.problem.bounds, self.cfg.candidate_size, self.cand_rng)
        kind = self.cfg.acquisition
        if fitted is None and kind != "rnd":
            logger.warning("only %d completed evaluations at generation %d; acquiring at random",
                           len(self.params), generation)
        history = None
        emu = obs = None
        if fitted is not None and kind != "rnd":
            emu, obs = fitted
            history = Dataset(np.vstack(self.params), np.vstack(self.outputs),
                              tuple(self.pending.values()))
            for theta in self.pending.values():
                emu = self._augment(emu, theta)

        chosen: List[int] = []
        for i in range(count):
            if emu is None:
                allowed = np.setdiff1d(np.arange(candidates.shape[0]), chosen)
                idx, score = int(allowed[self.select_rng.integers(allowed.size)]), 0.0
            else:
                ctx = AcquisitionContext(emu, obs, self.problem.prior, candidates, self.reference,
                                         history, seed=int(self.select_rng.integers(2 ** 31)))
                idx, score = select(ctx, kind, rng=self.select_rng, exclude=chosen)
            chosen.append(idx)
            theta = candidates[idx].copy()
            self.remaining -= 1
            self._submit(theta, generation, generation, score)
            logger.info("generation %d: acquired %s (%s score %.6g)", generation,
                        np.array2string(theta, precision=4), kind, score)
            if emu is not None and i + 1 < count:
                history = history.with_pending(theta)
                emu = self._augment(emu, theta)

    # main loop

    def run(self) -> RunResult:
        t0 = time.perf_counter()
        try:
            for theta in make_initial_design(self.problem.bounds, self.cfg.n0, self.design_ss):
                self._submit(theta, 0, 0, math.nan)
            if self.drain_initial:
                self._collect(self.pool.outstanding)

            generation = 0
            first = True
            while True:
                if not (self.drain_initial and first) and self.pool.outstanding:
                    self._collect(min(self.trigger, self.pool.outstanding))
                first = False
                if self.remaining <= 0 or self.result.stopped_early:
                    if self.pool.outstanding:
                        continue
                    break
                fitted = self._refit()
                if fitted is not None and self._holdout_reached(*fitted):
                    self.result.stopped_early = True
                    logger.info("holdout MAD threshold reached after %d acquisitions",
                                len(self.result.acquisitions))
                    continue
                generation += 1
                self._acquire(min(self.per_trigger, self.remaining), generation, fitted)
            self._refit()
        finally:
            self.pool.close()
            self.result.wall_time = time.perf_counter() - t0
        return self._finish()

    def _finish(self, aborted: bool = False) -> RunResult:
        self.result.aborted = aborted
        self.result.job_trace = self.pool.trace()
        return self.result


def run_sequential(cfg: RunConfig) -> RunResult:
    """One acquisition per stage: refit, select, evaluate, repeat ``n`` times."""
    if cfg.batch != 1:
        raise ConfigInvalid("sequential runs need batch=1", field="batch")
    logger.info("sequential run: problem=%s acquisition=%s n0=%d n=%d seed=%d",
                cfg.problem.name, cfg.acquisition, cfg.n0, cfg.n, cfg.seed)
    return _Driver(cfg, k=1, trigger=1, per_trigger=1, drain_initial=True).run()


def run_batch(cfg: RunConfig) -> RunResult:
    """Synchronous batches of ``cfg.batch`` parameters per stage."""
    b = cfg.batch
    if b < 2:
        raise ConfigInvalid("batch runs need batch >= 2", field="batch")
    if cfg.n % b:
        raise ConfigInvalid(f"n={cfg.n} is not divisible by batch={b}", field="batch")
    logger.info("batch run: problem=%s acquisition=%s b=%d n0=%d n=%d seed=%d",
                cfg.problem.name, cfg.acquisition, b, cfg.n0, cfg.n, cfg.seed)
    return _Driver(cfg, k=cfg.workers or b, trigger=b, per_trigger=b, drain_initial=True).run()


def run_async(cfg: RunConfig) -> RunResult:
    """k workers; every ``trigger`` completions acquire ``per_trigger`` new parameters."""
    for name in ("workers", "trigger", "per_trigger"):
        if getattr(cfg, name) is None:
            raise ConfigInvalid(f"async runs need {name}", field=name)
    if not 1 <= cfg.trigger <= cfg.workers:
        raise ConfigInvalid("trigger must satisfy 1 <= trigger <= workers", field="trigger")
    logger.info("async run: problem=%s acquisition=%s k=%d c=%d a=%d n0=%d n=%d seed=%d",
                cfg.problem.name, cfg.acquisition, cfg.workers, cfg.trigger, cfg.per_trigger,
                cfg.n0, cfg.n, cfg.seed)
    return _Driver(cfg, k=cfg.workers, trigger=cfg.trigger, per_trigger=cfg.per_trigger,
                   drain_initial=False).run()


def run_design(cfg: RunConfig) -> RunResult:
    if cfg.mode == "batch":
        return run_batch(cfg)
    if cfg.mode == "async":
        return run_async(cfg)
    return run_sequential(cfg)
