"""Manager-worker execution of simulation jobs.

Two modes share one interface:

* ``simulated``: a deterministic discrete-event clock.  Each job's duration
  comes from a duration model and its result from calling ``evaluate`` at
  dispatch.  Completions are ordered by (end time, job id).
* ``real``: jobs run on a thread pool and report back through a completion
  queue; timestamps are wall-clock seconds since the pool opened.

Dispatch is FIFO and a queued job goes to the lowest-numbered idle worker.
"""

import heapq
import logging
import queue
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .exceptions import Deadlock, PoolClosed, SchedulerError, SimulatorFailure

logger = logging.getLogger(__name__)

PENDING, RUNNING, DONE, FAILED = "pending", "running", "done", "failed"


@dataclass
class Job:
    id: int
    theta: np.ndarray
    generation_id: int
    submit_time: float
    start_time: Optional[float] = None
    end_time: Optional[float] = None
    worker_id: Optional[int] = None
    status: str = PENDING
    result: Any = None
    error: Optional[str] = None

    def to_row(self) -> Dict[str, Any]:
        return {
            "job_id": self.id,
            "worker_id": self.worker_id,
            "generation_id": self.generation_id,
            "submit": self.submit_time,
            "start": self.start_time,
            "end": self.end_time,
            "status": self.status,
        }


@dataclass(frozen=True)
class JobTrace:
    jobs: tuple = ()

    def rows(self) -> List[Dict[str, Any]]:
        return [j.to_row() for j in self.jobs]

    def __len__(self) -> int:
        return len(self.jobs)

    @property
    def makespan(self) -> float:
        ends = [j.end_time for j in self.jobs if j.end_time is not None]
        return float(max(ends)) if ends else 0.0

    def generations(self) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = {}
        for j in self.jobs:
            out.setdefault(j.generation_id, []).append(j.id)
        return out

    def worker_intervals(self) -> Dict[int, List[tuple]]:
        out: Dict[int, List[tuple]] = {}
        for j in self.jobs:
            if j.worker_id is not None and j.end_time is not None:
                out.setdefault(j.worker_id, []).append((j.start_time, j.end_time, j.id))
        for intervals in out.values():
            intervals.sort()
        return out

    def idle_time(self, k: int) -> float:
        """Total worker time not spent running jobs between 0 and the makespan."""
        busy = sum(j.end_time - j.start_time for j in self.jobs if j.end_time is not None)
        return float(k * self.makespan - busy)


class ConstantDuration:
    def __init__(self, value: float = 1.0):
        if value < 0:
            raise ValueError("duration must be non-negative")
        self.value = float(value)

    def __call__(self, job: Job) -> float:
        return self.value


class LognormalDuration:
    def __init__(self, mu: float = 0.0, sigma: float = 0.5, seed=None):
        self.mu = float(mu)
        self.sigma = float(sigma)
        self._rng = np.random.default_rng(seed)

    def __call__(self, job: Job) -> float:
        return float(self._rng.lognormal(self.mu, self.sigma))


class TableDuration:
    """Durations indexed by job id."""

    def __init__(self, values: Sequence[float]):
        self.values = [float(v) for v in values]

    def __call__(self, job: Job) -> float:
        if job.id >= len(self.values):
            raise SchedulerError(f"duration table has {len(self.values)} entries, job {job.id} needs one more")
        return self.values[job.id]


def make_duration_model(spec: Optional[Dict[str, Any]], seed=None):
    """Build a duration model from a config mapping such as ``{"kind": "table", "values": [...]}``."""
    if spec is None:
        return ConstantDuration(1.0)
    kind = spec.get("kind", "constant")
    if kind == "constant":
        return ConstantDuration(spec.get("value", 1.0))
    if kind == "lognormal":
        return LognormalDuration(spec.get("mu", 0.0), spec.get("sigma", 0.5), seed=seed)
    if kind == "table":
        return TableDuration(spec["values"])
    raise ValueError(f"unknown duration model {kind!r}")


class WorkerPool:
    """k workers fed from a FIFO queue.

    Args:
        k: Number of workers (ids 1..k).
        evaluate: Callable mapping a parameter vector to a simulation result.
        mode: ``"simulated"`` or ``"real"``.
        duration_model: Callable job -> seconds, simulated mode only.
        acquisition_duration: Delay between a submit call and the job becoming
            eligible for dispatch (clock time in real mode).
    """

    def __init__(self, k: int, evaluate: Callable[[np.ndarray], Any], mode: str = "simulated",
                 duration_model: Optional[Callable[[Job], float]] = None,
                 acquisition_duration: float = 0.0):
        if k < 1:
            raise ValueError("a pool needs at least one worker")
        if mode not in ("simulated", "real"):
            raise ValueError(f"unknown pool mode {mode!r}")
        self.k = k
        self.mode = mode
        self.evaluate = evaluate
        self.duration_model = duration_model or ConstantDuration(1.0)
        self.acquisition_duration = float(acquisition_duration)
        self.now = 0.0
        self.closed = False
        self._jobs: List[Job] = []
        self._outstanding = 0

        # simulated state
        self._queue: deque = deque()
        self._events: list = []
        self._busy: Dict[int, Optional[int]] = {w: None for w in range(1, k + 1)}

        # real state
        self._executor: Optional[ThreadPoolExecutor] = None
        self._done: "queue.Queue[Job]" = queue.Queue()
        self._free_workers: List[int] = list(range(1, k + 1))
        self._lock = threading.Lock()
        self._t0 = time.perf_counter()
        if mode == "real":
            self._executor = ThreadPoolExecutor(max_workers=k)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def outstanding(self) -> int:
        return self._outstanding

    def submit(self, theta, generation_id: int = 0) -> Job:
        if self.closed:
            raise PoolClosed("cannot submit to a closed pool")
        if self.mode == "real":
            self.now = time.perf_counter() - self._t0
        job = Job(len(self._jobs), np.asarray(theta, dtype=float), generation_id,
                  self.now + self.acquisition_duration)
        self._jobs.append(job)
        self._outstanding += 1
        logger.debug("submitted job %d (generation %d)", job.id, generation_id)
        if self.mode == "simulated":
            self._queue.append(job)
            self._dispatch()
        else:
            future = self._executor.submit(self._run_real, job)
            future.add_done_callback(lambda f, j=job: self._done.put(j))
        return job

    def _evaluate(self, job: Job) -> None:
        """Run the simulation; any exception becomes ``job.error`` in both modes."""
        try:
            job.result = self.evaluate(job.theta)
        except SimulatorFailure as exc:
            job.error = str(exc)
            logger.warning("job %d failed: %s", job.id, exc)
        except Exception as exc:
            job.error = f"{exc.__class__.__name__}: {exc}"
            logger.exception("job %d raised", job.id)

    # simulated mode

    def _dispatch(self) -> None:
        while self._queue:
            idle = [w for w, j in self._busy.items() if j is None]
            if not idle:
                return
            job = self._queue.popleft()
            try:
                duration = float(self.duration_model(job))
            except Exception:
                self._queue.appendleft(job)
                raise
            worker = min(idle)
            job.worker_id = worker
            job.start_time = max(self.now, job.submit_time)
            job.status = RUNNING
            self._busy[worker] = job.id
            self._evaluate(job)
            job.end_time = job.start_time + duration
            heapq.heappush(self._events, (job.end_time, job.id))

    def _complete_next(self) -> Job:
        end_time, job_id = heapq.heappop(self._events)
        job = self._jobs[job_id]
        self.now = end_time
        job.status = FAILED if job.error is not None else DONE
        self._busy[job.worker_id] = None
        self._outstanding -= 1
        self._dispatch()
        return job

    # real mode

    def _run_real(self, job: Job) -> None:
        # the job is not eligible before its submit time
        delay = job.submit_time - (time.perf_counter() - self._t0)
        if delay > 0:
            time.sleep(delay)
        with self._lock:
            job.worker_id = min(self._free_workers)
            self._free_workers.remove(job.worker_id)
        job.start_time = max(time.perf_counter() - self._t0, job.submit_time)
        job.status = RUNNING
        try:
            self._evaluate(job)
            job.status = FAILED if job.error is not None else DONE
        finally:
            job.end_time = time.perf_counter() - self._t0
            with self._lock:
                self._free_workers.append(job.worker_id)

    def await_completions(self, count: int) -> List[Job]:
        """Block until ``count`` more jobs finish; returned in (end time, id) order.

        Raises:
            Deadlock: If fewer than ``count`` jobs are outstanding.
        """
        if count < 1:
            return []
        if count > self._outstanding:
            raise Deadlock(f"waiting for {count} completions with {self._outstanding} jobs outstanding")
        if self.mode == "simulated":
            done = [self._complete_next() for _ in range(count)]
        else:
            done = [self._done.get() for _ in range(count)]
            with self._lock:
                self._outstanding -= count
            self.now = max(j.end_time for j in done)
            done.sort(key=lambda j: (j.end_time, j.id))
        for job in done:
            logger.debug("job %d %s at %.4f on worker %s", job.id, job.status, job.end_time, job.worker_id)
        return done

    def trace(self) -> JobTrace:
        return JobTrace(tuple(self._jobs))

    def close(self) -> None:
        self.closed = True
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None


def simulate_schedule(k: int, trigger: int, per_trigger: int, n_initial: int, budget: int,
                      duration_model, acquisition_duration: float = 0.0) -> JobTrace:
    """Job trace of the generation procedure with no emulator in the loop.

    ``n_initial`` jobs form generation 0; every ``trigger`` completions a new
    generation of up to ``per_trigger`` jobs is submitted until ``budget``
    further jobs have been issued.
    """
    pool = WorkerPool(k, evaluate=lambda theta: None, duration_model=duration_model,
                      acquisition_duration=acquisition_duration)
    for _ in range(n_initial):
        pool.submit(np.zeros(1), 0)
    remaining = budget
    generation = 0
    while remaining > 0:
        if pool.outstanding == 0:
            raise Deadlock("no jobs outstanding while budget remains")
        pool.await_completions(min(trigger, pool.outstanding))
        generation += 1
        for _ in range(min(per_trigger, remaining)):
            pool.submit(np.zeros(1), generation)
            remaining -= 1
    while pool.outstanding:
        pool.await_completions(min(trigger, pool.outstanding))
    pool.close()
    return pool.trace()
