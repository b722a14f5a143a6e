import numpy as np
import pytest

from app.exceptions import Deadlock, PoolClosed, SchedulerError, SimulatorFailure
from app.scheduler import (DONE, FAILED, ConstantDuration, LognormalDuration, TableDuration,
                           WorkerPool, make_duration_model, simulate_schedule)

SYNC_TABLE = [0.502, 6.824, 1.601, 1.146, 4.092, 1.585, 2.463, 0.053, 0.464, 7.2, 0.688, 1.596]
ASYNC_TABLE = [0.502, 6.824, 1.601, 1.146, 2.463, 0.052, 4.092, 1.596, 0.688, 1.143, 1.431, 1.091]


def _pool(k, durations, **kwargs):
    return WorkerPool(k, evaluate=lambda theta: theta, duration_model=TableDuration(durations), **kwargs)


def _no_overlap(trace):
    for intervals in trace.worker_intervals().values():
        for (_, end, _), (start, _, _) in zip(intervals, intervals[1:]):
            assert start >= end - 1e-12


def test_single_worker_serializes():
    pool = _pool(1, [2.0, 1.0])
    first = pool.submit(np.zeros(1))
    second = pool.submit(np.zeros(1))
    pool.await_completions(2)
    assert second.start_time == first.end_time == 2.0
    assert second.end_time == 3.0


def test_two_workers_run_in_parallel():
    pool = _pool(2, [1.0, 3.0])
    pool.submit(np.zeros(1))
    pool.submit(np.zeros(1))
    done = pool.await_completions(2)
    assert [j.end_time for j in done] == [1.0, 3.0]
    assert pool.outstanding == 0


def test_third_job_takes_the_first_freed_worker():
    pool = _pool(2, [1.0, 3.0, 1.0])
    jobs = [pool.submit(np.zeros(1)) for _ in range(3)]
    pool.await_completions(3)
    assert jobs[2].start_time == 1.0
    assert jobs[2].worker_id == jobs[0].worker_id == 1


def test_completions_ordered_by_end_time_then_id():
    pool = _pool(3, [2.0, 1.0, 1.0])
    for _ in range(3):
        pool.submit(np.zeros(1))
    assert [j.id for j in pool.await_completions(3)] == [1, 2, 0]


def test_acquisition_delay_shifts_the_start():
    pool = WorkerPool(1, evaluate=lambda t: t, duration_model=ConstantDuration(1.0), acquisition_duration=0.5)
    job = pool.submit(np.zeros(1))
    pool.await_completions(1)
    assert (job.submit_time, job.start_time, job.end_time) == (0.5, 0.5, 1.5)


def test_results_come_from_evaluate():
    pool = WorkerPool(2, evaluate=lambda t: 2 * t)
    pool.submit(np.array([1.5]))
    (job,) = pool.await_completions(1)
    assert job.status == DONE
    np.testing.assert_array_equal(job.result, [3.0])


def test_simulator_failures_are_recorded():
    def evaluate(theta):
        if theta[0] < 0:
            raise SimulatorFailure("negative")
        return theta

    pool = WorkerPool(1, evaluate=evaluate)
    pool.submit(np.array([-1.0]))
    pool.submit(np.array([1.0]))
    bad, good = pool.await_completions(2)
    assert bad.status == FAILED and "negative" in bad.error
    assert good.status == DONE


def test_deadlock_detected():
    pool = _pool(2, [1.0])
    with pytest.raises(Deadlock):
        pool.await_completions(1)
    pool.submit(np.zeros(1))
    with pytest.raises(Deadlock):
        pool.await_completions(2)


def test_closed_pool_rejects_jobs():
    with _pool(1, [1.0]) as pool:
        pass
    with pytest.raises(PoolClosed):
        pool.submit(np.zeros(1))


def test_exhausted_duration_table():
    pool = _pool(1, [1.0])
    pool.submit(np.zeros(1))
    with pytest.raises(SchedulerError):
        pool.submit(np.zeros(1))
        pool.await_completions(2)


def test_duration_models():
    assert make_duration_model(None)(None) == 1.0
    assert make_duration_model({"kind": "constant", "value": 2.5})(None) == 2.5
    a = make_duration_model({"kind": "lognormal", "mu": 0.0, "sigma": 0.5}, seed=3)
    b = LognormalDuration(0.0, 0.5, seed=3)
    assert [a(None) for _ in range(3)] == [b(None) for _ in range(3)]
    with pytest.raises(ValueError):
        make_duration_model({"kind": "weibull"})


def test_synchronous_figure_generations():
    trace = simulate_schedule(4, 4, 4, 4, 8, TableDuration(SYNC_TABLE))
    assert trace.generations() == {0: [0, 1, 2, 3], 1: [4, 5, 6, 7], 2: [8, 9, 10, 11]}
    starts = {j.id: j.start_time for j in trace.jobs}
    assert all(starts[i] == pytest.approx(6.824) for i in range(4, 8))
    assert all(starts[i] == pytest.approx(10.916) for i in range(8, 12))
    assert trace.makespan == pytest.approx(18.116)
    _no_overlap(trace)


def test_asynchronous_figure_generations():
    trace = simulate_schedule(4, 2, 2, 4, 8, TableDuration(ASYNC_TABLE))
    assert trace.generations() == {0: [0, 1, 2, 3], 1: [4, 5], 2: [6, 7], 3: [8, 9], 4: [10, 11]}
    starts = {j.id: j.start_time for j in trace.jobs}
    assert starts[4] == starts[5] == pytest.approx(1.146)
    assert starts[6] == starts[7] == pytest.approx(1.601)
    assert trace.makespan == pytest.approx(6.824)
    _no_overlap(trace)


def test_constant_durations_make_sync_and_async_agree():
    def timeline(trigger, per_trigger):
        trace = simulate_schedule(4, trigger, per_trigger, 4, 8, ConstantDuration(1.0))
        return [(j.id, j.worker_id, j.start_time, j.end_time) for j in trace.jobs]

    assert timeline(2, 2) == timeline(4, 4)
    assert timeline(1, 1) == timeline(4, 4)


def test_greedy_async_never_idles_more_than_sync():
    rng = np.random.default_rng(0)
    for _ in range(20):
        table = list(rng.lognormal(0.0, 1.0, size=12))
        sync = simulate_schedule(4, 4, 4, 4, 8, TableDuration(table))
        greedy = simulate_schedule(4, 1, 1, 4, 8, TableDuration(table))
        assert greedy.idle_time(4) <= sync.idle_time(4) + 1e-9
        assert len(greedy.generations()) - 1 == 8


def test_schedule_is_deterministic():
    a = simulate_schedule(3, 2, 1, 3, 6, LognormalDuration(0.0, 0.7, seed=9))
    b = simulate_schedule(3, 2, 1, 3, 6, LognormalDuration(0.0, 0.7, seed=9))
    assert a.rows() == b.rows()


def test_running_jobs_never_exceed_workers():
    trace = simulate_schedule(3, 1, 2, 3, 9, LognormalDuration(0.0, 1.0, seed=1))
    events = sorted([(j.start_time, 1) for j in trace.jobs] + [(j.end_time, -1) for j in trace.jobs],
                    key=lambda e: (e[0], e[1]))
    running = 0
    for _, step in events:
        running += step
        assert running <= 3
    assert all(j.start_time >= j.submit_time and j.end_time >= j.start_time for j in trace.jobs)


def test_idle_time_accounting():
    trace = simulate_schedule(2, 2, 2, 2, 0, TableDuration([1.0, 3.0]))
    assert trace.makespan == 3.0
    assert trace.idle_time(2) == pytest.approx(2.0)


def test_real_mode_runs_on_threads():
    with WorkerPool(2, evaluate=lambda t: t + 1, mode="real") as pool:
        for x in range(3):
            pool.submit(np.array([float(x)]))
        done = pool.await_completions(3)
    assert sorted(float(j.result[0]) for j in done) == [1.0, 2.0, 3.0]
    assert all(j.status == DONE and j.worker_id in (1, 2) for j in done)
    assert [(j.end_time, j.id) for j in done] == sorted((j.end_time, j.id) for j in done)


def test_unexpected_errors_fail_the_job_in_simulated_mode():
    def evaluate(theta):
        raise FloatingPointError("overflow in solver")

    pool = WorkerPool(1, evaluate=evaluate)
    pool.submit(np.zeros(1))
    pool.submit(np.zeros(1))
    first, second = pool.await_completions(2)
    assert first.status == second.status == FAILED
    assert "FloatingPointError" in first.error
    assert (first.end_time, second.start_time, second.end_time) == (1.0, 1.0, 2.0)
    assert pool.outstanding == 0


def test_unexpected_errors_fail_the_job_in_real_mode():
    def evaluate(theta):
        raise FloatingPointError("overflow in solver")

    with WorkerPool(1, evaluate=evaluate, mode="real") as pool:
        pool.submit(np.zeros(1))
        (job,) = pool.await_completions(1)
    assert job.status == FAILED and "FloatingPointError" in job.error


def test_real_mode_waits_for_the_acquisition_delay():
    with WorkerPool(2, evaluate=lambda t: t, mode="real", acquisition_duration=0.05) as pool:
        jobs = [pool.submit(np.zeros(1)) for _ in range(2)]
        pool.await_completions(2)
    for job in jobs:
        assert job.submit_time <= job.start_time <= job.end_time


def test_work_is_conserved_on_the_async_table():
    trace = simulate_schedule(4, 2, 2, 4, 8, TableDuration(ASYNC_TABLE))
    busy = sum(j.end_time - j.start_time for j in trace.jobs)
    assert busy == pytest.approx(sum(ASYNC_TABLE), rel=1e-12)
    assert trace.idle_time(4) == pytest.approx(4 * trace.makespan - busy, rel=1e-12)


def test_no_worker_idles_while_jobs_wait():
    trace = simulate_schedule(2, 1, 2, 2, 6, LognormalDuration(0.0, 1.0, seed=4))
    waited = [j for j in trace.jobs if j.start_time > j.submit_time]
    assert waited
    for job in waited:
        t = 0.5 * (job.submit_time + job.start_time)
        running = sum(1 for j in trace.jobs if j.start_time <= t < j.end_time)
        assert running == 2
        assert any(j.end_time == job.start_time for j in trace.jobs if j.id != job.id)
