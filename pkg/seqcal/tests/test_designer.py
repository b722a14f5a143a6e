import dataclasses

import numpy as np
import pytest

from app.designer import (RunConfig, estimated_posterior, mad, make_initial_design, make_reference,
                          run_async, run_batch, run_design, run_sequential)
from app.exceptions import ConfigInvalid, LengthMismatch, SimulatorFailure
from app.problems import get_problem

ASYNC_TABLE = [0.502, 6.824, 1.601, 1.146, 2.463, 0.052, 4.092, 1.596, 0.688, 1.143, 1.431, 1.091]


def _config(**overrides):
    options = dict(problem=get_problem("unimodal"), acquisition="rnd", n0=6, n=4,
                   candidate_size=30, reference_grid=12, seed=1)
    options.update(overrides)
    return RunConfig(**options)


def _flaky_unimodal(threshold=2.0):
    base = get_problem("unimodal")

    def simulator(T):
        if np.any(T[:, 0] > threshold):
            raise SimulatorFailure("solver diverged")
        return base.simulator(T)

    return dataclasses.replace(base, simulator=simulator)


def _conserved(result, total):
    n0 = result.config.n0
    return all(done + pending + remaining == total for done, pending, remaining in result.budget_log[n0 - 1:])


def test_mad():
    assert mad([1.0, 2.0], [1.5, 1.0]) == pytest.approx(0.75)
    with pytest.raises(LengthMismatch):
        mad([1.0, 2.0], [1.0])


def test_reference_set():
    bounds = get_problem("unimodal").bounds
    grid = make_reference(bounds, grid=5)
    assert grid.shape == (25, 2)
    np.testing.assert_array_equal(grid[0], [-4.0, -4.0])
    lhs = make_reference(get_problem("3d").bounds, size=40)
    assert lhs.shape == (40, 3)
    np.testing.assert_array_equal(lhs, make_reference(get_problem("3d").bounds, size=40))


def test_initial_design_is_a_latin_hypercube():
    bounds = get_problem("unimodal").bounds
    design = make_initial_design(bounds, 8, seed=0)
    strata = np.floor(bounds.to_unit(design) * 8).astype(int)
    for column in strata.T:
        assert sorted(column) == list(range(8))


def test_no_acquisitions():
    result = run_sequential(_config(n=0))
    assert len(result.initial) == 6
    assert result.acquisitions == []
    assert [i for i, _ in result.mad_trace] == [0]
    assert len(result.job_trace) == 6


def test_random_runs_are_reproducible():
    a = run_sequential(_config())
    b = run_sequential(_config())
    c = run_sequential(_config(seed=2))
    np.testing.assert_array_equal(a.thetas, b.thetas)
    assert a.mad_trace == b.mad_trace
    assert not np.array_equal(a.thetas, c.thetas)


def test_sequential_traces_every_stage():
    result = run_sequential(_config(acquisition="maxvar"))
    assert [r.stage for r in result.acquisitions] == [1, 2, 3, 4]
    assert [i for i, _ in result.mad_trace] == [0, 1, 2, 3, 4]
    assert all(np.isfinite(v) and v >= 0 for _, v in result.mad_trace)
    best = [v for _, v, _ in result.best_residual_trace]
    assert best == sorted(best, reverse=True)
    assert all(get_problem("unimodal").bounds.contains(r.theta) for r in result.acquisitions)


def test_single_stage_batch():
    result = run_batch(_config(mode="batch", acquisition="maxvar", n=4, batch=4))
    assert [r.generation for r in result.acquisitions] == [1, 1, 1, 1]
    assert len({tuple(r.theta) for r in result.acquisitions}) == 4


def test_batch_needs_divisible_budget():
    with pytest.raises(ConfigInvalid) as info:
        _config(mode="batch", n=5, batch=2)
    assert info.value.field == "batch"


def test_async_with_full_trigger_reproduces_batch():
    batch = run_batch(_config(mode="batch", acquisition="maxvar", n0=4, n=8, batch=4))
    asynchronous = run_async(_config(mode="async", acquisition="maxvar", n0=4, n=8,
                                     workers=4, trigger=4, per_trigger=4))
    np.testing.assert_array_equal(batch.thetas, asynchronous.thetas)
    assert batch.job_trace.rows() == asynchronous.job_trace.rows()


def test_async_figure_generations():
    result = run_design(_config(mode="async", n0=4, n=8, workers=4, trigger=2, per_trigger=2,
                                duration={"kind": "table", "values": ASYNC_TABLE}))
    generations = result.job_trace.generations()
    assert sorted(g for g in generations if g > 0) == [1, 2, 3, 4]
    assert all(len(generations[g]) == 2 for g in range(1, 5))
    assert result.job_trace.makespan == pytest.approx(6.824)


def test_greedy_async_has_one_generation_per_acquisition():
    result = run_async(_config(mode="async", n0=4, n=6, workers=4, trigger=1, per_trigger=1,
                               duration={"kind": "lognormal", "mu": 0.0, "sigma": 1.0}))
    assert len([g for g in result.job_trace.generations() if g > 0]) == 6


def test_async_pending_points_shape_the_selection():
    result = run_async(_config(mode="async", acquisition="eivar", n0=4, n=4, workers=3, trigger=1,
                               per_trigger=1, candidate_size=20,
                               duration={"kind": "lognormal", "mu": 0.0, "sigma": 0.5}))
    thetas = {tuple(r.theta) for r in result.initial + result.acquisitions}
    assert len(thetas) == 8


def test_budget_is_conserved():
    result = run_async(_config(mode="async", n0=4, n=6, workers=3, trigger=2, per_trigger=1))
    assert _conserved(result, 10)
    assert len(result.initial) + len(result.acquisitions) == 10


def test_failures_are_replaced():
    cfg = _config(problem=_flaky_unimodal(), n0=6, n=6, max_failures=100, seed=3)
    result = run_sequential(cfg)
    assert result.failures > 0
    assert len(result.initial) + len(result.acquisitions) == 12
    assert len(result.job_trace) == 12 + result.failures
    assert _conserved(result, 12)
    assert all(r.theta[0] <= 2.0 for r in result.initial + result.acquisitions)


def test_too_many_failures_abort_with_partial_results():
    cfg = _config(problem=_flaky_unimodal(threshold=-4.0), n0=4, n=2, max_failures=1)
    with pytest.raises(SimulatorFailure) as info:
        run_sequential(cfg)
    partial = info.value.partial_result
    assert partial.aborted
    assert partial.failures == 2
    assert len(partial.job_trace) >= 2


def test_mad_trace_recomputed_from_stored_states():
    cfg = _config(acquisition="maxvar", n=3, keep_states=True)
    result = run_sequential(cfg)
    problem = cfg.problem
    reference = make_reference(problem.bounds, cfg.reference_grid, cfg.reference_size)
    truth = problem.true_posterior(reference)
    latest = {index: (emu, obs) for index, emu, obs in result.states}
    assert sorted(latest) == [i for i, _ in result.mad_trace]
    for index, value in result.mad_trace:
        emu, obs = latest[index]
        recomputed = mad(truth, estimated_posterior(emu, obs, problem.prior, reference))
        assert recomputed == pytest.approx(value, abs=1e-10)


def test_holdout_threshold_stops_early():
    result = run_sequential(_config(n=5, stopping={"rule": "mad", "threshold": 1.0, "holdout_size": 50}))
    assert result.stopped_early
    assert result.acquisitions == []


def test_mad_stopping_needs_analytic_truth():
    with pytest.raises(ConfigInvalid):
        _config(problem=get_problem("discrepancy"), n0=5, stopping={"rule": "mad", "threshold": 0.1})


@pytest.mark.parametrize("strategy", ["liar-mean", "liar-min", "liar-max"])
def test_liar_strategies(strategy):
    result = run_batch(_config(mode="batch", acquisition="maxvar", n=4, batch=2, strategy=strategy))
    assert len(result.acquisitions) == 4
    assert [r.generation for r in result.acquisitions] == [1, 1, 2, 2]


def test_discrepancy_mode_runs_without_truth():
    cfg = RunConfig(problem=get_problem("discrepancy"), acquisition="maxvar", n0=5, n=2,
                    candidate_size=15, discrepancy={"fix_sigma_b": False, "starts": 2}, seed=0)
    result = run_sequential(cfg)
    assert len(result.acquisitions) == 2
    assert result.mad_trace == []
    assert result.final_mad is None


@pytest.mark.parametrize("field, overrides", [
    ("acquisition", {"acquisition": "ucb"}),
    ("mode", {"mode": "parallel"}),
    ("n0", {"n0": 1}),
    ("workers", {"mode": "async"}),
    ("trigger", {"mode": "async", "workers": 2, "trigger": 3, "per_trigger": 1}),
    ("strategy", {"strategy": "pessimist"}),
    ("pool_mode", {"pool_mode": "cluster"}),
    ("acquisition", {"problem": get_problem("banana"), "acquisition": "imse"}),
])
def test_invalid_configurations(field, overrides):
    with pytest.raises(ConfigInvalid) as info:
        _config(**overrides)
    assert info.value.field == field


def test_real_pool_mode():
    result = run_sequential(_config(n=2, pool_mode="real"))
    assert len(result.acquisitions) == 2
    assert result.wall_time > 0


@pytest.mark.slow
def test_eivar_beats_random_and_maxexp_on_the_unimodal_problem():
    finals = {"eivar": [], "rnd": [], "maxexp": []}
    for kind in finals:
        for seed in range(10):
            cfg = RunConfig(problem=get_problem("unimodal"), acquisition=kind, n0=10, n=100,
                            candidate_size=100, reference_grid=50, seed=seed)
            finals[kind].append(run_sequential(cfg).final_mad)
    assert np.median(finals["eivar"]) < np.median(finals["rnd"])
    assert np.median(finals["eivar"]) < np.median(finals["maxexp"])
