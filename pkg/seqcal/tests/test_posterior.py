import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from app import gp
from app.emulator import Dataset, EmulatorPrediction, PcgpEmulator, emu_fit, emu_predict
from app.exceptions import DimensionMismatch, OutOfBounds
from app.gp import KernelParams
from app.posterior import (AncillaryParams, Bounds, ObsModel, Prior, ancillary_cov, fit_ancillary,
                           gaussian_log_terms, log_variance_constant, mvn_logpdf, post_mean_var)
from app.problems import discrepancy


def _random_pd(rng, d, floor=0.1):
    A = rng.normal(size=(d, d))
    return A @ A.T + floor * np.eye(d)


def _prediction(mean, cov):
    """EmulatorPrediction with the given mean and (PD or zero) covariance, q = d."""
    vals, vecs = np.linalg.eigh(cov)
    return EmulatorPrediction(np.asarray(mean, dtype=float), np.maximum(vals, 0.0), vecs)


def _lemma_monte_carlo(rng, y, mu, S, Sigma, draws):
    eta = rng.multivariate_normal(mu, S, size=draws)
    f = np.exp(mvn_logpdf(np.broadcast_to(y, eta.shape), eta, Sigma))
    return f.mean(), f.std(ddof=1) / math.sqrt(draws), f.var(ddof=1), f


def test_gaussian_density_values():
    assert math.exp(mvn_logpdf(0.0, 0.0, [1.0])) == pytest.approx(0.398942, abs=1e-6)
    assert math.exp(mvn_logpdf([0.0, 0.0], [0.0, 0.0], np.eye(2))) == pytest.approx(0.159155, abs=1e-6)
    assert math.exp(mvn_logpdf(1.0, 0.0, 4.0)) == pytest.approx(0.176033, abs=1e-6)


def test_gaussian_log_terms_batched():
    rng = np.random.default_rng(0)
    covs = np.stack([_random_pd(rng, 3) for _ in range(4)])
    resid = rng.normal(size=(4, 3))
    logdet, logpdf = gaussian_log_terms(resid, covs)
    for i in range(4):
        assert logdet[i] == pytest.approx(np.linalg.slogdet(covs[i])[1], rel=1e-10)
        assert logpdf[i] == pytest.approx(mvn_logpdf(resid[i], np.zeros(3), covs[i]), rel=1e-10)


def test_density_dimension_is_checked():
    with pytest.raises(DimensionMismatch):
        mvn_logpdf([0.0, 0.0], [0.0, 0.0], np.eye(3))


def test_squared_density_identity():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = int(rng.integers(1, 5))
        M = _random_pd(rng, d)
        y, mu = rng.normal(size=d), rng.normal(size=d)
        logdet, log_half = gaussian_log_terms(y - mu, 0.5 * M)
        _, log_full = gaussian_log_terms(y - mu, M)
        lhs = log_variance_constant(d, np.linalg.slogdet(M)[1]) + log_half
        assert math.exp(lhs) == pytest.approx(math.exp(2 * log_full), rel=1e-10)


def test_zero_emulator_variance_gives_zero_variance():
    obs = ObsModel([0.3, -0.2], np.diag([1.0, 2.0]))
    pred = _prediction([0.1, 0.0], np.zeros((2, 2)))
    moments = post_mean_var(pred, obs, 0.5)
    assert moments.var == 0.0
    assert moments.mean == pytest.approx(0.5 * math.exp(mvn_logpdf(obs.data, [0.1, 0.0], obs.sigma)))


def test_scalar_closed_form_moments():
    pred = _prediction([0.0], np.array([[1.0]]))
    moments = post_mean_var(pred, ObsModel([0.0], [[1.0]]), 1.0)
    assert moments.mean == pytest.approx(0.282095, abs=1e-6)
    assert moments.var == pytest.approx(1.0 / (2 * math.pi * math.sqrt(3)) - 1.0 / (4 * math.pi), rel=1e-10)


def test_scalar_moments_match_monte_carlo():
    rng = np.random.default_rng(2)
    pred = _prediction([0.0], np.array([[1.0]]))
    moments = post_mean_var(pred, ObsModel([0.0], [[1.0]]), 1.0)
    mean, se, var, f = _lemma_monte_carlo(rng, np.zeros(1), np.zeros(1), np.eye(1), np.eye(1), 200_000)
    assert abs(moments.mean - mean) < 3 * se
    var_se = np.std((f - f.mean()) ** 2, ddof=1) / math.sqrt(f.shape[0])
    assert abs(moments.var - var) < 3 * var_se


@pytest.mark.slow
def test_moments_match_monte_carlo_on_random_configurations():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d = int(rng.integers(1, 4))
        Sigma, S = _random_pd(rng, d), 0.5 * _random_pd(rng, d)
        mu = rng.normal(size=d)
        y = mu + rng.normal(size=d)
        moments = post_mean_var(_prediction(mu, S), ObsModel(y, Sigma), 1.0)
        mean, se, var, f = _lemma_monte_carlo(rng, y, mu, S, Sigma, 200_000)
        var_se = np.std((f - f.mean()) ** 2, ddof=1) / math.sqrt(f.shape[0])
        assert abs(moments.mean - mean) < 4 * se
        assert abs(moments.var - var) < 4 * var_se


def test_moments_scale_with_the_prior():
    pred = _prediction([0.2], np.array([[0.5]]))
    obs = ObsModel([0.0], [[1.0]])
    one = post_mean_var(pred, obs, 1.0)
    three = post_mean_var(pred, obs, 3.0)
    assert three.mean == pytest.approx(3 * one.mean)
    assert three.var == pytest.approx(9 * one.var)


def test_negative_prior_density_rejected():
    with pytest.raises(ValueError):
        post_mean_var(_prediction([0.0], np.eye(1)), ObsModel([0.0], [[1.0]]), -1.0)


def test_singular_sigma_gets_ladder_jitter():
    obs = ObsModel([0.0, 0.0], np.ones((2, 2)))
    assert obs.jitter > 0
    np.linalg.cholesky(obs.cov)


def test_bounds_checks_and_unit_maps():
    bounds = Bounds([0.0, -1.0], [2.0, 1.0])
    np.testing.assert_allclose(bounds.to_unit([1.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(bounds.from_unit([1.0, 0.0]), [2.0, -1.0])
    assert bounds.volume == 4.0
    with pytest.raises(OutOfBounds):
        bounds.check([2.5, 0.0])
    with pytest.raises(DimensionMismatch):
        bounds.check([1.0])


def test_uniform_prior_density():
    bounds = Bounds([0.0, 0.0], [2.0, 4.0])
    prior = Prior(bounds)
    assert prior.density([1.0, 1.0]) == pytest.approx(1 / 8)
    assert prior.density([3.0, 1.0]) == 0.0


def test_truncated_gaussian_prior_integrates_to_one():
    bounds = Bounds([-2.0, -2.0], [5.0, 5.0])
    prior = Prior(bounds, kind="truncated-gaussian", mean=[1.0, 1.0], sd=1.0)
    axis = np.linspace(-2.0, 5.0, 401)
    mesh = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1)
    dens = prior.density(mesh)
    total = trapezoid(trapezoid(dens, axis, axis=1), axis)
    assert total == pytest.approx(1.0, rel=1e-3)


def test_ancillary_covariance_structure():
    x = np.array([[0.0], [1.0]])
    cov = AncillaryParams(0.5, 2.0, 1.0, x).cov()
    np.testing.assert_allclose(cov, [[2.5, 2 * math.exp(-1)], [2 * math.exp(-1), 2.5]])
    np.testing.assert_allclose(ancillary_cov(0.5, 0.0, 3.0, x), 0.5 * np.eye(2))
    with pytest.raises(ValueError):
        AncillaryParams(0.0, 1.0, 1.0, x)


def _interpolating_emulator(params, outputs):
    data = Dataset(params, outputs)
    emu = emu_fit(data, q=min(data.d, data.n), seed=0)
    scores = emu.project(data.outputs)
    fixed = KernelParams(0.0, np.full(data.p, 1.0), math.log(1e-10))
    gps = tuple(gp.gp_state(data.params, scores[:, j], fixed) for j in range(emu.q))
    return data, PcgpEmulator(emu.center, emu.scale, emu.basis, gps)


def test_ancillary_zero_residual_hits_the_noise_floor():
    problem = discrepancy()
    params = np.linspace(0.05, 0.95, 8)[:, None]
    data, emu = _interpolating_emulator(params, problem.evaluate_many(params))
    y = data.outputs[3]
    anc, theta = fit_ancillary(data, emu, y, problem.design_points, problem.bounds,
                               seed=0, fix_sigma_b=True)
    assert anc.sigma_b_sq == 0.0
    assert anc.sigma_eps_sq == pytest.approx(1e-6, rel=1e-2)
    assert theta[0] == pytest.approx(params[3, 0], abs=1e-3)


def _profile_loglik(emu, y, x, anc, theta):
    pred = emu_predict(emu, np.atleast_1d(theta))
    cov = ancillary_cov(anc.sigma_eps_sq, anc.sigma_b_sq, anc.lam, x) + pred.cov
    return mvn_logpdf(y, pred.mean, cov)


def test_discrepancy_mle_beats_random_parameters():
    problem = discrepancy(seed=0)
    params = np.linspace(0.0, 1.0, 12)[:, None]
    data = Dataset(params, problem.evaluate_many(params))
    emu = emu_fit(data, seed=1)
    anc, theta_hat = fit_ancillary(data, emu, problem.obs.data, problem.design_points, problem.bounds,
                                   seed=2, n_starts=10)
    best = _profile_loglik(emu, problem.obs.data, problem.design_points, anc, theta_hat)
    for theta in np.random.default_rng(3).random(20):
        assert best >= _profile_loglik(emu, problem.obs.data, problem.design_points, anc, [theta]) - 1e-6


@pytest.mark.slow
def test_noise_variance_recovered_without_discrepancy():
    x = np.linspace(0.0, 1.0, 15)[:, None]
    simulator = lambda T: np.sin(3.0 * x[None, :, 0] * T) + x[None, :, 0]
    params = np.linspace(0.0, 1.0, 20)[:, None]
    data, emu = _interpolating_emulator(params, simulator(params))
    bounds = Bounds([0.0], [1.0])
    truth = 0.04
    rng = np.random.default_rng(4)
    estimates = []
    for rep in range(50):
        y = simulator(np.array([[0.6]]))[0] + rng.normal(0.0, math.sqrt(truth), size=15)
        anc, _ = fit_ancillary(data, emu, y, x, bounds, seed=rep, fix_sigma_b=True)
        estimates.append(anc.sigma_eps_sq)
    assert abs(np.median(estimates) - truth) <= 0.2 * truth
