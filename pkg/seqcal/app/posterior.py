"""Priors, Gaussian densities and closed-form moments of the unnormalized posterior.

Under the emulator the simulation output at theta is ``N(mu, S)``, so the
unnormalized posterior ``f(y; eta, Sigma) p(theta)`` is a random variable whose
mean and variance have closed forms:

    mean = f(y; mu, Sigma + S) p
    var  = (f(y; mu, Sigma/2 + S) / (2^d pi^(d/2) |Sigma|^(1/2)) - mean_f^2) p^2

All densities are handled in log space and exponentiated at the end.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import scipy.optimize as spo
from scipy.stats import qmc, truncnorm

from .emulator import Dataset, EmulatorPrediction, PcgpEmulator, emu_predict
from .exceptions import DimensionMismatch, NotPositiveDefinite, OptimFailure, OutOfBounds

logger = logging.getLogger(__name__)

JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
_LOG_2PI = float(np.log(2.0 * np.pi))
_LOG_PI = float(np.log(np.pi))
_LOG_2 = float(np.log(2.0))


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionMismatch("lower and upper bounds must be vectors of equal length")
        if not np.all(hi > lo):
            raise ValueError("every upper bound must exceed its lower bound")
        object.__setattr__(self, "lower", _frozen(lo))
        object.__setattr__(self, "upper", _frozen(hi))

    @classmethod
    def from_pairs(cls, pairs) -> "Bounds":
        arr = np.asarray(pairs, dtype=float)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self) -> int:
        return int(self.lower.shape[0])

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def volume(self) -> float:
        return float(np.prod(self.width))

    def contains(self, theta, tol: float = 1e-12) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        return np.all((t >= self.lower - tol) & (t <= self.upper + tol), axis=-1)

    def check(self, theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        if t.shape[-1] != self.dim:
            raise DimensionMismatch(f"parameter has {t.shape[-1]} entries, expected {self.dim}")
        if not np.all(self.contains(t)):
            raise OutOfBounds(f"parameter {t.tolist()} outside [{self.lower.tolist()}, {self.upper.tolist()}]")
        return t

    def to_unit(self, theta) -> np.ndarray:
        return (np.asarray(theta, dtype=float) - self.lower) / self.width

    def from_unit(self, u) -> np.ndarray:
        return self.lower + np.asarray(u, dtype=float) * self.width


@dataclass(frozen=True)
class Prior:
    """Uniform or independent truncated-Gaussian prior on a box."""

    bounds: Bounds
    kind: str = "uniform"
    mean: Optional[np.ndarray] = None
    sd: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("uniform", "truncated-gaussian"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "truncated-gaussian":
            if self.mean is None or self.sd is None:
                raise ValueError("truncated-gaussian prior needs mean and sd")
            mean = np.broadcast_to(np.asarray(self.mean, dtype=float), (self.bounds.dim,))
            sd = np.broadcast_to(np.asarray(self.sd, dtype=float), (self.bounds.dim,))
            if np.any(sd <= 0):
                raise ValueError("prior sd must be positive")
            object.__setattr__(self, "mean", _frozen(mean))
            object.__setattr__(self, "sd", _frozen(sd))

    def density(self, theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        inside = self.bounds.contains(t)
        if self.kind == "uniform":
            dens = np.full(inside.shape, 1.0 / self.bounds.volume)
        else:
            a = (self.bounds.lower - self.mean) / self.sd
            b = (self.bounds.upper - self.mean) / self.sd
            dens = np.prod(truncnorm.pdf(t, a, b, loc=self.mean, scale=self.sd), axis=-1)
        out = np.where(inside, dens, 0.0)
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ObsModel:
    """Observed data ``y`` with observation covariance ``Sigma``.

    When ``Sigma`` is not positive definite a ridge from the jitter ladder
    (relative to the mean diagonal) is stored in ``jitter``.
    """

    data: np.ndarray
    sigma: np.ndarray
    jitter: float = 0.0

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.data, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if sigma.shape == (1, y.shape[0]) and y.shape[0] > 1:
            sigma = np.diag(sigma[0])
        if sigma.shape != (y.shape[0], y.shape[0]):
            raise DimensionMismatch(f"Sigma has shape {sigma.shape}, data has {y.shape[0]} entries")
        if not np.allclose(sigma, sigma.T, atol=1e-12):
            raise ValueError("Sigma must be symmetric")
        object.__setattr__(self, "data", _frozen(y))
        object.__setattr__(self, "sigma", _frozen(sigma))
        if self.jitter == 0.0:
            try:
                np.linalg.cholesky(sigma)
            except np.linalg.LinAlgError:
                object.__setattr__(self, "jitter", _ladder_jitter(sigma))

    @property
    def d(self) -> int:
        return int(self.data.shape[0])

    @property
    def cov(self) -> np.ndarray:
        return self.sigma + self.jitter * np.eye(self.d)

    @property
    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(np.linalg.cholesky(self.cov)))))


def _ladder_jitter(sigma: np.ndarray) -> float:
    base = float(np.mean(np.diag(sigma)))
    base = base if base > 0 else 1.0
    for rel in JITTER_LADDER:
        try:
            np.linalg.cholesky(sigma + rel * base * np.eye(sigma.shape[0]))
        except np.linalg.LinAlgError:
            continue
        logger.warning("Sigma not positive definite; adding jitter %.3g", rel * base)
        return rel * base
    raise NotPositiveDefinite("observation covariance is not positive definite after jitter")


def _cholesky(cov: np.ndarray) -> np.ndarray:
    """Batched Cholesky with the jitter ladder applied to the whole stack on failure."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[-1]
    base = np.mean(np.diagonal(cov, axis1=-2, axis2=-1), axis=-1)[..., None, None]
    base = np.where(base > 0, base, 1.0)
    for rel in JITTER_LADDER:
        try:
            L = np.linalg.cholesky(cov + rel * base * np.eye(d))
        except np.linalg.LinAlgError:
            continue
        logger.warning("covariance not positive definite; added relative jitter %.0e", rel)
        return L
    raise NotPositiveDefinite(f"covariance of size {d} is not positive definite after jitter")


def gaussian_log_terms(resid, cov) -> Tuple[np.ndarray, np.ndarray]:
    """Log-determinant of ``cov`` and log f(resid; 0, cov), batched over leading axes."""
    r = np.asarray(resid, dtype=float)
    C = np.asarray(cov, dtype=float)
    L = _cholesky(C)
    z = np.linalg.solve(L, r[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    d = r.shape[-1]
    logpdf = -0.5 * (d * _LOG_2PI + logdet + np.sum(z ** 2, axis=-1))
    return logdet, logpdf


def mvn_logpdf(x, mean, cov):
    """Log density of N(mean, cov) at x; scalars in, float out."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    if cov.ndim < 2:
        cov = np.atleast_2d(cov) if x.shape[-1] == 1 else np.diag(np.broadcast_to(cov, x.shape[-1:]))
    if cov.shape[-1] != x.shape[-1]:
        raise DimensionMismatch(f"covariance of size {cov.shape[-1]} for {x.shape[-1]}-vectors")
    _, out = gaussian_log_terms(x - mean, cov)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PosteriorMoments:
    mean: np.ndarray
    var: np.ndarray


def log_variance_constant(d: int, sigma_logdet: float) -> float:
    """log of 1 / (2^d pi^(d/2) |Sigma|^(1/2))."""
    return -d * _LOG_2 - 0.5 * d * _LOG_PI - 0.5 * sigma_logdet


def post_mean_var(pred: EmulatorPrediction, obs: ObsModel, prior_density) -> PosteriorMoments:
    """Mean and variance of the unnormalized posterior at the predicted parameters."""
    p = np.asarray(prior_density, dtype=float)
    if np.any(p < 0):
        raise ValueError("prior density must be non-negative")
    mu = np.asarray(pred.mean, dtype=float)
    if mu.shape[-1] != obs.d:
        raise DimensionMismatch(f"emulator outputs {mu.shape[-1]} values, data has {obs.d}")
    S = pred.cov
    Sigma = obs.cov
    resid = obs.data - mu

    _, log_f1 = gaussian_log_terms(resid, Sigma + S)
    _, log_f2 = gaussian_log_terms(resid, 0.5 * Sigma + S)
    log_c = log_variance_constant(obs.d, obs.logdet)

    mean = np.exp(log_f1) * p
    var = (np.exp(log_c + log_f2) - np.exp(2.0 * log_f1)) * p ** 2
    var = np.maximum(var, 0.0)
    var = np.where(np.all(S == 0.0, axis=(-2, -1)), 0.0, var)
    return PosteriorMoments(mean, var)


@dataclass(frozen=True)
class AncillaryParams:
    """Parameters of the discrepancy-plus-noise covariance.

    ``Sigma_e[i, j] = sigma_eps_sq * delta_ij + sigma_b_sq * exp(-lam * |x_i - x_j|)``.
    """

    sigma_eps_sq: float
    sigma_b_sq: float
    lam: float
    design_points: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.design_points, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "design_points", _frozen(x))
        if self.sigma_eps_sq <= 0 or self.sigma_b_sq < 0 or self.lam <= 0:
            raise ValueError("need sigma_eps_sq > 0, sigma_b_sq >= 0, lam > 0")

    def cov(self) -> np.ndarray:
        return ancillary_cov(self.sigma_eps_sq, self.sigma_b_sq, self.lam, self.design_points)


def ancillary_cov(sigma_eps_sq: float, sigma_b_sq: float, lam: float, x: np.ndarray) -> np.ndarray:
    dist = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    return sigma_eps_sq * np.eye(x.shape[0]) + sigma_b_sq * np.exp(-lam * dist)


DEFAULT_ANCILLARY_BOUNDS = {
    "sigma_eps_sq": (1e-6, 10.0),
    "sigma_b_sq": (0.0, 10.0),
    "lam": (1e-3, 100.0),
}


def fit_ancillary(data: Dataset, emu: PcgpEmulator, obs_data, design_points, bounds: Bounds,
                  seed=None, anc_bounds=None, fix_sigma_b: bool = False,
                  n_starts: int = 4) -> Tuple[AncillaryParams, np.ndarray]:
    """Maximum-likelihood estimate of the discrepancy covariance parameters.

    Maximizes ``N(y; mu(theta), Sigma_e + S(theta))`` jointly over the
    ancillary parameters and theta with L-BFGS-B from several starts: the
    training parameter whose output is closest to ``y`` plus seeded Latin
    hypercube draws.

    Returns:
        The fitted AncillaryParams and the maximizing theta.

    Raises:
        OptimFailure: If every start fails.
    """
    y = np.atleast_1d(np.asarray(obs_data, dtype=float))
    x = np.asarray(design_points, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{x.shape[0]} design points for {y.shape[0]} observations")
    box = dict(DEFAULT_ANCILLARY_BOUNDS, **(anc_bounds or {}))
    eps_lo, eps_hi = box["sigma_eps_sq"]
    b_lo, b_hi = (0.0, 0.0) if fix_sigma_b else box["sigma_b_sq"]
    lam_lo, lam_hi = box["lam"]

    lo = np.concatenate(([np.log(eps_lo), b_lo, np.log(lam_lo)], bounds.lower))
    hi = np.concatenate(([np.log(eps_hi), b_hi, np.log(lam_hi)], bounds.upper))

    def objective(v):
        theta = v[3:]
        pred = emu_predict(emu, theta)
        C = ancillary_cov(np.exp(v[0]), v[1], np.exp(v[2]), x) + pred.cov
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            return 1e10
        z = np.linalg.solve(L, y - pred.mean)
        return float(np.sum(np.log(np.diag(L))) + 0.5 * z @ z)

    resid = np.sum((data.outputs - y) ** 2, axis=1)
    best_idx = int(np.argmin(resid))
    first = np.concatenate((
        [np.clip(np.log(max(resid[best_idx] / y.shape[0], eps_lo)), lo[0], hi[0]),
         b_lo, 0.0 if lam_lo <= 1.0 <= lam_hi else np.log(lam_lo)],
        data.params[best_idx],
    ))
    starts = [np.clip(first, lo, hi)]
    if n_starts > 1:
        sampler = qmc.LatinHypercube(d=lo.shape[0], seed=np.random.default_rng(seed))
        span = np.where(hi > lo, hi, lo + 1.0)
        draws = qmc.scale(sampler.random(n_starts - 1), lo, span)
        starts.extend(np.minimum(draws, hi))

    best = None
    for k, x0 in enumerate(starts):
        try:
            res = spo.minimize(objective, x0, method="L-BFGS-B", bounds=list(zip(lo, hi)))
        except (ValueError, np.linalg.LinAlgError) as exc:
            logger.debug("ancillary start %d failed: %s", k, exc)
            continue
        if res.fun < 1e10 and (best is None or res.fun < best.fun):
            best = res

    if best is None:
        raise OptimFailure(f"all {len(starts)} ancillary likelihood starts failed")
    v = best.x
    params = AncillaryParams(float(np.exp(v[0])), float(max(v[1], 0.0)), float(np.exp(v[2])), x)
    logger.info("ancillary fit: sigma_eps_sq=%.4g sigma_b_sq=%.4g lam=%.4g",
                params.sigma_eps_sq, params.sigma_b_sq, params.lam)
    return params, np.array(v[3:])
