"""Acquisition criteria scored over a candidate set.

EIVAR and IMSE are minimized; MAXVAR, MAXEXP and EI are maximized; RND
draws uniformly.  Ties resolve to the lowest candidate index.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from . import gp
from .emulator import Dataset, PcgpEmulator, emu_fantasy, emu_predict
from .exceptions import EmptyCandidates, EmptyHistory, UnsupportedDimension
from .posterior import (ObsModel, PosteriorMoments, Prior, gaussian_log_terms,
                        log_variance_constant, mvn_logpdf, post_mean_var)

logger = logging.getLogger(__name__)

KINDS = ("eivar", "maxvar", "maxexp", "ei", "imse", "rnd")
MINIMIZED = ("eivar", "imse")


@dataclass(frozen=True)
class PosteriorSurrogate:
    """Single-output GP fitted directly to evaluated posterior values (used by EI)."""

    gp: gp.GpState
    offset: float
    spread: float
    p_max: float

    def predict(self, theta) -> Tuple[np.ndarray, np.ndarray]:
        m, v = gp.gp_predict(self.gp, np.atleast_2d(theta))
        return self.offset + self.spread * m, self.spread * np.sqrt(v)


def evaluated_posterior(history: Dataset, obs: ObsModel, prior: Prior) -> np.ndarray:
    logf = np.array([mvn_logpdf(obs.data, eta, obs.cov) for eta in history.outputs])
    return np.exp(logf) * prior.density(history.params)


def build_surrogate(history: Dataset, obs: ObsModel, prior: Prior, seed=None) -> PosteriorSurrogate:
    targets = evaluated_posterior(history, obs, prior)
    offset = float(targets.mean())
    spread = float(targets.std()) or 1.0
    state = gp.gp_fit(history.params, (targets - offset) / spread, seed=seed)
    return PosteriorSurrogate(state, offset, spread, float(targets.max()))


@dataclass
class AcquisitionContext:
    emulator: PcgpEmulator
    obs: ObsModel
    prior: Prior
    candidates: np.ndarray
    reference: np.ndarray
    history: Dataset
    seed: Optional[int] = None

    @cached_property
    def reference_prediction(self):
        return emu_predict(self.emulator, self.reference)

    @cached_property
    def reference_prior(self) -> np.ndarray:
        return np.atleast_1d(self.prior.density(self.reference))

    @cached_property
    def candidate_moments(self) -> PosteriorMoments:
        pred = emu_predict(self.emulator, self.candidates)
        return post_mean_var(pred, self.obs, self.prior.density(self.candidates))

    @cached_property
    def reference_first_term(self) -> np.ndarray:
        # candidate-independent part of the expected variance, per reference point
        pred = self.reference_prediction
        _, log_f = gaussian_log_terms(self.obs.data - pred.mean, 0.5 * self.obs.cov + pred.cov)
        return np.exp(log_variance_constant(self.obs.d, self.obs.logdet) + log_f)

    @cached_property
    def surrogate(self) -> PosteriorSurrogate:
        return build_surrogate(self.history, self.obs, self.prior, seed=self.seed)


def eivar_score(ctx: AcquisitionContext, candidate_index: int) -> float:
    """Expected integrated variance of the posterior after evaluating one candidate."""
    pred = ctx.reference_prediction
    reduction = np.minimum(emu_fantasy(ctx.emulator, ctx.candidates[candidate_index], ctx.reference),
                           pred.latent_vars)
    S_plus_phi = pred.cov_with(pred.latent_vars + reduction)
    S_minus_phi = pred.cov_with(pred.latent_vars - reduction)
    Sigma = ctx.obs.cov
    resid = ctx.obs.data - pred.mean

    logdet, _ = gaussian_log_terms(resid, Sigma + S_minus_phi)
    _, log_f = gaussian_log_terms(resid, 0.5 * (Sigma + S_plus_phi))
    second = np.exp(log_variance_constant(ctx.obs.d, 0.0) - 0.5 * logdet + log_f)

    terms = np.maximum(ctx.reference_first_term - second, 0.0) * ctx.reference_prior ** 2
    return float(np.mean(terms))


def maxvar_score(ctx: AcquisitionContext, candidate_index: int) -> float:
    return float(ctx.candidate_moments.var[candidate_index])


def _diversity(ctx: AcquisitionContext) -> np.ndarray:
    seen = np.vstack((ctx.history.params, ctx.history.pending_array()))
    if seen.shape[0] == 0:
        raise EmptyHistory("MAXEXP needs at least one evaluated or pending parameter")
    bounds = ctx.prior.bounds
    u_cand = bounds.to_unit(ctx.candidates)
    u_seen = bounds.to_unit(seen)
    dist = np.linalg.norm(u_cand[:, None, :] - u_seen[None, :, :], axis=-1)
    return dist.min(axis=1)


def maxexp_score(ctx: AcquisitionContext, candidate_index: int) -> float:
    return float(ctx.candidate_moments.mean[candidate_index] * _diversity(ctx)[candidate_index])


def ei_value(mean, sd, p_max: float):
    """Expected improvement of N(mean, sd^2) over ``p_max``."""
    m = np.asarray(mean, dtype=float)
    s = np.asarray(sd, dtype=float)
    gain = m - p_max
    safe = np.where(s > 1e-12, s, 1.0)
    z = gain / safe
    out = np.where(s > 1e-12, gain * norm.cdf(z) + s * norm.pdf(z), np.maximum(gain, 0.0))
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def ei_score(surrogate: PosteriorSurrogate, history: Dataset, candidate) -> float:
    m, s = surrogate.predict(candidate)
    return float(ei_value(m[0], s[0], surrogate.p_max))


def imse_score(ctx: AcquisitionContext, candidate_index: int) -> float:
    """Integrated latent variance over the reference set after evaluating one candidate."""
    if ctx.obs.d != 1:
        raise UnsupportedDimension(f"IMSE is defined for scalar outputs only, got d={ctx.obs.d}")
    current = ctx.reference_prediction.latent_vars
    reduction = emu_fantasy(ctx.emulator, ctx.candidates[candidate_index], ctx.reference)
    return float(np.sum(np.maximum(current - reduction, 0.0)))


def score_candidates(ctx: AcquisitionContext, kind: str,
                     indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Scores of ``kind`` for the given candidate indices (all by default)."""
    kind = kind.lower()
    idx = range(ctx.candidates.shape[0]) if indices is None else indices
    if kind == "eivar":
        return np.array([eivar_score(ctx, i) for i in idx])
    if kind == "imse":
        return np.array([imse_score(ctx, i) for i in idx])
    if kind == "maxvar":
        return np.asarray(ctx.candidate_moments.var)[list(idx)]
    if kind == "maxexp":
        return (np.asarray(ctx.candidate_moments.mean) * _diversity(ctx))[list(idx)]
    if kind == "ei":
        m, s = ctx.surrogate.predict(ctx.candidates[list(idx)])
        return np.atleast_1d(ei_value(m, s, ctx.surrogate.p_max))
    if kind == "rnd":
        return np.zeros(len(idx))
    raise ValueError(f"unknown acquisition {kind!r}; expected one of {KINDS}")


def select(ctx: AcquisitionContext, kind: str, rng: Optional[np.random.Generator] = None,
           exclude: Sequence[int] = ()) -> Tuple[int, float]:
    """Index of the best candidate not in ``exclude`` and its score.

    Raises:
        EmptyCandidates: If no candidate is available.
    """
    kind = kind.lower()
    allowed = np.setdiff1d(np.arange(ctx.candidates.shape[0]), np.asarray(exclude, dtype=int))
    if allowed.size == 0:
        raise EmptyCandidates("no candidates left to select from")

    if kind == "rnd":
        rng = rng if rng is not None else np.random.default_rng(ctx.seed)
        return int(allowed[rng.integers(allowed.size)]), 0.0

    scores = score_candidates(ctx, kind, allowed)
    pos = int(np.argmin(scores)) if kind in MINIMIZED else int(np.argmax(scores))
    logger.debug("%s selected candidate %d (score %.6g)", kind, allowed[pos], scores[pos])
    return int(allowed[pos]), float(scores[pos])
