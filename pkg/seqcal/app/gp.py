"""Single-output Gaussian-process regression with a separable Matérn-1.5 kernel.

The kernel is ``k(x, x') = tau2 * R(x, x')`` where ``R`` is the product over
dimensions of ``(1 + a) exp(-a)`` with ``a = |x_l - x'_l| * exp(zeta_l)``.
The nugget ``upsilon`` lives on the correlation scale, so the training
covariance is ``tau2 * (R + upsilon * I)`` and the observation noise of a
(pseudo-)evaluation is ``tau2 * upsilon``.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple, Union

import numpy as np
import scipy.linalg as spla
import scipy.optimize as spo
from scipy.stats import qmc

from .exceptions import CholeskyFailure, DimensionMismatch

logger = logging.getLogger(__name__)

NUGGET_FLOOR = 1e-8
NUGGET_CEILING = 1e-2
N_STARTS = 4

_LOG_2PI = float(np.log(2.0 * np.pi))

SeedLike = Union[None, int, np.random.Generator, np.random.SeedSequence]


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class KernelParams:
    """Log-scale hyperparameters of one GP.

    ``log_lengthscales`` holds zeta, the log of the per-dimension rate: the
    correlation decays as ``exp(-exp(zeta) * |delta|)``.
    """

    log_scale: float
    log_lengthscales: np.ndarray
    log_nugget: float

    def __post_init__(self):
        object.__setattr__(self, "log_scale", float(self.log_scale))
        object.__setattr__(self, "log_nugget", float(self.log_nugget))
        object.__setattr__(self, "log_lengthscales", _frozen(np.atleast_1d(self.log_lengthscales)))
        if not (np.isfinite(self.log_scale) and np.isfinite(self.log_nugget)
                and np.all(np.isfinite(self.log_lengthscales))):
            raise ValueError("kernel parameters must be finite")

    @property
    def scale(self) -> float:
        return float(np.exp(self.log_scale))

    @property
    def nugget(self) -> float:
        return float(np.exp(self.log_nugget))

    @property
    def dim(self) -> int:
        return int(self.log_lengthscales.shape[0])

    def to_vector(self) -> np.ndarray:
        return np.concatenate(([self.log_scale], self.log_lengthscales, [self.log_nugget]))

    @classmethod
    def from_vector(cls, vec) -> "KernelParams":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[0], vec[1:-1], vec[-1])


@dataclass(frozen=True)
class GpState:
    train_inputs: np.ndarray
    train_targets: np.ndarray
    params: KernelParams
    chol_factor: np.ndarray
    alpha: np.ndarray

    @property
    def n(self) -> int:
        return int(self.train_inputs.shape[0])

    @property
    def dim(self) -> int:
        return int(self.train_inputs.shape[1])

    @property
    def noise_var(self) -> float:
        return self.params.scale * self.params.nugget


def matern15(delta, log_lengthscales) -> float:
    a = np.abs(np.asarray(delta, dtype=float)) * np.exp(np.asarray(log_lengthscales, dtype=float))
    return float(np.prod((1.0 + a) * np.exp(-a)))


def correlation(x1: np.ndarray, x2: np.ndarray, log_lengthscales, return_grad: bool = False):
    """Matérn-1.5 correlation matrix between the rows of ``x1`` and ``x2``.

    With ``return_grad`` also returns dR/dzeta as an ``(n1, n2, p)`` array.
    """
    a = np.abs(x1[:, None, :] - x2[None, :, :]) * np.exp(np.asarray(log_lengthscales))[None, None, :]
    R = np.prod((1.0 + a) * np.exp(-a), axis=2)
    if not return_grad:
        return R
    dR = R[:, :, None] * (-(a ** 2) / (1.0 + a))
    return R, dR


def _as_inputs(inputs, dim: Optional[int] = None) -> np.ndarray:
    X = np.asarray(inputs, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if dim in (None, 1) else X[None, :]
    if X.ndim != 2:
        raise DimensionMismatch(f"inputs must be a 2-d array, got shape {X.shape}")
    if dim is not None and X.shape[1] != dim:
        raise DimensionMismatch(f"expected {dim} input columns, got {X.shape[1]}")
    return X


def _factorize(inputs: np.ndarray, params: KernelParams, escalate: bool = True):
    n = inputs.shape[0]
    R = correlation(inputs, inputs, params.log_lengthscales)
    nugget = params.nugget
    while True:
        K = params.scale * (R + nugget * np.eye(n))
        try:
            L = spla.cholesky(K, lower=True)
            break
        except np.linalg.LinAlgError:
            if not escalate or nugget * 10.0 > NUGGET_CEILING * (1.0 + 1e-9):
                raise CholeskyFailure(
                    f"kernel matrix of {n} points is not positive definite (nugget={nugget:.3g})"
                )
            logger.warning("Cholesky failed at nugget %.3g; escalating to %.3g", nugget, nugget * 10.0)
            nugget *= 10.0
    if nugget != params.nugget:
        params = replace(params, log_nugget=float(np.log(nugget)))
    return L, params


def gp_state(inputs, targets, params: KernelParams) -> GpState:
    """Condition a GP with fixed hyperparameters on (inputs, targets)."""
    X = _as_inputs(inputs, params.dim)
    y = np.asarray(targets, dtype=float).ravel()
    if y.shape[0] != X.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    L, params = _factorize(X, params)
    alpha = spla.cho_solve((L, True), y)
    return GpState(_frozen(X), _frozen(y), params, _frozen(L), _frozen(alpha))


def gp_loglik(state: GpState) -> float:
    y = state.train_targets
    return float(-0.5 * y @ state.alpha
                 - np.sum(np.log(np.diag(state.chol_factor)))
                 - 0.5 * state.n * _LOG_2PI)


def gp_loglik_grad(state: GpState) -> np.ndarray:
    """Gradient of the log marginal likelihood wrt (log_scale, zeta, log_nugget)."""
    p = state.params
    n = state.n
    Kinv = spla.cho_solve((state.chol_factor, True), np.eye(n))
    A = np.outer(state.alpha, state.alpha) - Kinv
    R, dR = correlation(state.train_inputs, state.train_inputs, p.log_lengthscales, return_grad=True)
    K = p.scale * (R + p.nugget * np.eye(n))

    grad = np.empty(p.dim + 2)
    grad[0] = 0.5 * np.sum(A * K)
    grad[1:-1] = 0.5 * p.scale * np.einsum("ij,ijl->l", A, dR)
    grad[-1] = 0.5 * p.scale * p.nugget * np.trace(A)
    return grad


def hyperparameter_box(inputs: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Search box for (log tau2, zeta, log upsilon) derived from the data spread."""
    log_var = float(np.log(max(float(np.var(targets)), 1e-8)))
    if inputs.shape[0] > 1:
        spread = np.maximum(np.ptp(inputs, axis=0), 1e-8)
    else:
        spread = np.ones(inputs.shape[1])
    lo = np.concatenate(([log_var - 4.0], -np.log(spread) - 3.0, [np.log(NUGGET_FLOOR)]))
    hi = np.concatenate(([log_var + 4.0], -np.log(spread) + 4.0, [np.log(NUGGET_CEILING)]))
    return lo, hi


def _negative_evidence(vec: np.ndarray, X: np.ndarray, y: np.ndarray):
    params = KernelParams.from_vector(vec)
    try:
        L, _ = _factorize(X, params, escalate=False)
    except CholeskyFailure:
        return 1e10, np.zeros_like(vec)
    state = GpState(X, y, params, L, spla.cho_solve((L, True), y))
    return -gp_loglik(state), -gp_loglik_grad(state)


def gp_fit(inputs, targets, init: Optional[KernelParams] = None, fixed: bool = False,
           seed: SeedLike = None, n_starts: int = N_STARTS) -> GpState:
    """Fit a zero-mean GP.

    With ``fixed`` the state is built at ``init``. Otherwise the log marginal
    likelihood is maximized by L-BFGS-B from ``n_starts`` seeded Latin
    hypercube starts (the first replaced by ``init`` when given).
    """
    y = np.asarray(targets, dtype=float).ravel()
    X = _as_inputs(inputs, None if init is None else init.dim)
    if X.shape[0] < 1:
        raise ValueError("gp_fit needs at least one training point")
    if y.shape[0] != X.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} inputs but {y.shape[0]} targets")

    if fixed:
        if init is None:
            raise ValueError("fixed=True requires init parameters")
        return gp_state(X, y, init)

    lo, hi = hyperparameter_box(X, y)
    sampler = qmc.LatinHypercube(d=lo.shape[0], seed=np.random.default_rng(seed))
    starts = qmc.scale(sampler.random(n_starts), lo, hi)
    if init is not None:
        starts[0] = np.clip(init.to_vector(), lo, hi)

    best = None
    for k, x0 in enumerate(starts):
        try:
            res = spo.minimize(_negative_evidence, x0, args=(X, y), jac=True, method="L-BFGS-B",
                               bounds=spo.Bounds(lo, hi),
                               options={"gtol": 1e-8, "ftol": 1e-15, "maxiter": 1000})
        except (ValueError, np.linalg.LinAlgError) as exc:
            logger.debug("GP start %d failed: %s", k, exc)
            continue
        logger.debug("GP start %d: -loglik=%.6g (%s)", k, res.fun, res.message)
        if res.fun < 1e10 and (best is None or res.fun < best.fun):
            best = res

    if best is None:
        raise CholeskyFailure(f"all {n_starts} hyperparameter starts failed on {X.shape[0]} points")
    return gp_state(X, y, KernelParams.from_vector(best.x))


def gp_predict(state: GpState, query):
    """Predictive mean and latent variance at one query (floats) or many (arrays)."""
    q = np.asarray(query, dtype=float)
    single = q.ndim == 1
    Q = q[None, :] if single else q
    if Q.shape[1] != state.dim:
        raise DimensionMismatch(f"query has {Q.shape[1]} columns, GP has {state.dim}")
    p = state.params
    k = p.scale * correlation(Q, state.train_inputs, p.log_lengthscales)
    mean = k @ state.alpha
    V = spla.solve_triangular(state.chol_factor, k.T, lower=True)
    var = np.maximum(p.scale - np.sum(V ** 2, axis=0), 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def _fantasy_terms(state: GpState, new_input, queries):
    x_new = np.asarray(new_input, dtype=float).ravel()
    Q = _as_inputs(queries, state.dim)
    if x_new.shape[0] != state.dim:
        raise DimensionMismatch(f"new input has {x_new.shape[0]} entries, GP has {state.dim}")
    p = state.params
    X = state.train_inputs
    kq = p.scale * correlation(Q, X, p.log_lengthscales)
    ks = p.scale * correlation(x_new[None, :], X, p.log_lengthscales)[0]
    Vq = spla.solve_triangular(state.chol_factor, kq.T, lower=True)
    vs = spla.solve_triangular(state.chol_factor, ks, lower=True)

    cov = p.scale * correlation(Q, x_new[None, :], p.log_lengthscales)[:, 0] - Vq.T @ vs
    var_new = max(p.scale - float(vs @ vs), 0.0)
    var_q = np.maximum(p.scale - np.sum(Vq ** 2, axis=0), 0.0)
    return cov, var_new, var_q


def gp_fantasy(state: GpState, new_input, queries) -> Tuple[np.ndarray, float]:
    """Variance reductions at ``queries`` from one more evaluation at ``new_input``.

    Returns ``cov(q, x*)^2 / (var(x*) + noise)`` per query and ``var(x*)``.
    """
    cov, var_new, var_q = _fantasy_terms(state, new_input, queries)
    reduction = cov ** 2 / (var_new + state.noise_var)
    return np.minimum(reduction, var_q), var_new


def gp_fantasy_gain(state: GpState, new_input, queries) -> Tuple[np.ndarray, float]:
    """Kalman gain of the mean update: m'(q) = m(q) + gain * (w* - m(x*))."""
    cov, var_new, _ = _fantasy_terms(state, new_input, queries)
    return cov / (var_new + state.noise_var), var_new


def gp_append(state: GpState, new_input, new_target: float) -> GpState:
    """Condition on one more pair with hyperparameters frozen (rank-one Cholesky extension)."""
    x_new = np.asarray(new_input, dtype=float).ravel()
    if x_new.shape[0] != state.dim:
        raise DimensionMismatch(f"new input has {x_new.shape[0]} entries, GP has {state.dim}")
    p = state.params
    ks = p.scale * correlation(x_new[None, :], state.train_inputs, p.log_lengthscales)[0]
    l = spla.solve_triangular(state.chol_factor, ks, lower=True)
    d2 = p.scale * (1.0 + p.nugget) - float(l @ l)
    if d2 <= 0.0:
        logger.warning("rank-one extension lost positivity (%.3g); flooring at the noise variance", d2)
        d2 = state.noise_var

    n = state.n
    L = np.zeros((n + 1, n + 1))
    L[:n, :n] = state.chol_factor
    L[n, :n] = l
    L[n, n] = np.sqrt(d2)
    X = np.vstack((state.train_inputs, x_new[None, :]))
    y = np.append(state.train_targets, float(new_target))
    alpha = spla.cho_solve((L, True), y)
    return GpState(_frozen(X), _frozen(y), p, _frozen(L), _frozen(alpha))
