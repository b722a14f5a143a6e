"""Principal-component GP emulator for vector-valued simulation outputs.

Outputs are centered and scaled per coordinate, projected onto an
orthonormal PCA basis and each retained score is modeled by an independent
GP from :mod:`app.gp`.  With ``G = diag(scale)`` the predictive distribution
of the output at theta is ``N(h + G B m(theta), G B C(theta) B^T G)``.
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import gp
from .exceptions import DegenerateData, DimensionMismatch, InputError

logger = logging.getLogger(__name__)

SCALE_FLOOR = 1e-12
DEFAULT_GAMMA = 0.995


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """Completed evaluations plus parameters acquired but not yet evaluated."""

    params: np.ndarray
    outputs: np.ndarray
    pending: Tuple[np.ndarray, ...] = field(default_factory=tuple)

    def __post_init__(self):
        params = np.atleast_2d(np.asarray(self.params, dtype=float))
        outputs = np.asarray(self.outputs, dtype=float)
        if outputs.ndim == 1:
            outputs = outputs[:, None]
        if params.shape[0] != outputs.shape[0]:
            raise DimensionMismatch(
                f"{params.shape[0]} parameter rows but {outputs.shape[0]} output rows"
            )
        if not np.all(np.isfinite(outputs)):
            raise InputError("simulation outputs contain non-finite values")
        pending = tuple(_frozen(np.ravel(t)) for t in self.pending)
        for t in pending:
            if t.shape[0] != params.shape[1]:
                raise DimensionMismatch(f"pending parameter of length {t.shape[0]}, expected {params.shape[1]}")
        object.__setattr__(self, "params", _frozen(params))
        object.__setattr__(self, "outputs", _frozen(outputs))
        object.__setattr__(self, "pending", pending)

    @property
    def n(self) -> int:
        return int(self.params.shape[0])

    @property
    def p(self) -> int:
        return int(self.params.shape[1])

    @property
    def d(self) -> int:
        return int(self.outputs.shape[1])

    def pending_array(self) -> np.ndarray:
        if not self.pending:
            return np.empty((0, self.p))
        return np.vstack(self.pending)

    def with_pending(self, theta) -> "Dataset":
        return Dataset(self.params, self.outputs, self.pending + (np.ravel(theta),))


@dataclass(frozen=True)
class EmulatorPrediction:
    """Emulator output at one or many parameters.

    ``mean`` has shape ``(..., d)`` and ``latent_vars`` ``(..., q)``; ``factor``
    is ``G B`` so that ``cov = factor diag(latent_vars) factor^T``.
    """

    mean: np.ndarray
    latent_vars: np.ndarray
    factor: np.ndarray

    @property
    def cov(self) -> np.ndarray:
        return np.einsum("dq,...q,eq->...de", self.factor, self.latent_vars, self.factor)

    def cov_with(self, latent_vars) -> np.ndarray:
        return np.einsum("dq,...q,eq->...de", self.factor, latent_vars, self.factor)


@dataclass(frozen=True)
class PcgpEmulator:
    center: np.ndarray
    scale: np.ndarray
    basis: np.ndarray
    gps: Tuple[gp.GpState, ...]

    @property
    def q(self) -> int:
        return int(self.basis.shape[1])

    @property
    def d(self) -> int:
        return int(self.basis.shape[0])

    @property
    def p(self) -> int:
        return self.gps[0].dim

    @property
    def factor(self) -> np.ndarray:
        return self.scale[:, None] * self.basis

    def standardize(self, outputs) -> np.ndarray:
        return (np.asarray(outputs, dtype=float) - self.center) / self.scale

    def project(self, outputs) -> np.ndarray:
        """Latent scores of raw outputs: B^T ((eta - h) / s)."""
        return self.standardize(outputs) @ self.basis

    def back_transform(self, scores) -> np.ndarray:
        return self.center + self.scale * (np.asarray(scores, dtype=float) @ self.basis.T)


def choose_q(singular_values: np.ndarray, gamma: float = DEFAULT_GAMMA, cap: Optional[int] = None) -> int:
    """Smallest number of components whose share of variance reaches ``gamma``."""
    energy = np.asarray(singular_values, dtype=float) ** 2
    cap = energy.shape[0] if cap is None else min(cap, energy.shape[0])
    total = energy.sum()
    if total <= 0.0:
        return 1
    share = np.cumsum(energy) / total
    q = int(np.searchsorted(share, gamma - 1e-12) + 1)
    return max(1, min(q, cap))


def _orient(basis: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column positive
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def emu_fit(data: Dataset, q: Optional[int] = None, gamma: float = DEFAULT_GAMMA,
            seed=None, init: Optional[Sequence[gp.KernelParams]] = None,
            workers: int = 1) -> PcgpEmulator:
    """Fit the PCGP emulator to the completed evaluations in ``data``.

    Args:
        data: Completed evaluations (pending parameters are ignored).
        q: Explicit number of components; ``None`` applies the ``gamma`` rule.
        gamma: Variance fraction the retained components must explain.
        seed: Seed or SeedSequence; each component GP gets a spawned child.
        init: Optional per-component starting hyperparameters.
        workers: Number of component GPs fitted concurrently.

    Returns:
        A fitted PcgpEmulator.

    Raises:
        InputError: If fewer than two evaluations are available or q is out of range.
        DegenerateData: If every output coordinate is constant.
    """
    if data.n < 2:
        raise InputError(f"emulator needs at least two evaluations, got {data.n}")

    raw_scale = data.outputs.std(axis=0)
    if np.all(raw_scale <= SCALE_FLOOR):
        raise DegenerateData("all simulation outputs are identical")
    center = data.outputs.mean(axis=0)
    scale = np.maximum(raw_scale, SCALE_FLOOR)
    Z = (data.outputs - center) / scale

    U, S, _ = np.linalg.svd(Z.T, full_matrices=False)
    cap = min(data.d, data.n)
    if q is None:
        q = choose_q(S, gamma, cap)
    elif not 1 <= q <= cap:
        raise InputError(f"q must lie in [1, {cap}], got {q}")
    basis = _orient(U[:, :q])
    scores = Z @ basis

    children = np.random.SeedSequence(seed).spawn(q) if not isinstance(seed, np.random.SeedSequence) \
        else seed.spawn(q)
    starts = list(init) if init is not None and len(init) == q else [None] * q

    gps = [None] * q
    if workers > 1 and q > 1:
        with ThreadPoolExecutor(max_workers=min(workers, q)) as ex:
            futures = {
                ex.submit(gp.gp_fit, data.params, scores[:, j], starts[j], False, children[j]): j
                for j in range(q)
            }
            for f in as_completed(futures):
                gps[futures[f]] = f.result()
    else:
        for j in range(q):
            gps[j] = gp.gp_fit(data.params, scores[:, j], init=starts[j], seed=children[j])

    logger.debug("PCGP fit: n=%d d=%d q=%d", data.n, data.d, q)
    return PcgpEmulator(_frozen(center), _frozen(scale), _frozen(basis), tuple(gps))


def emu_predict(emu: PcgpEmulator, query) -> EmulatorPrediction:
    q = np.asarray(query, dtype=float)
    if q.shape[-1] != emu.p:
        raise DimensionMismatch(f"query has {q.shape[-1]} entries, emulator expects {emu.p}")
    Q = np.atleast_2d(q)
    m = np.empty((Q.shape[0], emu.q))
    v = np.empty((Q.shape[0], emu.q))
    for j, state in enumerate(emu.gps):
        m[:, j], v[:, j] = gp.gp_predict(state, Q)
    mean = emu.back_transform(m)
    if q.ndim == 1:
        return EmulatorPrediction(mean[0], v[0], emu.factor)
    return EmulatorPrediction(mean, v, emu.factor)


def emu_fantasy(emu: PcgpEmulator, candidate, queries) -> np.ndarray:
    """Latent variance reductions (m x q) at ``queries`` from evaluating ``candidate``.

    ``phi(theta, theta*) = G B diag(row) B^T G`` for each returned row.
    """
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    out = np.empty((Q.shape[0], emu.q))
    for j, state in enumerate(emu.gps):
        out[:, j], _ = gp.gp_fantasy(state, candidate, Q)
    return out


def _append(emu: PcgpEmulator, theta, scores) -> PcgpEmulator:
    gps = tuple(gp.gp_append(state, theta, scores[j]) for j, state in enumerate(emu.gps))
    return PcgpEmulator(emu.center, emu.scale, emu.basis, gps)


def emu_believe(emu: PcgpEmulator, new_param) -> PcgpEmulator:
    """Kriging believer: condition on the emulator's own mean at ``new_param``."""
    theta = np.ravel(np.asarray(new_param, dtype=float))
    scores = [gp.gp_predict(state, theta)[0] for state in emu.gps]
    return _append(emu, theta, scores)


def emu_liar(emu: PcgpEmulator, new_param, lie) -> PcgpEmulator:
    """Constant liar: condition on the pseudo-output ``lie`` at ``new_param``."""
    lie = np.ravel(np.asarray(lie, dtype=float))
    if lie.shape[0] != emu.d:
        raise DimensionMismatch(f"lie has {lie.shape[0]} entries, emulator outputs {emu.d}")
    theta = np.ravel(np.asarray(new_param, dtype=float))
    return _append(emu, theta, emu.project(lie))
