"""Built-in calibration problems and the adapter for external simulator processes.

Every problem bundles a simulator ``eta(theta)``, the observed data ``y``
with its covariance, the prior box and, for the synthetic functions, the
analytic unnormalized posterior used as ground truth.
"""

import itertools
import json
import logging
import math
import subprocess
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from jsonschema import Draft202012Validator

from .exceptions import (InputError, NonzeroExit, ProtocolViolation, SimulatorFailure,
                         SimulatorTimeout)
from .posterior import Bounds, ObsModel, Prior, mvn_logpdf

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parent / "data"


@dataclass(frozen=True)
class Problem:
    name: str
    bounds: Bounds
    obs: ObsModel
    simulator: Callable[[np.ndarray], np.ndarray]
    prior: Prior
    analytic: bool = True
    design_points: Optional[np.ndarray] = None
    duration: Dict[str, Any] = field(default_factory=lambda: {"kind": "constant", "value": 1.0})

    @property
    def p(self) -> int:
        return self.bounds.dim

    @property
    def d(self) -> int:
        return self.obs.d

    def evaluate(self, theta) -> np.ndarray:
        """Simulation output at one parameter vector.

        Raises:
            OutOfBounds: If theta lies outside the prior box.
        """
        t = self.bounds.check(np.ravel(np.asarray(theta, dtype=float)))
        return np.asarray(self.simulator(t[None, :]), dtype=float).reshape(self.d)

    def evaluate_many(self, thetas) -> np.ndarray:
        T = self.bounds.check(np.atleast_2d(thetas))
        return np.asarray(self.simulator(T), dtype=float).reshape(T.shape[0], self.d)

    def true_posterior(self, thetas):
        """Unnormalized posterior f(y; eta(theta), Sigma) p(theta)."""
        if not self.analytic:
            raise InputError(f"problem {self.name!r} has no analytic posterior")
        t = np.asarray(thetas, dtype=float)
        T = np.atleast_2d(t)
        eta = self.evaluate_many(T)
        out = np.exp(mvn_logpdf(np.broadcast_to(self.obs.data, eta.shape), eta, self.obs.cov))
        out = np.atleast_1d(out) * np.atleast_1d(self.prior.density(T))
        return float(out[0]) if t.ndim == 1 else out


def _box(lower, upper, p: int = None) -> Bounds:
    if p is not None:
        return Bounds(np.full(p, lower, dtype=float), np.full(p, upper, dtype=float))
    return Bounds(lower, upper)


def _quadratic_interaction(own: float, cross: float, include_self: bool):
    def simulator(T):
        total = T.sum(axis=1, keepdims=True)
        rest = total if include_self else total - T
        return own * T ** 2 + cross * T * rest
    return simulator


def banana() -> Problem:
    bounds = _box([-20.0, -10.0], [20.0, 5.0])
    sim = lambda T: np.column_stack((T[:, 0], T[:, 1] + 0.03 * T[:, 0] ** 2))
    return Problem("banana", bounds, ObsModel([0.0, 3.0], np.diag([100.0, 1.0])), sim, Prior(bounds))


def bimodal() -> Problem:
    bounds = _box([-6.0, -4.0], [6.0, 8.0])
    sim = lambda T: np.column_stack((T[:, 1] - T[:, 0] ** 2, T[:, 1] - T[:, 0]))
    sigma = np.diag([1.0 / math.sqrt(0.2), 1.0 / math.sqrt(0.75)])
    return Problem("bimodal", bounds, ObsModel([0.0, 2.0], sigma), sim, Prior(bounds))


def unimodal() -> Problem:
    bounds = _box(-4.0, 4.0, 2)
    sim = lambda T: (T[:, 0] ** 2 + T[:, 0] * T[:, 1] + T[:, 1] ** 2)[:, None]
    return Problem("unimodal", bounds, ObsModel([-6.0], [[4.0]]), sim, Prior(bounds))


def unidentifiable() -> Problem:
    bounds = _box(-8.0, 8.0, 2)
    return Problem("unidentifiable", bounds, ObsModel([0.0, 0.0], np.diag([100.0, 1.0])),
                   lambda T: T.copy(), Prior(bounds))


def quadratic_3d() -> Problem:
    bounds = _box(-4.0, 4.0, 3)
    return Problem("3d", bounds, ObsModel(np.zeros(3), 0.5 * np.eye(3)),
                   _quadratic_interaction(1.0, 0.5, include_self=False), Prior(bounds))


def quadratic_6d() -> Problem:
    bounds = _box(-4.0, 4.0, 6)
    return Problem("6d", bounds, ObsModel(np.zeros(6), 0.5 * np.eye(6)),
                   _quadratic_interaction(0.5, 0.5, include_self=True), Prior(bounds))


def quadratic_10d() -> Problem:
    bounds = _box(-2.0, 2.0, 10)
    return Problem("10d", bounds, ObsModel(np.zeros(10), 0.25 * np.eye(10)),
                   _quadratic_interaction(0.5, 0.5, include_self=True), Prior(bounds))


def sin_linear() -> Problem:
    bounds = _box([0.0], [10.0])
    sim = lambda T: np.sin(T) + 0.1 * T
    return Problem("sin_linear", bounds, ObsModel([0.0], [[1.0]]), sim, Prior(bounds))


def sin_steep() -> Problem:
    bounds = _box([-10.0], [10.0])
    sim = lambda T: np.sin(T) + 0.5 * T
    return Problem("sin_steep", bounds, ObsModel([-5.0], [[1.0]]), sim, Prior(bounds))


DISCREPANCY_X = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
DISCREPANCY_THETA = math.pi / 5.0
DISCREPANCY_SIGMA = 0.2


def discrepancy_bias(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return 1.0 - x / 3.0 - 2.0 * x ** 2 / 3.0


def discrepancy(seed: int = 0) -> Problem:
    """sin(10 x theta) observed with a smooth bias and noise; no analytic truth."""
    bounds = _box([0.0], [1.0])
    sim = lambda T: np.sin(10.0 * DISCREPANCY_X[None, :] * T)
    rng = np.random.default_rng(seed)
    expected = np.sin(10.0 * DISCREPANCY_X * DISCREPANCY_THETA) + discrepancy_bias(DISCREPANCY_X)
    y = expected + rng.normal(0.0, DISCREPANCY_SIGMA, size=DISCREPANCY_X.shape[0])
    obs = ObsModel(y, DISCREPANCY_SIGMA ** 2 * np.eye(DISCREPANCY_X.shape[0]))
    return Problem("discrepancy", bounds, obs, sim, Prior(bounds), analytic=False,
                   design_points=DISCREPANCY_X[:, None])


PRIOR_SENSITIVITY_MEAN = (1.0, 1.0)


def prior_sensitivity(sd: float = 1.0) -> Problem:
    bounds = _box(-2.0, 5.0, 2)
    sim = lambda T: (T[:, 0] ** 2 + T[:, 1] ** 2)[:, None]
    prior = Prior(bounds, kind="truncated-gaussian", mean=PRIOR_SENSITIVITY_MEAN, sd=sd)
    return Problem("prior_sensitivity", bounds, ObsModel([0.0], [[2.0]]), sim, prior)


@lru_cache(maxsize=1)
def _fresco_constants() -> Dict[str, Any]:
    with open(DATA_DIR / "fresco_like.json", encoding="utf-8") as fh:
        return json.load(fh)


def fresco_like_eta(T) -> np.ndarray:
    """Damped-sinusoid outputs (m x 15) at parameters (V, r, Ws)."""
    const = _fresco_constants()
    c = const["coefficients"]
    T = np.atleast_2d(np.asarray(T, dtype=float))
    x = np.asarray(const["angles"], dtype=float)[None, :] / 180.0
    V, r, Ws = T[:, [0]], T[:, [1]], T[:, [2]]
    depth = (V - 50.0) / 10.0
    amp = c["amplitude"] + c["amplitude_depth"] * depth + c["amplitude_width"] * (Ws - 3.5)
    wave = 1.0 + c["modulation"] * np.cos(c["frequency"] * r * x + c["phase_depth"] * depth)
    return amp * np.exp(-c["decay"] * r * x) * wave + c["tail"] * Ws * x


def fresco_like() -> Problem:
    const = _fresco_constants()
    bounds = Bounds.from_pairs(const["bounds"])
    d = len(const["angles"])
    y = fresco_like_eta(const["reference_theta"])[0] + np.asarray(const["noise"], dtype=float)
    obs = ObsModel(y, const["sigma_diag"] * np.eye(d))
    return Problem("fresco_like", bounds, obs, fresco_like_eta, Prior(bounds),
                   design_points=np.asarray(const["angles"], dtype=float)[:, None] / 180.0,
                   duration={"kind": "lognormal", "mu": 0.0, "sigma": 0.5})


PROBLEMS: Dict[str, Callable[..., Problem]] = {
    "banana": banana,
    "bimodal": bimodal,
    "unimodal": unimodal,
    "unidentifiable": unidentifiable,
    "3d": quadratic_3d,
    "6d": quadratic_6d,
    "10d": quadratic_10d,
    "sin_linear": sin_linear,
    "sin_steep": sin_steep,
    "discrepancy": discrepancy,
    "prior_sensitivity": prior_sensitivity,
    "fresco_like": fresco_like,
}


def get_problem(name: str, **options) -> Problem:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise InputError(f"unknown problem {name!r}; expected one of {sorted(PROBLEMS)}") from None
    return factory(**options)


@lru_cache(maxsize=None)
def _cached(name: str) -> Problem:
    return get_problem(name)


def eval_problem(name: str, theta) -> np.ndarray:
    return _cached(name).evaluate(theta)


def true_posterior(name: str, theta):
    return _cached(name).true_posterior(theta)


RESPONSE_SCHEMA = {
    "type": "object",
    "required": ["id"],
    "properties": {
        "id": {"type": "integer"},
        "eta": {"type": "array", "items": {"type": "number"}},
        "error": {"type": "string"},
    },
    "oneOf": [{"required": ["eta"]}, {"required": ["error"]}],
}
_RESPONSE_VALIDATOR = Draft202012Validator(RESPONSE_SCHEMA)


def external_simulate(command: Sequence[str], theta, timeout: float = 60.0, job_id: int = 0,
                      d: Optional[int] = None) -> np.ndarray:
    """Run one evaluation through a child process speaking line-delimited JSON.

    The child reads ``{"id": int, "theta": [...]}`` on stdin and answers with
    ``{"id": int, "eta": [...]}`` or ``{"id": int, "error": "..."}`` on stdout.

    Raises:
        SimulatorTimeout: If the child does not finish within ``timeout`` seconds.
        NonzeroExit: If the child exits with a non-zero status.
        ProtocolViolation: If the response is not a valid reply to this request.
        SimulatorFailure: If the child reports an error.
    """
    request = json.dumps({"id": int(job_id), "theta": [float(v) for v in np.ravel(theta)]}) + "\n"
    try:
        proc = subprocess.Popen(list(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                stderr=subprocess.PIPE, text=True, encoding="utf-8")
    except OSError as exc:
        raise NonzeroExit(f"cannot start simulator {command[0]!r}: {exc}") from exc
    try:
        out, err = proc.communicate(request, timeout=timeout)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.communicate()
        raise SimulatorTimeout(f"simulator did not answer job {job_id} within {timeout}s") from None

    if proc.returncode != 0:
        raise NonzeroExit(f"simulator exited with status {proc.returncode}: {err.strip()[:200]}")

    lines = [ln for ln in out.splitlines() if ln.strip()]
    if not lines:
        raise ProtocolViolation(f"simulator wrote no response for job {job_id}")
    try:
        msg = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ProtocolViolation(f"malformed response line: {lines[0][:120]!r}") from exc
    errors = sorted(_RESPONSE_VALIDATOR.iter_errors(msg), key=lambda e: list(e.path))
    if errors:
        raise ProtocolViolation(f"invalid response: {errors[0].message}")
    if msg["id"] != int(job_id):
        raise ProtocolViolation(f"response id {msg['id']} does not match request id {job_id}")
    if "error" in msg:
        raise SimulatorFailure(f"simulator reported: {msg['error']}")

    eta = np.asarray(msg["eta"], dtype=float)
    if d is not None and eta.shape[0] != d:
        raise ProtocolViolation(f"expected {d} outputs, got {eta.shape[0]}")
    if not np.all(np.isfinite(eta)):
        raise ProtocolViolation("response contains non-finite outputs")
    return eta


class ExternalSimulator:
    """Vectorized simulator callable backed by a child-process command."""

    def __init__(self, command: Sequence[str], d: int, timeout: float = 60.0):
        self.command = list(command)
        self.d = d
        self.timeout = timeout
        self._ids = itertools.count()

    def __call__(self, T) -> np.ndarray:
        rows: List[np.ndarray] = []
        for theta in np.atleast_2d(T):
            rows.append(external_simulate(self.command, theta, self.timeout, next(self._ids), self.d))
        return np.vstack(rows)


def external_problem(spec: Dict[str, Any]) -> Problem:
    """Problem evaluated by an external command, as described in an experiment config."""
    from .simulators import bundled_command

    command = spec.get("command")
    if command is None:
        command = bundled_command(spec["bundled"], *[str(a) for a in spec.get("args", [])])
    bounds = Bounds.from_pairs(spec["bounds"])
    y = np.asarray(spec["data"], dtype=float)
    sigma = np.asarray(spec["sigma"], dtype=float)
    sigma = np.diag(sigma) if sigma.ndim == 1 else sigma
    sim = ExternalSimulator(command, y.shape[0], float(spec.get("timeout", 60.0)))
    return Problem(spec.get("name", "external"), bounds, ObsModel(y, sigma), sim, Prior(bounds),
                   analytic=False)
