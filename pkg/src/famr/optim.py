"""Anchored gradient descent on forget loss + (lam/2)||theta - theta0||^2."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Protocol

import numpy as np

from .losses import LossWeights
from .nn import ParamVector, as_array

log = logging.getLogger(__name__)

TRACE_FIELDS = (
    "step",
    "forget_loss",
    "anchor_value",
    "objective",
    "grad_norm_forget",
    "grad_norm_anchor",
    "stationarity_residual",
    "param_distance_to_theta0",
)


class ForgetLoss(Protocol):
    n: int

    def value_and_grad(self, theta: np.ndarray, idx=None) -> tuple[float, np.ndarray]: ...


class FamrDivergence(FloatingPointError):
    """Raised when a step produces a non-finite loss, gradient or iterate.

    ``trace`` holds every row recorded before the failure and ``theta`` the
    last finite iterate.
    """

    def __init__(self, msg, step, trace, theta):
        super().__init__(msg)
        self.step = step
        self.trace = trace
        self.theta = theta


@dataclass(frozen=True)
class FamrConfig:
    lam: float = 0.1
    eta: float = 1e-4
    iters: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int | None = None  # None = full forget set every step
    seed: int = 0
    record_every: int = 1
    residual_tol: float | None = None

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.iters < 0:
            raise ValueError("iters must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive or None (full batch)")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")


@dataclass
class OptTrace:
    rows: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    @property
    def fields(self) -> list[str]:
        return list(self.rows[0]) if self.rows else list(TRACE_FIELDS)


class QuadraticForgetLoss:
    """Surrogate forget loss 0.5 (theta - a)^T A (theta - a) with a closed-form optimum."""

    n = 1

    def __init__(self, A, a):
        A = np.asarray(A, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64).ravel()
        if A.shape != (a.size, a.size):
            raise ValueError("A must be square and match a")
        self.A = 0.5 * (A + A.T)
        self.a = a

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.eigvalsh(self.A).max())

    def value_and_grad(self, theta, idx=None):
        r = np.asarray(theta, dtype=np.float64) - self.a
        Ar = self.A @ r
        return 0.5 * float(r @ Ar), Ar

    def value(self, theta, idx=None):
        return self.value_and_grad(theta)[0]

    def gradient(self, theta, idx=None):
        return self.value_and_grad(theta)[1]

    def anchored_minimizer(self, theta0, lam: float) -> np.ndarray:
        """(A + lam I)^{-1} (A a + lam theta0)."""
        n = self.a.size
        return np.linalg.solve(self.A + lam * np.eye(n), self.A @ self.a + lam * np.asarray(theta0))


def famr_step(params, theta0, loss: ForgetLoss, cfg: FamrConfig, idx=None) -> np.ndarray:
    """One update theta - eta * (g_forget + lam (theta - theta0)) on the batch ``idx``."""
    theta = as_array(params)
    ref = as_array(theta0)
    if theta.shape != ref.shape:
        raise ValueError("theta and theta0 differ in length")
    value, g = loss.value_and_grad(theta, idx)
    if not (np.isfinite(value) and np.all(np.isfinite(g))):
        raise FamrDivergence("non-finite forget loss or gradient", None, None, theta)
    return theta - cfg.eta * (g + cfg.lam * (theta - ref))


def stationarity_residual(params, theta0, loss: ForgetLoss, lam: float) -> float:
    """||grad L_forget(theta) + lam (theta - theta0)|| on the full forget set."""
    theta = as_array(params)
    _, g = loss.value_and_grad(theta, None)
    return float(np.linalg.norm(g + lam * (theta - as_array(theta0))))


def _batches(n: int, batch_size: int | None, rng: np.random.Generator) -> Iterator:
    if batch_size is None or batch_size >= n:
        while True:
            yield None
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def famr_run(
    theta0,
    loss: ForgetLoss,
    cfg: FamrConfig,
    on_record: Callable[[int, np.ndarray], dict] | None = None,
):
    """Run ``cfg.iters`` anchored descent steps from ``theta0``.

    Rows are recorded at step 0, every ``record_every`` steps and at the last
    step. ``on_record(step, theta)`` may return extra columns for a row.
    Returns ``(theta_star, trace)``; ``theta_star`` is a ParamVector when
    ``theta0`` is one.
    """
    ref = as_array(theta0).copy()
    theta = ref.copy()
    lam = cfg.lam
    trace = OptTrace()
    cached = None

    def record(step):
        nonlocal cached
        value, g = loss.value_and_grad(theta, None)
        if not (np.isfinite(value) and np.all(np.isfinite(g))):
            raise FamrDivergence(f"non-finite forget loss at step {step}", step, trace, theta)
        cached = (step, value, g)
        d = theta - ref
        dist = float(np.linalg.norm(d))
        anchor = 0.5 * lam * dist * dist
        row = {
            "step": step,
            "forget_loss": value,
            "anchor_value": anchor,
            "objective": value + anchor,
            "grad_norm_forget": float(np.linalg.norm(g)),
            "grad_norm_anchor": lam * dist,
            "stationarity_residual": float(np.linalg.norm(g + lam * d)),
            "param_distance_to_theta0": dist,
        }
        if on_record is not None:
            row.update(on_record(step, theta))
        trace.rows.append(row)
        return row

    row = record(0)
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(loss.n, cfg.batch_size, rng)
    for t in range(1, cfg.iters + 1):
        if cfg.residual_tol is not None and row["stationarity_residual"] < cfg.residual_tol:
            log.info("residual %.3g below tolerance at step %d", row["stationarity_residual"], row["step"])
            break
        idx = next(batches)
        if idx is None and cached is not None and cached[0] == t - 1:
            value, g = cached[1], cached[2]
        else:
            value, g = loss.value_and_grad(theta, idx)
        if not (np.isfinite(value) and np.all(np.isfinite(g))):
            raise FamrDivergence(f"non-finite forget gradient at step {t}", t, trace, theta)
        new = theta - cfg.eta * (g + lam * (theta - ref))
        if not np.all(np.isfinite(new)):
            raise FamrDivergence(f"iterate left the finite range at step {t}", t, trace, theta)
        theta = new
        if t % cfg.record_every == 0 or t == cfg.iters:
            row = record(t)
    if isinstance(theta0, ParamVector):
        return ParamVector(theta, theta0.spec_fingerprint), trace
    return theta, trace


@dataclass(frozen=True)
class RateReport:
    max_ratio: float
    bound: float
    holds: bool
    violations: int

    def to_dict(self):
        return asdict(self)


def convergence_rate_check(iterates, theta_star, eta: float, lam: float, steps=None,
                           tol: float = 1e-9) -> RateReport:
    """Check ||theta_t - theta*|| <= (1 - eta lam)^t ||theta_0 - theta*|| + tol.

    ``iterates`` are parameter vectors at ``steps`` (default 0, 1, 2, ...);
    the first one is the starting point. ``max_ratio`` is the largest
    per-step contraction observed, to be compared with ``bound``.
    """
    if theta_star is None:
        raise ValueError("convergence check needs the optimum theta_star")
    star = as_array(theta_star)
    dists = np.array([np.linalg.norm(as_array(th) - star) for th in iterates])
    steps = np.arange(len(dists)) if steps is None else np.asarray(steps)
    rate = 1.0 - eta * lam
    envelope = np.abs(rate) ** (steps - steps[0]) * dists[0] + tol
    violations = int(np.sum(~(dists <= envelope)))
    ratios = [
        (dists[i + 1] / dists[i]) ** (1.0 / (steps[i + 1] - steps[i]))
        for i in range(len(dists) - 1)
        if dists[i] > 0
    ]
    max_ratio = float(max(ratios)) if ratios else 0.0
    return RateReport(max_ratio=max_ratio, bound=rate, holds=violations == 0, violations=violations)
