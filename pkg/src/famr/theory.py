"""Exact oracles for checking anchored unlearning against retraining.

Dense Hessians, a cyclic Jacobi eigensolver, influence and damped-Newton
solves, and the parameter/output/certificate bounds.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg

from . import nn
from .metrics import certificate_l1
from .nn import ModelSpec, ParamVector, TrainConfig, as_array

log = logging.getLogger(__name__)

MAX_DENSE_PARAMS = 2000
LIPSCHITZ_SAFETY = 1.5


class HessianTooLarge(ValueError):
    pass


class NonConvergence(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# eigenvalues


def jacobi_eigh(A, tol: float = 1e-10, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps over all (p, q) pairs in row order until the off-diagonal Frobenius
    norm drops below ``tol * max(1, ||A||_F)``. Returns eigenvalues in
    ascending order and the matching orthonormal eigenvectors as columns.
    """
    A = np.array(A, dtype=np.float64, copy=True)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n)
    thresh = tol * max(1.0, float(np.linalg.norm(A)))

    def off(M):
        return float(np.sqrt(max(np.sum(M * M) - np.sum(np.diag(M) ** 2), 0.0)))

    for _ in range(max_sweeps):
        if off(A) < thresh:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        if off(A) >= thresh:
            raise NonConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


class HessianMatrix:
    """Dense symmetric Hessian with a lazily computed smallest eigenvalue."""

    def __init__(self, entries, source: str):
        H = np.asarray(entries, dtype=np.float64)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError("Hessian must be square")
        self.entries = 0.5 * (H + H.T)
        self.entries.setflags(write=False)
        self.source = source
        self._lambda_min = None

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def lambda_min(self) -> float:
        if self._lambda_min is None:
            self._lambda_min = min_eigenvalue(self)
        return self._lambda_min


def min_eigenvalue(H) -> float:
    M = H.entries if isinstance(H, HessianMatrix) else np.asarray(H, dtype=np.float64)
    return float(jacobi_eigh(M)[0][0])


# ---------------------------------------------------------------------------
# Hessians


def fd_hessian(grad_fn, theta) -> np.ndarray:
    """Central differences of an analytic gradient, step 1e-4 (1 + |theta_i|), symmetrized."""
    theta = np.asarray(theta, dtype=np.float64)
    P = theta.size
    if P > MAX_DENSE_PARAMS:
        raise HessianTooLarge(
            f"model has {P} parameters; dense Hessians are limited to {MAX_DENSE_PARAMS}, "
            "use a smaller ModelSpec"
        )
    H = np.empty((P, P))
    for i in range(P):
        h = 1e-4 * (1.0 + abs(theta[i]))
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        H[:, i] = (grad_fn(tp) - grad_fn(tm)) / (2.0 * h)
    return 0.5 * (H + H.T)


def logistic_hessian(params, spec: ModelSpec, X, l2: float = 0.0) -> np.ndarray:
    """Exact Hessian of mean cross-entropy (+ l2/2 ||theta||^2) for a softmax-linear model."""
    if spec.n_hidden != 0:
        raise ValueError("analytic Hessian is only available for softmax-linear models")
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    C = spec.num_classes
    p = nn.predict_proba(params, spec, X)
    # per-sample feature row: weights block uses x, bias block uses 1
    feats = np.hstack([X, np.ones((n, 1))]) if spec.bias else X
    k = feats.shape[1]
    # S[i] = diag(p_i) - p_i p_i^T, Hessian in (class, feature) ordering
    S = -np.einsum("ia,ib->iab", p, p)
    S[:, np.arange(C), np.arange(C)] += p
    H4 = np.einsum("iab,ij,ik->ajbk", S, feats, feats) / n
    Hcf = H4.reshape(C * k, C * k)
    # reorder from (class, feature) to the flat layout: W row-major then b
    perm = [c * k + j for c in range(C) for j in range(d)]
    if spec.bias:
        perm += [c * k + d for c in range(C)]
    perm = np.array(perm)
    H = Hcf[np.ix_(perm, perm)]
    if l2:
        H = H + l2 * np.eye(H.shape[0])
    return H


def hessian(params, spec: ModelSpec, X, y, source: str = "finite_difference",
            l2: float = 0.0) -> HessianMatrix:
    """Hessian of the training objective (mean CE + l2/2 ||theta||^2) over ``(X, y)``."""
    theta = as_array(params, spec)
    if theta.size > MAX_DENSE_PARAMS:
        raise HessianTooLarge(
            f"model has {theta.size} parameters; dense Hessians are limited to "
            f"{MAX_DENSE_PARAMS}, use a smaller ModelSpec"
        )
    if source == "finite_difference":
        H = fd_hessian(lambda t: nn.training_objective(t, spec, X, y, l2)[1], theta)
    elif source == "analytic_logistic":
        H = logistic_hessian(theta, spec, X, l2)
    else:
        raise ValueError(f"unknown Hessian source {source!r}")
    return HessianMatrix(H, source)


# ---------------------------------------------------------------------------
# influence and damped Newton


def _grad_sum(forget_grads) -> np.ndarray:
    g = np.asarray(forget_grads, dtype=np.float64)
    return g.sum(axis=0) if g.ndim == 2 else g


def _sym_solve(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    x = scipy.linalg.solve(M, rhs, assume_a="sym")
    scale = max(float(np.linalg.norm(rhs)), np.finfo(float).tiny)
    r = rhs - M @ x
    if np.linalg.norm(r) >= 1e-8 * scale:
        x = x + scipy.linalg.solve(M, r, assume_a="sym")
        r = rhs - M @ x
        if np.linalg.norm(r) >= 1e-8 * scale:
            raise np.linalg.LinAlgError(
                f"linear solve residual {np.linalg.norm(r):.3g} exceeds 1e-8 relative"
            )
    return x


def influence_update(theta0, H: HessianMatrix, forget_grads, damping: float = 0.0) -> np.ndarray:
    """theta0 - (H + damping I)^{-1} sum(forget_grads)."""
    theta0 = as_array(theta0)
    g = _grad_sum(forget_grads)
    if damping == 0.0 and H.lambda_min <= 1e-8:
        raise np.linalg.LinAlgError(
            f"Hessian is singular or indefinite (lambda_min = {H.lambda_min:.3g}); pass damping"
        )
    if not np.any(g):
        return theta0.copy()
    M = H.entries + damping * np.eye(H.dim)
    return theta0 - _sym_solve(M, g)


def damped_newton_solution(theta0, H: HessianMatrix, lam: float, forget_grads) -> np.ndarray:
    """Solve (H + lam I)(theta - theta0) = -sum(forget_grads)."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    theta0 = as_array(theta0)
    if H.lambda_min + lam <= 1e-12:
        raise np.linalg.LinAlgError(
            f"H + lam I is singular: lambda_min(H) = {H.lambda_min:.3g}, lam = {lam:.3g}"
        )
    g = _grad_sum(forget_grads)
    if not np.any(g):
        return theta0.copy()
    return theta0 - _sym_solve(H.entries + lam * np.eye(H.dim), g)


def parameter_gap_bound(lam: float, lambda_min: float, grad_sum_norm: float) -> float:
    """(lam / lambda_min^2) * ||sum grad||, the gap bound with its constant set to 1."""
    if lambda_min <= 0:
        raise ValueError(f"gap bound needs lambda_min > 0, got {lambda_min}")
    return lam / lambda_min ** 2 * grad_sum_norm


def removal_system(theta0, spec: ModelSpec, retain, l2: float,
                   source: str = "finite_difference") -> tuple[HessianMatrix, np.ndarray]:
    """Hessian and gradient of the retain-set training objective at ``theta0``.

    When theta0 minimizes the full-data objective, the gradient equals the
    negated per-sample forget gradients (scaled to the retain mean), so a
    Newton step from theta0 with this pair approximates retraining on the
    retain set. For quadratic losses that step is exact.
    """
    X, y = retain.inputs, retain.labels
    H = hessian(theta0, spec, X, y, source, l2)
    _, g = nn.training_objective(theta0, spec, X, y, l2)
    return H, g


# ---------------------------------------------------------------------------
# retraining


def _converge(theta, spec, X, y, l2, lr, tol, max_iters):
    obj = lambda t: nn.training_objective(t, spec, X, y, l2)
    f, g = obj(theta)
    if spec.n_hidden == 0 and l2 > 0:
        # strictly convex: damped Newton with Armijo backtracking
        for _ in range(100):
            if np.linalg.norm(g) < tol:
                return theta, True
            H = logistic_hessian(theta, spec, X, l2)
            step = np.linalg.solve(H, g)
            a = 1.0
            while a > 1e-10:
                cand = theta - a * step
                fc, gc = obj(cand)
                if fc <= f - 1e-4 * a * float(g @ step):
                    break
                a *= 0.5
            if fc >= f and np.linalg.norm(gc) >= np.linalg.norm(g):
                break
            theta, f, g = cand, fc, gc
        return theta, np.linalg.norm(g) < tol
    for _ in range(max_iters):
        if np.linalg.norm(g) < tol:
            return theta, True
        theta = theta - lr * g
        f, g = obj(theta)
    return theta, np.linalg.norm(g) < tol


def retrain_oracle(data, spec: ModelSpec, train_cfg: TrainConfig, tol: float = 1e-7,
                   max_iters: int = 200_000) -> ParamVector:
    """Baseline training on ``data`` followed by full-batch refinement to ||grad|| < tol."""
    if len(data.labels) == 0:
        raise ValueError("retain set is empty")
    theta = nn.train_baseline(data, spec, train_cfg).values.copy()
    theta, ok = _converge(theta, spec, data.inputs, data.labels, train_cfg.l2, train_cfg.lr,
                          tol, max_iters)
    if not ok:
        log.warning("retraining stopped before reaching gradient norm %g", tol)
    return ParamVector.for_spec(theta, spec)


def anchored_newton_solution(theta0, loss, lam: float, tol: float = 1e-10,
                             max_iters: int = 50) -> np.ndarray:
    """Minimizer of forget loss + (lam/2)||theta - theta0||^2 by Newton's method.

    Uses a finite-difference Hessian of the forget loss and Armijo
    backtracking; intended for small convex instances.
    """
    ref = as_array(theta0)
    theta = ref.copy()

    def J(t):
        v, g = loss.value_and_grad(t, None)
        d = t - ref
        return v + 0.5 * lam * float(d @ d), g + lam * d

    f, g = J(theta)
    for _ in range(max_iters):
        if np.linalg.norm(g) < tol:
            break
        Hf = fd_hessian(lambda t: loss.value_and_grad(t, None)[1], theta)
        M = Hf + lam * np.eye(theta.size)
        step = np.linalg.solve(M, g)
        if float(g @ step) <= 0:
            step = g
        a = 1.0
        while a > 1e-12:
            cand = theta - a * step
            fc, gc = J(cand)
            if fc <= f - 1e-4 * a * float(g @ step):
                break
            a *= 0.5
        if fc > f:
            break
        theta, f, g = cand, fc, gc
    return theta


# ---------------------------------------------------------------------------
# bounds


def _output_jacobian(theta, spec, x, output):
    J = nn.logit_jacobian(theta, spec, x)
    if output == "logits":
        return J
    if output == "probs":
        p = nn.predict_proba(theta, spec, x)[0]
        return (np.diag(p) - np.outer(p, p)) @ J
    raise ValueError("output must be 'logits' or 'probs'")


def _outputs(theta, spec, X, output):
    logits, _ = nn.forward_batch(theta, spec, X)
    return logits if output == "logits" else nn.softmax(logits)


def estimate_lipschitz(params, spec: ModelSpec, probe_inputs, output: str = "logits",
                       safety: float = LIPSCHITZ_SAFETY) -> float:
    """safety * max over probes of the spectral norm of d f(x) / d theta."""
    X = np.asarray(probe_inputs, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise ValueError("need at least one probe input")
    theta = as_array(params, spec)
    worst = max(np.linalg.norm(_output_jacobian(theta, spec, x, output), 2) for x in X)
    return safety * float(worst)


@dataclass(frozen=True)
class BoundReport:
    lam: float
    param_gap: float
    gap_bound: float
    lipschitz_estimate: float
    max_output_gap: float
    output_bound: float
    certificate_l1: float
    holds_param: bool
    holds_output: bool

    def to_dict(self) -> dict:
        return asdict(self)


def verify_bounds(theta_star, w_star, spec: ModelSpec, H: HessianMatrix, lam: float,
                  forget_grads, probe_inputs, forget_inputs, output: str = "logits") -> BoundReport:
    """Compare an unlearned model with the retrained one against the theoretical bounds.

    The Lipschitz constant is estimated at both endpoints and the larger
    value is used.
    """
    ts = as_array(theta_star, spec)
    ws = as_array(w_star, spec)
    if ts.shape != ws.shape:
        raise ValueError("theta_star and w_star differ in length")
    probes = np.asarray(probe_inputs, dtype=np.float64)
    gap = float(np.linalg.norm(ts - ws))
    gnorm = float(np.linalg.norm(_grad_sum(forget_grads)))
    lmin = H.lambda_min
    gap_bound = parameter_gap_bound(lam, lmin, gnorm) if lmin > 0 else float("inf")
    L = max(estimate_lipschitz(ts, spec, probes, output), estimate_lipschitz(ws, spec, probes, output))
    out_gap = float(np.max(np.linalg.norm(_outputs(ts, spec, probes, output)
                                          - _outputs(ws, spec, probes, output), axis=1)))
    out_bound = L * gap
    return BoundReport(
        lam=float(lam),
        param_gap=gap,
        gap_bound=gap_bound,
        lipschitz_estimate=L,
        max_output_gap=out_gap,
        output_bound=out_bound,
        certificate_l1=certificate_l1(ts, spec, forget_inputs),
        holds_param=bool(gap <= gap_bound * (1 + 1e-6)),
        holds_output=bool(out_gap <= out_bound * (1 + 1e-6)),
    )
