"""Forgetting losses: uniform-KL, Gram-matrix style, their weighted mix, and the anchored objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import EPS, ModelSpec


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.alpha + self.beta <= 0:
            raise ValueError("at least one of alpha, beta must be positive")


@dataclass(frozen=True)
class StyleTarget:
    gram: np.ndarray

    def __post_init__(self):
        g = np.array(self.gram, dtype=np.float64, copy=True)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError("target Gram must be square")
        if np.max(np.abs(g - g.T), initial=0.0) > 1e-12:
            raise ValueError("target Gram must be symmetric")
        if g.size and np.linalg.eigvalsh(g).min() < -1e-10:
            raise ValueError("target Gram must be positive semidefinite")
        g.setflags(write=False)
        object.__setattr__(self, "gram", g)

    @classmethod
    def zeros(cls, m: int) -> "StyleTarget":
        return cls(np.zeros((m, m)))


def kl_uniform_loss(probs) -> float:
    """KL(u || p) = -ln C - mean_c ln p_c, with p clamped at 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("expected a probability vector over at least two classes")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must sum to 1")
    C = p.size
    return float(-np.log(C) - np.mean(np.log(np.maximum(p, EPS))))


def gram_matrix(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64).ravel()
    return np.outer(phi, phi)


def style_loss(phi, target: StyleTarget) -> float:
    G = gram_matrix(phi)
    if G.shape != target.gram.shape:
        raise ValueError(f"phi Gram {G.shape} does not match target {target.gram.shape}")
    D = G - target.gram
    return float(np.sum(D * D))


def style_target_from_set(params, spec: ModelSpec, samples) -> StyleTarget:
    """Element-wise mean of phi(x) phi(x)^T over ``samples`` under ``params``."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise ValueError("need at least one sample to build a style target")
    if spec.phi_dim == 0:
        raise ValueError("model has no hidden phi layer")
    _, phi = nn.forward_batch(params, spec, X)
    G = phi.T @ phi / phi.shape[0]
    # the matmul is symmetric only up to rounding
    return StyleTarget(0.5 * (G + G.T))


def _target_gram(weights: LossWeights, target: StyleTarget | None):
    if weights.beta > 0:
        if target is None:
            raise ValueError("beta > 0 requires a style target")
        return target.gram
    return None


def combined_forget_loss(params, spec: ModelSpec, forget_inputs, weights: LossWeights,
                         target: StyleTarget | None = None) -> float:
    """alpha * mean KL-to-uniform + beta * mean style loss over the forget batch."""
    gram = _target_gram(weights, target)
    return nn.loss_value(params, spec, forget_inputs, None, "combined",
                         alpha=weights.alpha, beta=weights.beta, target_gram=gram)


def anchor_penalty(params, theta0, lam: float) -> float:
    theta = nn.as_array(params)
    ref = nn.as_array(theta0)
    if theta.shape != ref.shape:
        raise ValueError(f"parameter length mismatch: {theta.size} vs {ref.size}")
    d = theta - ref
    return 0.5 * lam * float(d @ d)


def famr_objective(params, theta0, spec: ModelSpec, forget_inputs, weights: LossWeights,
                   target: StyleTarget | None, lam: float) -> float:
    if lam <= 0:
        raise ValueError("anchor coefficient must be positive")
    anchor = anchor_penalty(nn.as_array(params, spec), nn.as_array(theta0, spec), lam)
    return combined_forget_loss(params, spec, forget_inputs, weights, target) + anchor


class NetworkForgetLoss:
    """The combined forget loss on a fixed forget set, as a function of theta.

    ``idx`` selects a mini-batch by row index; ``None`` means the full set.
    """

    def __init__(self, spec: ModelSpec, forget_inputs, weights: LossWeights,
                 target: StyleTarget | None = None):
        X = np.asarray(forget_inputs, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("forget set must be a nonempty 2-D array of inputs")
        self.spec = spec
        self.inputs = X
        self.weights = weights
        self.target = target
        self._gram = _target_gram(weights, target)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def value_and_grad(self, theta, idx=None) -> tuple[float, np.ndarray]:
        X = self.inputs if idx is None else self.inputs[idx]
        return nn.loss_and_grad(theta, self.spec, X, None, "combined",
                                alpha=self.weights.alpha, beta=self.weights.beta,
                                target_gram=self._gram)

    def value(self, theta, idx=None) -> float:
        return self.value_and_grad(theta, idx)[0]

    def gradient(self, theta, idx=None) -> np.ndarray:
        return self.value_and_grad(theta, idx)[1]
