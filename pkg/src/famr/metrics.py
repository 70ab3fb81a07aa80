"""Evaluation metrics for an unlearning run. All logs are natural logs."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .nn import EPS, ModelSpec


def _inputs(subset):
    X = subset.inputs if hasattr(subset, "inputs") else subset
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("metric needs a nonempty subset")
    return X


def accuracy(params, spec: ModelSpec, subset) -> float:
    """Fraction of argmax hits; ties go to the lowest class index."""
    X = _inputs(subset)
    logits, _ = nn.forward_batch(params, spec, X)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(subset.labels)))


def cross_entropy_forget(params, spec: ModelSpec, forget_set) -> float:
    X = _inputs(forget_set)
    p = nn.predict_proba(params, spec, X)
    py = p[np.arange(len(p)), np.asarray(forget_set.labels)]
    return float(np.mean(-np.log(np.maximum(py, EPS))))


def entropy(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    return -np.sum(p * np.log(np.maximum(p, EPS)), axis=-1)


def mean_entropy(params, spec: ModelSpec, subset) -> float:
    return float(np.mean(entropy(nn.predict_proba(params, spec, _inputs(subset)))))


def kl_divergence(p, q) -> np.ndarray:
    """Row-wise KL(p || q) with both sides clamped at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return np.sum(p * (np.log(np.maximum(p, EPS)) - np.log(np.maximum(q, EPS))), axis=-1)


def kl_pre_post(params_pre, params_post, spec: ModelSpec, subset, direction: str = "pre_post") -> float:
    """Mean KL between the softmax outputs of two models, KL(pre || post) by default."""
    X = _inputs(subset)
    p_pre = nn.predict_proba(params_pre, spec, X)
    p_post = nn.predict_proba(params_post, spec, X)
    if direction == "pre_post":
        return float(np.mean(kl_divergence(p_pre, p_post)))
    if direction == "post_pre":
        return float(np.mean(kl_divergence(p_post, p_pre)))
    raise ValueError("direction must be 'pre_post' or 'post_pre'")


def certificate_l1(params, spec: ModelSpec, forget_inputs) -> float:
    """max over the forget inputs of ||p(.|x) - u||_1."""
    p = nn.predict_proba(params, spec, _inputs(forget_inputs))
    return float(np.max(np.sum(np.abs(p - 1.0 / p.shape[1]), axis=1)))


@dataclass(frozen=True)
class MetricsReport:
    ret_acc: float
    for_acc: float
    ce_forget: float
    entropy_forget: float
    kl_pre_post: float
    n_retain: int
    n_forget: int
    bound: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})


def assemble_report(pre_params, post_params, spec: ModelSpec, retain_set, forget_set,
                    bound=None, kl_direction: str = "pre_post") -> MetricsReport:
    if bound is not None and hasattr(bound, "to_dict"):
        bound = bound.to_dict()
    return MetricsReport(
        ret_acc=accuracy(post_params, spec, retain_set),
        for_acc=accuracy(post_params, spec, forget_set),
        ce_forget=cross_entropy_forget(post_params, spec, forget_set),
        entropy_forget=mean_entropy(post_params, spec, forget_set),
        kl_pre_post=kl_pre_post(pre_params, post_params, spec, forget_set, kl_direction),
        n_retain=len(retain_set.labels),
        n_forget=len(forget_set.labels),
        bound=bound,
    )
