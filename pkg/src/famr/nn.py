"""Small dense classifiers with hand-written backprop.

Parameters live in one flat float64 vector. Layout is, layer by layer,
the weight matrix (shape ``(fan_out, fan_in)``, row-major) followed by the
bias vector, so ``z = W @ a + b``. Hidden layers apply the activation; the
last layer is linear and produces the logits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

EPS = 1e-12
LOG_EPS = float(np.log(EPS))

LOSS_KINDS = ("cross_entropy_hard", "kl_uniform", "style", "combined")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    phi_layer_index: int | None = 0
    bias: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("layer_widths needs at least input and output widths")
        if any(w < 1 for w in widths):
            raise ValueError(f"all layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        n_hidden = len(widths) - 2
        if n_hidden == 0:
            # softmax-linear model: there is no hidden feature to expose
            object.__setattr__(self, "phi_layer_index", None)
        elif self.phi_layer_index is None or not 0 <= self.phi_layer_index < n_hidden:
            raise ValueError(
                f"phi_layer_index must be in [0, {n_hidden}), got {self.phi_layer_index}"
            )

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_hidden(self) -> int:
        return len(self.layer_widths) - 2

    @property
    def phi_dim(self) -> int:
        if self.phi_layer_index is None:
            return 0
        return self.layer_widths[self.phi_layer_index + 1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(a * b + (b if self.bias else 0) for a, b in zip(w[:-1], w[1:]))

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "phi_layer_index": self.phi_layer_index,
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            layer_widths=tuple(d["layer_widths"]),
            activation=d.get("activation", "relu"),
            phi_layer_index=d.get("phi_layer_index", 0),
            bias=d.get("bias", True),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ParamVector:
    """Immutable flat parameter state tied to the spec it parameterizes."""

    values: np.ndarray
    spec_fingerprint: str = field(default="")

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if not np.all(np.isfinite(v)):
            raise ValueError("parameter vector contains non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    @classmethod
    def for_spec(cls, values, spec: ModelSpec) -> "ParamVector":
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size != spec.n_params:
            raise ValueError(f"expected {spec.n_params} parameters, got {v.size}")
        return cls(v, spec.fingerprint())


def as_array(params, spec: ModelSpec | None = None) -> np.ndarray:
    """Return the raw float vector behind ``params``, checking it against ``spec``."""
    if isinstance(params, ParamVector):
        if spec is not None and params.spec_fingerprint and params.spec_fingerprint != spec.fingerprint():
            raise ValueError("parameter vector was built for a different ModelSpec")
        theta = params.values
    else:
        theta = np.asarray(params, dtype=np.float64).ravel()
    if spec is not None and theta.size != spec.n_params:
        raise ValueError(f"expected {spec.n_params} parameters, got {theta.size}")
    return theta


def unpack(theta: np.ndarray, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Split the flat vector into per-layer ``(W, b)`` views."""
    layers = []
    pos = 0
    w = spec.layer_widths
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        W = theta[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in)
        pos += fan_in * fan_out
        b = None
        if spec.bias:
            b = theta[pos:pos + fan_out]
            pos += fan_out
        layers.append((W, b))
    return layers


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Gaussian weights scaled by 1/sqrt(fan_in), zero biases (PCG64 stream)."""
    rng = np.random.default_rng(seed)
    chunks = []
    w = spec.layer_widths
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        chunks.append(rng.standard_normal(fan_in * fan_out) / np.sqrt(fan_in))
        if spec.bias:
            chunks.append(np.zeros(fan_out))
    return ParamVector.for_spec(np.concatenate(chunks), spec)


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_deriv(z, a, kind):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def _check_inputs(X, spec):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"inputs must have dimension {spec.input_dim}, got shape {X.shape}")
    return X


def _forward_cache(theta, spec, X):
    zs, acts = [], [X]
    a = X
    layers = unpack(theta, spec)
    for i, (W, b) in enumerate(layers):
        z = a @ W.T
        if b is not None:
            z = z + b
        zs.append(z)
        if i < len(layers) - 1:
            a = _act(z, spec.activation)
            acts.append(a)
    return layers, zs, acts


def forward_batch(params, spec: ModelSpec, X) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``(n, C)`` and phi features ``(n, m)`` for a batch of inputs."""
    theta = as_array(params, spec)
    X = _check_inputs(X, spec)
    _, zs, acts = _forward_cache(theta, spec, X)
    if spec.phi_layer_index is None:
        phi = np.zeros((X.shape[0], 0))
    else:
        phi = acts[spec.phi_layer_index + 1]
    return zs[-1], phi


def forward(params, spec: ModelSpec, x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a single input vector; use forward_batch")
    logits, phi = forward_batch(params, spec, x)
    return logits[0], phi[0]


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(params, spec: ModelSpec, X) -> np.ndarray:
    return softmax(forward_batch(params, spec, X)[0])


# ---------------------------------------------------------------------------
# losses on logits / phi, each returning (mean loss, dlogits, dphi)


def _ce_terms(z, targets, C):
    n = z.shape[0]
    logp = log_softmax(z)
    p = np.exp(logp)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        y = targets.astype(np.int64)
        if np.any(y < 0) or np.any(y >= C):
            raise ValueError(f"labels must lie in [0, {C})")
        q = np.zeros_like(p)
        q[np.arange(n), y] = 1.0
    else:
        q = np.asarray(targets, dtype=np.float64)
        if q.shape != p.shape:
            raise ValueError(f"soft targets must have shape {p.shape}")
    live = logp > LOG_EPS
    loss = -np.sum(q * np.maximum(logp, LOG_EPS)) / n
    qm = q * live
    dz = (qm.sum(axis=1, keepdims=True) * p - qm) / n
    return loss, dz


def _kl_uniform_terms(z):
    n, C = z.shape
    logp = log_softmax(z)
    p = np.exp(logp)
    live = logp > LOG_EPS
    per = -np.log(C) - np.maximum(logp, LOG_EPS).mean(axis=1)
    k = live.sum(axis=1, keepdims=True)
    dz = (k * p - live) / (C * n)
    return per.mean(), dz


def _style_terms(phi, gram):
    n = phi.shape[0]
    sq = np.einsum("ij,ij->i", phi, phi)
    Gphi = phi @ gram
    per = sq * sq - 2.0 * np.einsum("ij,ij->i", Gphi, phi) + np.sum(gram * gram)
    dphi = 4.0 * (phi * sq[:, None] - Gphi) / n
    return per.mean(), dphi


def _loss_terms(z, phi, targets, kind, alpha, beta, gram, C):
    dphi = None
    if kind == "cross_entropy_hard":
        loss, dz = _ce_terms(z, targets, C)
    elif kind == "kl_uniform":
        loss, dz = _kl_uniform_terms(z)
    elif kind == "style":
        loss, dphi = _style_terms(phi, _check_gram(gram, phi.shape[1]))
        dz = np.zeros_like(z)
    elif kind == "combined":
        loss, dz = 0.0, np.zeros_like(z)
        if alpha:
            k, dzk = _kl_uniform_terms(z)
            loss += alpha * k
            dz = alpha * dzk
        if beta:
            s, dphi = _style_terms(phi, _check_gram(gram, phi.shape[1]))
            loss += beta * s
            dphi = beta * dphi
    else:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return loss, dz, dphi


def _check_gram(gram, m):
    if gram is None:
        raise ValueError("style loss requires a target Gram matrix")
    gram = np.asarray(gram, dtype=np.float64)
    if m == 0:
        raise ValueError("style loss needs a hidden phi layer")
    if gram.shape != (m, m):
        raise ValueError(f"target Gram must be {m}x{m}, got {gram.shape}")
    return gram


def loss_and_grad(
    params,
    spec: ModelSpec,
    X,
    targets=None,
    loss_kind: str = "cross_entropy_hard",
    *,
    alpha: float = 1.0,
    beta: float = 0.0,
    target_gram=None,
) -> tuple[float, np.ndarray]:
    """Mean batch loss and its analytic gradient with respect to the flat parameters."""
    theta = as_array(params, spec)
    X = _check_inputs(X, spec)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    layers, zs, acts = _forward_cache(theta, spec, X)
    phi_pos = None if spec.phi_layer_index is None else spec.phi_layer_index + 1
    phi = acts[phi_pos] if phi_pos is not None else np.zeros((X.shape[0], 0))
    if loss_kind == "cross_entropy_hard" and targets is None:
        raise ValueError("cross-entropy needs targets")
    loss, dz, dphi = _loss_terms(zs[-1], phi, targets, loss_kind, alpha, beta,
                                 target_gram, spec.num_classes)

    grads = []
    for l in range(len(layers) - 1, -1, -1):
        W, b = layers[l]
        gW = dz.T @ acts[l]
        grads.append(dz.sum(axis=0) if b is not None else None)
        grads.append(gW.ravel())
        if l > 0:
            da = dz @ W
            if dphi is not None and l == phi_pos:
                da = da + dphi
            dz = da * _act_deriv(zs[l - 1], acts[l], spec.activation)
    flat = np.concatenate([g for g in reversed(grads) if g is not None])
    return float(loss), flat


def grad(params, spec: ModelSpec, X, targets=None, loss_kind: str = "cross_entropy_hard",
         **kw) -> np.ndarray:
    return loss_and_grad(params, spec, X, targets, loss_kind, **kw)[1]


def loss_value(params, spec: ModelSpec, X, targets=None, loss_kind: str = "cross_entropy_hard",
               **kw) -> float:
    return loss_and_grad(params, spec, X, targets, loss_kind, **kw)[0]


def logit_jacobian(params, spec: ModelSpec, x) -> np.ndarray:
    """Jacobian ``(C, P)`` of the logits at one input w.r.t. the parameters.

    Row ``c`` is the gradient of logit ``c``, obtained by backpropagating a
    unit vector through the network.
    """
    theta = as_array(params, spec)
    X = _check_inputs(x, spec)
    layers, zs, acts = _forward_cache(theta, spec, X)
    C = spec.num_classes
    rows = []
    for c in range(C):
        dz = np.zeros((1, C))
        dz[0, c] = 1.0
        parts = []
        for l in range(len(layers) - 1, -1, -1):
            W, b = layers[l]
            if b is not None:
                parts.append(dz.sum(axis=0))
            parts.append((dz.T @ acts[l]).ravel())
            if l > 0:
                dz = (dz @ W) * _act_deriv(zs[l - 1], acts[l], spec.activation)
        rows.append(np.concatenate(parts[::-1]))
    return np.vstack(rows)


# ---------------------------------------------------------------------------
# baseline trainer


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 0.1
    seed: int = 0
    batch_size: int | None = 32
    l2: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive or None for full batch")
        if self.l2 < 0:
            raise ValueError("l2 must be nonnegative")


def training_objective(params, spec: ModelSpec, X, y, l2: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean cross-entropy plus ``(l2/2)||theta||^2`` and its gradient."""
    theta = as_array(params, spec)
    loss, g = loss_and_grad(theta, spec, X, y, "cross_entropy_hard")
    if l2:
        loss += 0.5 * l2 * float(theta @ theta)
        g = g + l2 * theta
    return loss, g


def train_baseline(data, spec: ModelSpec, cfg: TrainConfig) -> ParamVector:
    """Mini-batch gradient descent on mean cross-entropy, starting from ``init_params``."""
    X = _check_inputs(data.inputs, spec)
    y = np.asarray(data.labels, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    if np.any(y < 0) or np.any(y >= spec.num_classes):
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    theta0 = init_params(spec, cfg.seed)
    if cfg.epochs == 0:
        return theta0
    theta = theta0.values.copy()
    rng = np.random.default_rng([cfg.seed, 1])
    n = X.shape[0]
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            _, g = training_objective(theta, spec, X[idx], y[idx], cfg.l2)
            theta -= cfg.lr * g
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError("baseline training diverged; lower the learning rate")
    return ParamVector.for_spec(theta, spec)

