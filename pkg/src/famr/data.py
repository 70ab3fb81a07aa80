"""Seeded synthetic datasets and forget-set selection."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    style_tags: np.ndarray | None = None
    seed: int | None = None
    generator: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        X = np.array(self.inputs, dtype=np.float64, copy=True)
        y = np.array(self.labels, dtype=np.int64, copy=True).ravel()
        if X.ndim != 2 or X.shape[0] != y.size:
            raise ValueError("inputs and labels must have equal length")
        if not np.all(np.isfinite(X)):
            raise ValueError("inputs must be finite")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y)
        if self.style_tags is not None:
            s = np.array(self.style_tags, dtype=np.int64, copy=True).ravel()
            if s.size != y.size:
                raise ValueError("style_tags must match the number of samples")
            s.setflags(write=False)
            object.__setattr__(self, "style_tags", s)

    def __len__(self):
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        tags = None if self.style_tags is None else self.style_tags[idx]
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, tags,
                       self.seed, self.generator)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        if self.style_tags is not None:
            h.update(np.ascontiguousarray(self.style_tags).tobytes())
        return h.hexdigest()


def _class_means(C: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm, well separated class centres.

    With d >= C the centres are a random orthonormal set; otherwise they are
    evenly spaced on a randomly rotated great circle.
    """
    if d >= C:
        Q, _ = np.linalg.qr(rng.standard_normal((d, C)))
        return Q.T.copy()
    offset = rng.uniform(0.0, 2 * np.pi)
    angles = offset + 2 * np.pi * np.arange(C) / C
    circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    frame, _ = np.linalg.qr(rng.standard_normal((d, 2)))
    return circle @ frame.T


def gen_blobs(C: int, per_class: int, d: int, spread: float, seed: int,
              noise_seed: int | None = None) -> Dataset:
    """C isotropic Gaussian clusters of ``per_class`` points each, grouped by class.

    ``noise_seed`` redraws the points around the same centres.
    """
    if C < 2 or per_class < 1 or d < 2:
        raise ValueError("need C >= 2, per_class >= 1, d >= 2")
    if spread < 0:
        raise ValueError("spread must be nonnegative")
    means = _class_means(C, d, np.random.default_rng(seed))
    noise = np.random.default_rng([seed, 0] if noise_seed is None else [seed, 0, noise_seed])
    labels = np.repeat(np.arange(C), per_class)
    X = means[labels] + spread * noise.standard_normal((labels.size, d))
    gen = {"name": "blobs", "C": C, "per_class": per_class, "d": d, "spread": spread, "seed": seed}
    return Dataset(X, labels, C, None, seed, gen)


def gen_styled(C: int, per_class: int, d_content: int, d_style: int, styles: int, seed: int,
               spread: float = 0.1, style_scale: float = 1.0, style_spread: float = 0.1,
               noise_seed: int | None = None) -> Dataset:
    """Blob content block followed by a class-independent style block.

    Within each class, samples cycle through the style groups, so every group
    covers every class equally when ``per_class`` is a multiple of ``styles``.
    ``style_scale = 0`` zeroes the style block completely.
    """
    if styles < 2 or d_style < 2:
        raise ValueError("need styles >= 2 and d_style >= 2")
    content = gen_blobs(C, per_class, d_content, spread, seed, noise_seed)
    rng = np.random.default_rng([seed, 2] if noise_seed is None else [seed, 2, noise_seed])
    patterns = _class_means(styles, d_style, rng)
    tags = np.tile(np.arange(per_class) % styles, C)
    if style_scale == 0:
        block = np.zeros((tags.size, d_style))
    else:
        block = style_scale * patterns[tags] + style_spread * rng.standard_normal((tags.size, d_style))
    X = np.hstack([content.inputs, block])
    gen = {"name": "styled", "C": C, "per_class": per_class, "d_content": d_content,
           "d_style": d_style, "styles": styles, "seed": seed, "spread": spread,
           "style_scale": style_scale, "style_spread": style_spread}
    return Dataset(X, content.labels, C, tags, seed, gen)


GENERATORS = {"blobs": gen_blobs, "styled": gen_styled}


def generate(name: str, **kwargs) -> Dataset:
    try:
        fn = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}") from None
    return fn(**kwargs)


def draw_like(data: Dataset, n: int, seed: int) -> np.ndarray:
    """``n`` fresh inputs from the generator that produced ``data``."""
    gen = dict(data.generator)
    name = gen.pop("name", None)
    if name is None:
        raise ValueError("dataset carries no generator description")
    fresh = generate(name, **gen, noise_seed=seed + 1)
    rng = np.random.default_rng([seed, 3])
    idx = rng.choice(len(fresh), size=n, replace=n > len(fresh))
    return fresh.inputs[np.sort(idx)]


@dataclass(frozen=True)
class ForgetSpec:
    kind: str
    sample_indices: tuple[int, ...] | None = None
    class_id: int | None = None
    style_tag: int | None = None

    def __post_init__(self):
        active = {"samples": "sample_indices", "class": "class_id", "style": "style_tag"}
        if self.kind not in active:
            raise ValueError(f"forget kind must be one of {sorted(active)}")
        for kind, attr in active.items():
            is_set = getattr(self, attr) is not None
            if is_set != (kind == self.kind):
                raise ValueError(f"forget kind {self.kind!r} must set exactly {active[self.kind]}")
        if self.sample_indices is not None:
            object.__setattr__(self, "sample_indices", tuple(int(i) for i in self.sample_indices))

    def mask(self, data: Dataset) -> np.ndarray:
        n = len(data)
        if self.kind == "samples":
            idx = np.asarray(self.sample_indices, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValueError("sample index out of range")
            m = np.zeros(n, dtype=bool)
            m[idx] = True
            return m
        if self.kind == "class":
            return data.labels == self.class_id
        if data.style_tags is None:
            raise ValueError("style forgetting needs a dataset with style tags")
        return data.style_tags == self.style_tag

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "samples":
            d["sample_indices"] = list(self.sample_indices)
        elif self.kind == "class":
            d["class_id"] = self.class_id
        else:
            d["style_tag"] = self.style_tag
        return d


def split_forget(data: Dataset, spec: ForgetSpec) -> tuple[Dataset, Dataset]:
    """Partition into (forget, retain), each keeping dataset order."""
    m = spec.mask(data)
    k = int(m.sum())
    if k == 0:
        raise ValueError("forget set is empty")
    if k == len(data):
        raise ValueError("forget set covers the whole dataset")
    return data.subset(np.flatnonzero(m)), data.subset(np.flatnonzero(~m))
