"""Cosine prototype classifier."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ClassifierWeights:
    rows: Tensor  # [|C|, D], unnormalized
    class_ids: tuple[int, ...]

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] != len(self.class_ids):
            raise ValueError(f"{self.rows.shape} rows for {len(self.class_ids)} class ids")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("duplicate class ids in classifier")

    def __len__(self):
        return len(self.class_ids)

    def detach(self) -> "ClassifierWeights":
        return ClassifierWeights(self.rows.detach(), self.class_ids)

    def select(self, ids: Sequence[int]) -> "ClassifierWeights":
        pos = {c: i for i, c in enumerate(self.class_ids)}
        rows = np.array([pos[int(c)] for c in ids], dtype=np.int64)
        return ClassifierWeights(Tensor(self.rows.data[rows]), tuple(int(c) for c in ids))

    def positions(self, labels) -> np.ndarray:
        pos = {c: i for i, c in enumerate(self.class_ids)}
        return np.array([pos[int(y)] for y in labels], dtype=np.int64)

    @staticmethod
    def empty(dim: int, dtype=np.float32) -> "ClassifierWeights":
        return ClassifierWeights(Tensor(np.zeros((0, dim), dtype=dtype)), ())

    def save(self, path) -> None:
        from .data import save_ids, save_tensor

        path = Path(path)
        save_tensor(path, self.rows.data)
        save_ids(path.with_suffix(".ids"), self.class_ids)

    @classmethod
    def load(cls, path) -> "ClassifierWeights":
        from .data import load_ids, load_tensor

        path = Path(path)
        return cls(load_tensor(path), tuple(load_ids(path.with_suffix(".ids"))))


def prototypes(features, labels) -> ClassifierWeights:
    """Per-class mean of ``features`` in ascending class-id order.

    Implemented as an averaging-matrix product so gradients reach the features.
    """
    features = T.as_tensor(features)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or len(labels) != features.shape[0]:
        raise T.ShapeError(f"features {features.shape} vs {len(labels)} labels")
    ids = np.unique(labels)
    if len(ids) == 0:
        return ClassifierWeights.empty(features.shape[1], features.dtype)
    avg = (labels[None, :] == ids[:, None]).astype(features.dtype)
    avg /= avg.sum(axis=1, keepdims=True)
    return ClassifierWeights(T.matmul(Tensor(avg), features), tuple(int(c) for c in ids))


def predict(feature, weights: ClassifierWeights, alpha: float) -> Tensor:
    """``softmax(alpha * cos(feature, rows))`` over the seen classes.

    ``feature`` may be a single ``[D]`` vector or a ``[B, D]`` batch.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    feature = T.as_tensor(feature)
    single = feature.ndim == 1
    f = T.reshape(feature, (1, feature.shape[0])) if single else feature
    probs = T.softmax(T.scale(T.cosine(f, weights.rows), alpha), axis=-1)
    return T.reshape(probs, (len(weights),)) if single else probs


def extend(old: ClassifierWeights, new: ClassifierWeights) -> ClassifierWeights:
    if len(new) == 0:
        return old
    if len(old) == 0:
        return new
    clash = set(old.class_ids) & set(new.class_ids)
    if clash:
        raise ValueError(f"class ids already in classifier: {sorted(clash)}")
    return ClassifierWeights(T.concat([old.rows, new.rows], axis=0), old.class_ids + new.class_ids)


def argmax_class(probs, class_ids: Sequence[int]):
    """Highest-probability class id; exact ties go to the lowest id.

    Accepts a ``[C]`` vector (returns an int) or a ``[B, C]`` batch (returns ids).
    """
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs)
    ids = np.asarray(class_ids, dtype=np.int64)
    if p.shape[-1] != len(ids):
        raise ValueError(f"{p.shape[-1]} probabilities for {len(ids)} classes")
    order = np.argsort(ids, kind="stable")
    best = np.argmax(p[..., order], axis=-1)
    out = ids[order][best]
    return int(out) if p.ndim == 1 else out
