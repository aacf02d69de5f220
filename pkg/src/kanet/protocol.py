"""FSCIL session stream, the incremental procedure and its metrics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import adapter
from .adapter import KnowledgeLibrary
from .classifier import ClassifierWeights, argmax_class, extend, predict, prototypes
from .data import LabeledDataset
from .model import KANet


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class SplitConfig:
    base_classes: int
    sessions: int  # incremental sessions after the base one
    ways: int
    shots: int = 5
    seed: int = 0

    @property
    def total_classes(self) -> int:
        return self.base_classes + self.sessions * self.ways


CIFAR100_SPLIT = SplitConfig(base_classes=60, sessions=8, ways=5, shots=5)
CUB200_SPLIT = SplitConfig(base_classes=100, sessions=10, ways=10, shots=5)
SYNTHETIC12_SPLIT = SplitConfig(base_classes=6, sessions=3, ways=2, shots=5)


@dataclass
class SessionSpec:
    index: int
    classes: tuple[int, ...]
    train: LabeledDataset
    test: LabeledDataset


def build_session_stream(train: LabeledDataset, test: LabeledDataset, split: SplitConfig) -> list[SessionSpec]:
    """Partition classes (ascending id) into a base session and K-shot incremental sessions."""
    classes = sorted(set(train.classes) | set(test.classes))
    if len(classes) < split.total_classes:
        raise ProtocolError(f"split needs {split.total_classes} classes, dataset has {len(classes)}")
    rng = np.random.default_rng(split.seed)
    groups = [classes[: split.base_classes]]
    for s in range(split.sessions):
        a = split.base_classes + s * split.ways
        groups.append(classes[a : a + split.ways])

    stream = []
    for i, group in enumerate(groups):
        tr = train.of_classes(group)
        if i > 0:
            keep = []
            for c in group:
                idx = np.flatnonzero(tr.labels == c)
                if len(idx) < split.shots:
                    raise ProtocolError(f"class {c} has {len(idx)} training samples, need {split.shots}")
                keep.append(np.sort(rng.choice(idx, size=split.shots, replace=False)))
            tr = tr.subset(np.concatenate(keep))
        else:
            missing = [c for c in group if not np.any(tr.labels == c)]
            if missing:
                raise ProtocolError(f"base classes without training data: {missing}")
        stream.append(SessionSpec(i, tuple(int(c) for c in group), tr, test.of_classes(group)))
    return stream


# ---------------------------------------------------------------- metrics


def avg_accuracy(accs) -> float:
    accs = list(accs)
    if not accs:
        raise ValueError("no accuracies")
    return float(np.mean(accs))


def pd(accs) -> float:
    accs = list(accs)
    if not accs:
        raise ValueError("no accuracies")
    return float(accs[0] - accs[-1])


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if len(labels) == 0:
        return math.nan
    return 100.0 * float(np.mean(pred == labels))


def base_new_accuracy(pred, labels, base_classes) -> tuple[float, float]:
    pred, labels = np.asarray(pred), np.asarray(labels)
    is_base = np.isin(labels, list(base_classes))
    return accuracy(pred[is_base], labels[is_base]), accuracy(pred[~is_base], labels[~is_base])


def _r2(x: float):
    return None if math.isnan(x) else round(x, 2)


@dataclass
class MetricsReport:
    per_session_accuracy: list[float]
    base_acc: float = math.nan
    new_acc: float = math.nan
    session_classes: list[int] = field(default_factory=list)

    @property
    def avg(self) -> float:
        return avg_accuracy(self.per_session_accuracy)

    @property
    def pd(self) -> float:
        return pd(self.per_session_accuracy)

    def to_dict(self) -> dict:
        return {
            "per_session_accuracy": [_r2(a) for a in self.per_session_accuracy],
            "avg": _r2(self.avg),
            "pd": _r2(self.pd),
            "base_acc": _r2(self.base_acc),
            "new_acc": _r2(self.new_acc),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["session", "num_classes", "accuracy"])
        for i, a in enumerate(self.per_session_accuracy):
            n = self.session_classes[i] if i < len(self.session_classes) else ""
            w.writerow([i, n, f"{a:.2f}"])
        return buf.getvalue()


@dataclass
class SessionState:
    index: int
    library: KnowledgeLibrary
    classifier: ClassifierWeights
    predictions: np.ndarray
    labels: np.ndarray


def run_incremental(model: KANet, stream: list[SessionSpec],
                    library_override: Optional[Callable[[KnowledgeLibrary], KnowledgeLibrary]] = None,
                    on_session: Optional[Callable[[SessionState], None]] = None,
                    batch_size: int = 256) -> MetricsReport:
    """Walk the session stream and score each session on all test data seen so far.

    Per session: extend the library with the session's class-mean early
    tokens, refine its training images with the full updated library, append
    their prototypes to the classifier, then classify the joint test set.
    ``library_override`` replaces the library used for refinement (ablation).
    """
    lib: KnowledgeLibrary | None = None
    clf: ClassifierWeights | None = None
    test_x, test_y = [], []
    accs, n_classes = [], []
    pred = labels = None
    for expected, sess in enumerate(stream):
        if sess.index != expected:
            raise ProtocolError(f"session {sess.index} arrived where session {expected} was expected")
        tr = model.frozen_features(sess.train.images, sess.train.labels, batch_size)
        sets = adapter.group_by_label(tr.early_cls, tr.labels)
        lib = adapter.summarize_library(sets) if lib is None else adapter.extend_library(lib, sets)
        use_lib = library_override(lib) if library_override else lib

        protos = prototypes(model.refine_batched(tr.middle, use_lib, batch_size), tr.labels).detach()
        clf = protos if clf is None else extend(clf, protos)

        if len(sess.test):
            te = model.frozen_features(sess.test.images, sess.test.labels, batch_size)
            test_x.append(te.middle)
            test_y.append(te.labels)
        x = np.concatenate(test_x) if test_x else np.zeros((0,))
        labels = np.concatenate(test_y) if test_y else np.zeros(0, dtype=np.int64)
        if len(labels):
            probs = predict(model.refine_batched(x, use_lib, batch_size), clf, model.alpha)
            pred = argmax_class(probs, clf.class_ids)
        else:
            pred = np.zeros(0, dtype=np.int64)
        accs.append(accuracy(pred, labels))
        n_classes.append(len(clf))
        if on_session is not None:
            on_session(SessionState(sess.index, lib, clf, pred, labels))

    if not stream:
        raise ProtocolError("empty session stream")
    base, new = base_new_accuracy(pred, labels, stream[0].classes)
    return MetricsReport(accs, base, new, n_classes)
