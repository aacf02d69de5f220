"""Incremental pseudo episode learning on the base session."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import adapter
from . import tensor as T
from .adapter import KnowledgeLibrary
from .classifier import ClassifierWeights, extend, predict, prototypes
from .model import FrozenFeatures, KANet
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class IpelConfig:
    ways: int = 20
    shots: int = 10
    query_per_class: int = 15
    n_po_test: int = 128
    tasks_per_epoch: int = 200
    epochs: int = 50
    lr0: float = 0.03
    alpha: float = 16.0
    lambda_adapt: float = 1.5
    lambda_balance: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if min(self.ways, self.shots, self.query_per_class) < 1:
            raise ConfigError("ways, shots and query_per_class must be positive")
        if self.n_po_test < 0 or self.tasks_per_epoch < 0 or self.epochs < 0:
            raise ConfigError("counts must be non-negative")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.tasks_per_epoch


@dataclass
class EpisodeTask:
    support: np.ndarray  # indices into the base training set
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    pseudo_old_test: np.ndarray
    pseudo_old_test_labels: np.ndarray
    pseudo_new: tuple[int, ...]
    pseudo_old: tuple[int, ...]
    pseudo_old_knowledge: KnowledgeLibrary
    pseudo_old_classifier: ClassifierWeights


def sample_episode(labels, lib_base: KnowledgeLibrary, theta_base: ClassifierWeights,
                   cfg: IpelConfig, rng: np.random.Generator) -> EpisodeTask:
    """Draw one pseudo incremental task from base-session labels.

    ``labels`` are the base training labels; returned indices point into them.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if cfg.ways > len(classes):
        raise ConfigError(f"{cfg.ways}-way episodes need at least {cfg.ways} base classes, have {len(classes)}")
    need = cfg.shots + cfg.query_per_class
    pn = np.sort(rng.choice(classes, size=cfg.ways, replace=False))
    support, query = [], []
    for c in pn:
        idx = np.flatnonzero(labels == c)
        if len(idx) < need:
            raise ConfigError(f"class {c} has {len(idx)} samples, episodes need {need}")
        idx = rng.permutation(idx)
        support.append(idx[: cfg.shots])
        query.append(idx[cfg.shots : need])
    support = np.concatenate(support)
    query = np.concatenate(query)

    po = np.setdiff1d(classes, pn)
    po_pool = np.flatnonzero(np.isin(labels, po))
    if cfg.n_po_test > len(po_pool):
        raise ConfigError(f"need {cfg.n_po_test} pseudo-old test samples, only {len(po_pool)} available")
    po_test = np.sort(rng.choice(po_pool, size=cfg.n_po_test, replace=False))
    po_ids = tuple(int(c) for c in po)
    return EpisodeTask(
        support=support,
        support_labels=labels[support],
        query=query,
        query_labels=labels[query],
        pseudo_old_test=po_test,
        pseudo_old_test_labels=labels[po_test],
        pseudo_new=tuple(int(c) for c in pn),
        pseudo_old=po_ids,
        pseudo_old_knowledge=lib_base.select(po_ids),
        pseudo_old_classifier=theta_base.select(po_ids),
    )


def _pseudo_new_library(ep: EpisodeTask, feats: FrozenFeatures) -> KnowledgeLibrary:
    return adapter.summarize_library(adapter.group_by_label(feats.early_cls[ep.support], ep.support_labels))


def adaptation_loss(ep: EpisodeTask, model: KANet, feats: FrozenFeatures) -> Tensor:
    """Cross-entropy of queries against support prototypes, both refined with the pseudo-new library."""
    lib_pn = _pseudo_new_library(ep, feats)
    ns = len(ep.support)
    f = model.refine_middle(feats.middle[np.concatenate([ep.support, ep.query])], lib_pn)
    theta_pn = prototypes(f[:ns], ep.support_labels)
    probs = predict(f[ns:], theta_pn, model.alpha)
    return T.cross_entropy(probs, theta_pn.positions(ep.query_labels))


def balance_loss(ep: EpisodeTask, model: KANet, feats: FrozenFeatures) -> Tensor:
    """Cross-entropy over pseudo-old + pseudo-new classes with the pseudo-global library."""
    lib_pg = ep.pseudo_old_knowledge.concat(_pseudo_new_library(ep, feats))
    ns = len(ep.support)
    test_idx = np.concatenate([ep.pseudo_old_test, ep.query])
    test_labels = np.concatenate([ep.pseudo_old_test_labels, ep.query_labels])
    f = model.refine_middle(feats.middle[np.concatenate([ep.support, test_idx])], lib_pg)
    old = ep.pseudo_old_classifier
    old = ClassifierWeights(Tensor(old.rows.data.astype(f.dtype, copy=False)), old.class_ids)
    theta_pg = extend(old, prototypes(f[:ns], ep.support_labels))
    probs = predict(f[ns:], theta_pg, model.alpha)
    return T.cross_entropy(probs, theta_pg.positions(test_labels))


def total_loss(ep: EpisodeTask, model: KANet, feats: FrozenFeatures, cfg: IpelConfig):
    """Weighted sum of both losses; returns ``(total, adapt, balance)``."""
    la = adaptation_loss(ep, model, feats)
    lb = balance_loss(ep, model, feats)
    return T.add(T.scale(la, cfg.lambda_adapt), T.scale(lb, cfg.lambda_balance)), la, lb


def cosine_annealed_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        return lr0
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


class Adam:
    def __init__(self, params: list[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def base_library(feats: FrozenFeatures) -> KnowledgeLibrary:
    return adapter.summarize_library(adapter.group_by_label(feats.early_cls, feats.labels))


def base_classifier(model: KANet, feats: FrozenFeatures, lib: KnowledgeLibrary) -> ClassifierWeights:
    """Base-class prototypes under the current fusion parameters (untaped)."""
    return prototypes(model.refine_batched(feats.middle, lib), feats.labels).detach()


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    library: KnowledgeLibrary | None = None


def train(base_feats: FrozenFeatures, model: KANet, cfg: IpelConfig, on_step=None) -> TrainResult:
    """Optimise the fusion parameters with Adam over ``epochs x tasks_per_epoch`` episodes.

    Only ``model.params`` is mutated. ``on_step`` receives each log record.
    """
    rng = np.random.default_rng(cfg.seed)
    lib = base_library(base_feats)
    opt = Adam(model.params.parameters(), (cfg.beta1, cfg.beta2), cfg.adam_eps)
    result = TrainResult(library=lib)
    step = 0
    for epoch in range(cfg.epochs):
        theta_c = base_classifier(model, base_feats, lib)
        for task in range(cfg.tasks_per_epoch):
            ep = sample_episode(base_feats.labels, lib, theta_c, cfg, rng)
            lr = cosine_annealed_lr(step, cfg.total_steps, cfg.lr0)
            model.params.zero_grad()
            with Tape() as tape:
                loss, la, lb = total_loss(ep, model, base_feats, cfg)
            values = float(loss.data), float(la.data), float(lb.data)
            if not all(math.isfinite(v) for v in values):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} task {task}: total={values[0]} adapt={values[1]} "
                    f"balance={values[2]} lr={lr}"
                )
            T.backward(loss, tape)
            opt.step(lr)
            rec = {"epoch": epoch, "task": task, "loss_adapt": values[1], "loss_balance": values[2],
                   "loss": values[0], "lr": lr}
            result.log.append(rec)
            if on_step is not None:
                on_step(rec)
            step += 1
        if cfg.tasks_per_epoch:
            recent = result.log[-cfg.tasks_per_epoch :]
            log.info("epoch %d: loss %.4f", epoch, float(np.mean([r["loss"] for r in recent])))
    return result
