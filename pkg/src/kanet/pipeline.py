"""Glue between a RunConfig and the modules: data, stream, model, checkpoints."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .adapter import KnowledgeLibrary
from .config import RunConfig
from .data import generate_synthetic, load_manifest, load_tensor, save_tensor
from .model import KANet
from .protocol import SessionSpec, build_session_stream


def load_data(cfg: RunConfig):
    if cfg.dataset == "synthetic":
        return generate_synthetic(cfg.synthetic_config())
    return load_manifest(cfg.dataset)


def session_stream(cfg: RunConfig) -> list[SessionSpec]:
    train, test = load_data(cfg)
    return build_session_stream(train, test, cfg.split_config())


def build_model(cfg: RunConfig, checkpoint=None, baseline: bool = False) -> KANet:
    model = KANet.build(cfg.encoder_config(), alpha=cfg.alpha, use_fusion=not baseline)
    if checkpoint is not None:
        model.params.load_flat(load_tensor(checkpoint).data)
    return model


def save_checkpoint(model: KANet, path) -> None:
    save_tensor(path, model.params.flat())


def layer_split(cfg: RunConfig, ks: int | None, kf: int | None) -> RunConfig:
    """Apply KS/KF overrides; either may be omitted to keep the current value."""
    if ks is None and kf is None:
        return cfg
    enc = cfg.encoder_config()
    ks = enc.knowledge_summary_layer if ks is None else ks
    kf = enc.knowledge_fusion_layer if kf is None else kf
    split = enc.with_split(ks, kf)
    return replace(cfg, n_early=split.n_early, n_middle=split.n_middle, n_post=split.n_post)


def zero_library(lib):
    """Single all-zero row in place of the library (the w/o-library ablation)."""
    return KnowledgeLibrary(np.zeros((1, lib.dim), dtype=lib.entries.dtype), (-1,))
