"""Frozen encoder + fusion parameters bundled for training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adapter
from .adapter import FusionParams, KnowledgeLibrary
from .encoder import Encoder, EncoderConfig
from .tensor import Tensor


@dataclass
class FrozenFeatures:
    """Outputs of the frozen early and middle stages for a set of images.

    These never change during training, so they are computed once.
    """

    early_cls: np.ndarray  # [n, D]   x_e^0
    middle: np.ndarray  # [n, L+1, D]   x_m
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


class KANet:
    def __init__(self, encoder: Encoder, params: FusionParams, alpha: float = 16.0, use_fusion: bool = True):
        self.encoder = encoder
        self.params = params
        self.alpha = alpha
        self.use_fusion = use_fusion

    @classmethod
    def build(cls, enc_cfg: EncoderConfig, alpha: float = 16.0, fusion_seed: int | None = None,
              dtype=np.float32, use_fusion: bool = True) -> "KANet":
        encoder = Encoder(enc_cfg, dtype)
        params = FusionParams.init(
            enc_cfg.embed_dim, enc_cfg.num_heads, enc_cfg.mlp_ratio, enc_cfg.init_std,
            seed=enc_cfg.seed if fusion_seed is None else fusion_seed, dtype=dtype,
        )
        return cls(encoder, params, alpha, use_fusion)

    @property
    def fuse_fn(self):
        return adapter.fuse if self.use_fusion else adapter.identity_fuse

    def astype(self, dtype) -> "KANet":
        return KANet(self.encoder.astype(dtype), self.params.astype(dtype), self.alpha, self.use_fusion)

    def frozen_features(self, images, labels, batch_size: int = 256) -> FrozenFeatures:
        images = np.asarray(images)
        d, n_tok = self.encoder.cfg.embed_dim, self.encoder.cfg.num_patches + 1
        early = np.zeros((len(images), d), dtype=self.encoder.dtype)
        middle = np.zeros((len(images), n_tok, d), dtype=self.encoder.dtype)
        for s in range(0, len(images), batch_size):
            x_e = self.encoder.encode_early(self.encoder.patch_embed(images[s : s + batch_size]))
            early[s : s + batch_size] = x_e.data[:, 0, :]
            middle[s : s + batch_size] = self.encoder.encode_middle(x_e).data
        return FrozenFeatures(early, middle, np.asarray(labels, dtype=np.int64))

    def refine_middle(self, x_m, lib: KnowledgeLibrary) -> Tensor:
        return adapter.refine_middle(x_m, lib, self.encoder, self.params, self.fuse_fn)

    def refine_batched(self, x_m: np.ndarray, lib: KnowledgeLibrary, batch_size: int = 256) -> np.ndarray:
        """Untaped refinement in chunks; returns ``[n, D]`` features."""
        out = np.zeros((len(x_m), x_m.shape[-1]), dtype=self.encoder.dtype)
        for s in range(0, len(x_m), batch_size):
            out[s : s + batch_size] = self.refine_middle(x_m[s : s + batch_size], lib).data
        return out

    def refine(self, images, lib: KnowledgeLibrary) -> Tensor:
        return adapter.refine(images, lib, self.encoder, self.params, self.fuse_fn)
