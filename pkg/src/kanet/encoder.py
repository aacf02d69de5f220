"""Frozen ViT-style encoder split into early, middle and post stages.

Token sequences are tensors of shape ``[B, L + 1, D]`` (or ``[L + 1, D]``
for a single image); row 0 is always the ``[class]`` token.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import blocks
from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    num_heads: int = 4
    n_early: int = 2
    n_middle: int = 3
    n_post: int = 2
    mlp_ratio: int = 4
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if min(self.n_early, self.n_middle, self.n_post) < 1:
            raise ValueError("every stage needs at least one layer")

    @property
    def num_layers(self) -> int:
        return self.n_early + self.n_middle + self.n_post

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def knowledge_summary_layer(self) -> int:
        return self.n_early

    @property
    def knowledge_fusion_layer(self) -> int:
        return self.n_early + self.n_middle

    def with_split(self, ks: int, kf: int) -> "EncoderConfig":
        """Same depth, library taken after layer ``ks``, fusion after layer ``kf``."""
        total = self.num_layers
        if not 1 <= ks < kf < total:
            raise ValueError(f"need 1 <= KS < KF < {total}, got KS={ks}, KF={kf}")
        return replace(self, n_early=ks, n_middle=kf - ks, n_post=total - kf)


def valid_splits(num_layers: int) -> list[tuple[int, int]]:
    return [(ks, kf) for ks in range(1, num_layers) for kf in range(ks + 1, num_layers)]


class Encoder:
    """Seeded, frozen transformer. No parameter ever requires a gradient."""

    def __init__(self, cfg: EncoderConfig, dtype=np.float32, _weights: dict | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        if _weights is None:
            _weights = self._init_weights()
        self.stem = {k: Tensor(np.asarray(v, dtype=self.dtype)) for k, v in _weights["stem"].items()}
        self.layers = [
            {k: Tensor(np.asarray(v, dtype=self.dtype)) for k, v in layer.items()}
            for layer in _weights["layers"]
        ]
        if len(self.layers) != cfg.num_layers:
            raise ValueError(f"weights have {len(self.layers)} layers, config wants {cfg.num_layers}")

    def _init_weights(self) -> dict:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        d, p = cfg.embed_dim, cfg.patch_size
        std = cfg.init_std
        stem = {
            "patch_w": rng.normal(0.0, std, size=(cfg.channels * p * p, d)),
            "patch_b": np.zeros(d),
            "cls": rng.normal(0.0, std, size=(d,)),
            "pos": rng.normal(0.0, std, size=(cfg.num_patches + 1, d)),
        }
        layers = [
            blocks.init_block(rng, d, cfg.mlp_ratio, std, attn_bias=True, dtype=np.float64)
            for _ in range(cfg.num_layers)
        ]
        return {"stem": stem, "layers": layers}

    # ------------------------------------------------------------ variants

    def astype(self, dtype) -> "Encoder":
        return Encoder(self.cfg, dtype, self._raw())

    def with_split(self, ks: int, kf: int) -> "Encoder":
        """Re-partition the same frozen layers into stages."""
        return Encoder(self.cfg.with_split(ks, kf), self.dtype, self._raw())

    def _raw(self) -> dict:
        return {
            "stem": {k: v.data for k, v in self.stem.items()},
            "layers": [{k: v.data for k, v in layer.items()} for layer in self.layers],
        }

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"stem.{k}": v.data for k, v in self.stem.items()}
        for i, layer in enumerate(self.layers):
            out.update({f"layer{i}.{k}": v.data for k, v in layer.items()})
        return out

    # ------------------------------------------------------------ stages

    def patch_embed(self, images) -> Tensor:
        x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=self.dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"expected images of shape [B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}], got {x.shape}"
            )
        b, c, s, p = x.shape[0], cfg.channels, cfg.image_size, cfg.patch_size
        g = s // p
        patches = x.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * p * p)
        tokens = patches @ self.stem["patch_w"].data + self.stem["patch_b"].data
        cls = np.broadcast_to(self.stem["cls"].data, (b, 1, cfg.embed_dim))
        seq = np.concatenate([cls, tokens], axis=1) + self.stem["pos"].data
        return Tensor(seq[0] if single else seq)

    def _run(self, x, layers) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(f"token dim {x.shape[-1]} != embed_dim {self.cfg.embed_dim}")
        if x.shape[-2] != self.cfg.num_patches + 1:
            raise ShapeError(f"expected {self.cfg.num_patches + 1} tokens, got {x.shape[-2]}")
        for p in layers:
            x = blocks.block(x, x, p, self.cfg.num_heads)
        return x

    def encode_early(self, t) -> Tensor:
        return self._run(t, self.layers[: self.cfg.n_early])

    def encode_middle(self, t) -> Tensor:
        a = self.cfg.n_early
        return self._run(t, self.layers[a : a + self.cfg.n_middle])

    def encode_post(self, t) -> Tensor:
        return self._run(t, self.layers[self.cfg.knowledge_fusion_layer :])

    def forward(self, images) -> Tensor:
        return self.encode_post(self.encode_middle(self.encode_early(self.patch_embed(images))))

    # ------------------------------------------------------------ io

    def save(self, directory) -> None:
        from .data import save_tensor

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, arr in self.parameters().items():
            save_tensor(directory / f"{name}.kant", arr)

    @classmethod
    def load(cls, directory, cfg: EncoderConfig, dtype=np.float32) -> "Encoder":
        from .data import load_tensor

        directory = Path(directory)
        template = cls(cfg, dtype)
        raw = template._raw()
        for k in raw["stem"]:
            raw["stem"][k] = load_tensor(directory / f"stem.{k}.kant").data
        for i, layer in enumerate(raw["layers"]):
            for k in layer:
                layer[k] = load_tensor(directory / f"layer{i}.{k}.kant").data
        return cls(cfg, dtype, raw)
