"""Knowledge vector library and query-based knowledge fusion."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import blocks
from . import tensor as T
from .tensor import Tensor


class EmptyClassError(ValueError):
    pass


class ClassConflictError(ValueError):
    pass


@dataclass(frozen=True)
class KnowledgeLibrary:
    """Class-level ``[class]`` tokens, one row per class id.

    Rows are detached arrays: the library is a fusion target, never trained.
    """

    entries: np.ndarray  # [|C|, D]
    class_ids: tuple[int, ...]

    def __post_init__(self):
        if self.entries.ndim != 2 or self.entries.shape[0] != len(self.class_ids):
            raise ValueError(f"{self.entries.shape} entries for {len(self.class_ids)} class ids")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ClassConflictError("duplicate class ids in library")

    def __len__(self):
        return len(self.class_ids)

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def tensor(self) -> Tensor:
        return Tensor(self.entries)

    def select(self, ids: Sequence[int]) -> "KnowledgeLibrary":
        pos = {c: i for i, c in enumerate(self.class_ids)}
        rows = [pos[int(c)] for c in ids]
        return KnowledgeLibrary(self.entries[rows], tuple(int(c) for c in ids))

    def concat(self, other: "KnowledgeLibrary") -> "KnowledgeLibrary":
        clash = set(self.class_ids) & set(other.class_ids)
        if clash:
            raise ClassConflictError(f"class ids already in library: {sorted(clash)}")
        return KnowledgeLibrary(
            np.concatenate([self.entries, other.entries.astype(self.entries.dtype)]),
            self.class_ids + other.class_ids,
        )

    @staticmethod
    def empty(dim: int, dtype=np.float32) -> "KnowledgeLibrary":
        return KnowledgeLibrary(np.zeros((0, dim), dtype=dtype), ())

    def save(self, path) -> None:
        from .data import save_ids, save_tensor

        path = Path(path)
        save_tensor(path, self.entries)
        save_ids(path.with_suffix(".ids"), self.class_ids)

    @classmethod
    def load(cls, path) -> "KnowledgeLibrary":
        from .data import load_ids, load_tensor

        path = Path(path)
        return cls(load_tensor(path).data, tuple(load_ids(path.with_suffix(".ids"))))


def summarize_library(class_token_sets: Mapping[int, Sequence]) -> KnowledgeLibrary:
    """Average each class's ``[class]`` tokens; rows in ascending class id."""
    ids = sorted(int(c) for c in class_token_sets)
    rows = []
    for c in ids:
        toks = np.asarray(class_token_sets[c])
        if toks.size == 0:
            raise EmptyClassError(f"class {c} has no tokens")
        rows.append(toks.reshape(len(toks), -1).mean(axis=0))
    if not rows:
        raise EmptyClassError("no classes to summarize")
    return KnowledgeLibrary(np.stack(rows), tuple(ids))


def extend_library(lib: KnowledgeLibrary, new_sets: Mapping[int, Sequence]) -> KnowledgeLibrary:
    if not new_sets:
        return lib
    clash = set(lib.class_ids) & {int(c) for c in new_sets}
    if clash:
        raise ClassConflictError(f"class ids already in library: {sorted(clash)}")
    return lib.concat(summarize_library(new_sets))


def group_by_label(tokens: np.ndarray, labels) -> dict[int, np.ndarray]:
    labels = np.asarray(labels)
    return {int(c): tokens[labels == c] for c in np.unique(labels)}


# ---------------------------------------------------------------- fusion unit


class FusionParams:
    """Trainable weights of the fusion block (one post-norm transformer block)."""

    def __init__(self, weights: Mapping[str, np.ndarray], num_heads: int):
        self.num_heads = num_heads
        self.tensors = {k: Tensor(np.array(v), requires_grad=True) for k, v in weights.items()}
        d = self.tensors["wq"].shape[0]
        if d % num_heads:
            raise ValueError(f"dim {d} not divisible by {num_heads} heads")

    @classmethod
    def init(cls, dim: int, num_heads: int = 4, mlp_ratio: int = 4, std: float = 0.02,
             seed: int = 0, dtype=np.float32, zero_out_proj: bool = True) -> "FusionParams":
        rng = np.random.default_rng([seed, 7])
        w = blocks.init_block(rng, dim, mlp_ratio, std, attn_bias=False, zero_out_proj=zero_out_proj, dtype=dtype)
        return cls(w, num_heads)

    @property
    def dim(self) -> int:
        return self.tensors["wq"].shape[0]

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self):
        for p in self.tensors.values():
            p.grad = None

    def astype(self, dtype) -> "FusionParams":
        return FusionParams({k: v.data.astype(dtype) for k, v in self.tensors.items()}, self.num_heads)

    def copy(self) -> "FusionParams":
        return self.astype(self.tensors["wq"].dtype)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.data.ravel() for v in self.tensors.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.size != self.flat().size:
            raise ValueError(f"checkpoint has {vec.size} values, params need {self.flat().size}")
        off = 0
        for t in self.tensors.values():
            n = t.data.size
            t.data = vec[off : off + n].reshape(t.shape).astype(t.dtype)
            off += n


def _as_queries(x_m0) -> tuple[Tensor, bool]:
    x = T.as_tensor(x_m0)
    single = x.ndim == 1
    if single:
        x = T.reshape(x, (1, x.shape[0]))
    return x, single


def fuse(x_m0, lib: KnowledgeLibrary, params: FusionParams) -> Tensor:
    """Cross-attention of middle ``[class]`` tokens over the library.

    ``x_m0`` is ``[B, D]`` (or ``[D]``); the library rows serve as keys and
    values. Returns the enhanced tokens with the same shape.
    """
    if len(lib) == 0:
        raise ValueError("fusion needs a non-empty knowledge library")
    x, single = _as_queries(x_m0)
    b, d = x.shape
    if d != lib.dim:
        raise T.ShapeError(f"query dim {d} != library dim {lib.dim}")
    q = T.reshape(x, (b, 1, d))
    out = blocks.block(q, Tensor(lib.entries.astype(x.dtype, copy=False)), params.tensors, params.num_heads)
    return T.reshape(out, (d,) if single else (b, d))


def identity_fuse(x_m0, lib: KnowledgeLibrary, params: FusionParams) -> Tensor:
    """No-fusion hook: the baseline encoder path."""
    return T.as_tensor(x_m0)


def attention_weights(x_m0, lib: KnowledgeLibrary, params: FusionParams) -> np.ndarray:
    """Per-head attention over library rows: ``[heads, |C|]`` (``[B, heads, |C|]`` for batches)."""
    if len(lib) == 0:
        raise ValueError("attention needs a non-empty knowledge library")
    x, single = _as_queries(x_m0)
    b, d = x.shape
    _, w = blocks.attention(T.reshape(x, (b, 1, d)), Tensor(lib.entries.astype(x.dtype)), params.tensors,
                            params.num_heads)
    w = w.data[:, :, 0, :]
    return w[0] if single else w


FuseFn = Callable[..., Tensor]


def refine_middle(x_m, lib: KnowledgeLibrary, encoder, params: FusionParams, fuse_fn: FuseFn = fuse) -> Tensor:
    """Replace the middle ``[class]`` token by its fused version and run the post stage.

    Only row 0 is replaced; patch tokens pass through unchanged. Returns the
    post-stage ``[class]`` tokens ``[B, D]``.
    """
    x_m = T.as_tensor(x_m)
    single = x_m.ndim == 2
    if single:
        x_m = T.reshape(x_m, (1, *x_m.shape))
    b, n, d = x_m.shape
    fused = fuse_fn(x_m[:, 0, :], lib, params)
    seq = T.concat([T.reshape(fused, (b, 1, d)), x_m[:, 1:, :]], axis=1)
    out = encoder.encode_post(seq)[:, 0, :]
    return T.reshape(out, (d,)) if single else out


def refine(images, lib: KnowledgeLibrary, encoder, params: FusionParams, fuse_fn: FuseFn = fuse) -> Tensor:
    x_m = encoder.encode_middle(encoder.encode_early(encoder.patch_embed(images)))
    return refine_middle(x_m, lib, encoder, params, fuse_fn)
