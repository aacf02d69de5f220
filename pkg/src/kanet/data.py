"""Datasets, the ``KANT`` binary tensor format and CSV manifests.

``KANT`` layout (all integers little-endian)::

    offset 0   4 bytes  magic b"KANT"
           4   u8       version (1)
           5   u8       dtype (0 = f32, 1 = f64)
           6   u8       ndim
           7   u8       reserved (0)
           8   ndim x u64 dims
           ..  row-major payload, little-endian
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"KANT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    pass


class IngestionError(ValueError):
    pass


def encode_tensor(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t)
    if arr.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> Tensor:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("bad magic, not a KANT tensor")
    version, code, ndim, _ = struct.unpack_from("<BBBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported KANT version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 8 + 8 * ndim
    if len(buf) < off:
        raise FormatError("truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 8)
    dt = _DTYPES[code]
    n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(buf) != off + n * dt.itemsize:
        raise FormatError(f"payload is {len(buf) - off} bytes, expected {n * dt.itemsize}")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape)
    return Tensor(arr.astype(dt.newbyteorder("="), copy=True))


def save_tensor(path, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path) -> Tensor:
    return decode_tensor(Path(path).read_bytes())


def save_ids(path, ids) -> None:
    Path(path).write_text("".join(f"{int(i)}\n" for i in ids))


def load_ids(path) -> list[int]:
    return [int(line) for line in Path(path).read_text().split()]


# ---------------------------------------------------------------- datasets


@dataclass
class LabeledDataset:
    images: np.ndarray  # [n, C, H, W]
    labels: np.ndarray  # [n] int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.split)

    def of_classes(self, classes) -> "LabeledDataset":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))

    @staticmethod
    def empty(split: str = "train") -> "LabeledDataset":
        return LabeledDataset(np.zeros((0, 0, 0, 0), dtype=np.float32), np.zeros(0, dtype=np.int64), split)


def concat_datasets(parts: list[LabeledDataset], split: str) -> LabeledDataset:
    parts = [p for p in parts if len(p)]
    if not parts:
        return LabeledDataset.empty(split)
    return LabeledDataset(
        np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]), split
    )


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 12
    train_per_class: int = 30
    test_per_class: int = 20
    image_size: int = 32
    channels: int = 3
    sigma_between: float = 1.0
    sigma_within: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_between <= 0:
            raise ValueError("sigma_between must be positive")
        if self.sigma_within < 0:
            raise ValueError("sigma_within must be non-negative")
        if self.num_classes < 1 or self.train_per_class < 0 or self.test_per_class < 0:
            raise ValueError("class and sample counts must be non-negative")


def generate_synthetic(cfg: SyntheticConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """One Gaussian blob per class in pixel space, returned as ``(train, test)``.

    Class templates are those of :func:`synthetic_templates`.
    """
    templates = synthetic_templates(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    shape = (cfg.channels, cfg.image_size, cfg.image_size)

    def draw(per_class: int, split: str) -> LabeledDataset:
        noise = rng.normal(0.0, cfg.sigma_within, size=(cfg.num_classes, per_class, *shape))
        images = (templates[:, None] + noise).reshape(-1, *shape).astype(np.float32)
        labels = np.repeat(np.arange(cfg.num_classes), per_class)
        return LabeledDataset(images, labels, split)

    train = draw(cfg.train_per_class, "train")
    test = draw(cfg.test_per_class, "test")
    return train, test


def synthetic_templates(cfg: SyntheticConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 0])
    return rng.normal(0.0, cfg.sigma_between, size=(cfg.num_classes, cfg.channels, cfg.image_size, cfg.image_size))


def load_manifest(path) -> tuple[LabeledDataset, LabeledDataset]:
    """Read ``tensor_path,label,split`` lines into ``(train, test)`` datasets.

    Relative tensor paths resolve against the manifest's directory. A header
    line ``tensor_path,label,split`` and blank lines are skipped.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"manifest not found: {path}")
    rows: dict[str, tuple[list, list]] = {"train": ([], []), "test": ([], [])}
    shape = None
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            rec = [f.strip() for f in rec]
            if lineno == 1 and rec == ["tensor_path", "label", "split"]:
                continue
            if len(rec) != 3:
                raise IngestionError(f"{path}:{lineno}: expected 3 fields, got {len(rec)}")
            tpath, label, split = rec
            try:
                label = int(label)
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: bad label {label!r}") from None
            if label < 0:
                raise IngestionError(f"{path}:{lineno}: negative label {label}")
            if split not in rows:
                raise IngestionError(f"{path}:{lineno}: split must be train or test, got {split!r}")
            tfile = Path(tpath)
            if not tfile.is_absolute():
                tfile = path.parent / tfile
            if not tfile.is_file():
                raise IngestionError(f"{path}:{lineno}: missing tensor file {tfile}")
            try:
                arr = load_tensor(tfile).data
            except FormatError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from None
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise IngestionError(f"{path}:{lineno}: image shape {arr.shape} differs from {shape}")
            rows[split][0].append(arr)
            rows[split][1].append(label)

    def build(split: str) -> LabeledDataset:
        images, labels = rows[split]
        if not images:
            return LabeledDataset.empty(split)
        return LabeledDataset(np.stack(images), np.array(labels), split)

    return build("train"), build("test")
