"""Run configuration: plain ``key = value`` files plus command-line overrides."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data import SyntheticConfig
from .encoder import EncoderConfig
from .ipel import IpelConfig
from .protocol import SplitConfig


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # encoder: 2/3/2 layer split at D=64
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
    # IPEL: 20-way 10-shot, 15 queries, 128 pseudo-old samples, 200 tasks x 50 epochs
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
    # data: "synthetic" or a path to a tensor_path,label,split manifest
    dataset: str = "synthetic"
    num_classes: int = 100
    train_per_class: int = 30
    test_per_class: int = 20
    sigma_between: float = 1.0
    sigma_within: float = 1.0
    # session split: 60 base classes + 8 sessions of 5-way 5-shot
    base_classes: int = 60
    sessions: int = 8
    session_ways: int = 5
    session_shots: int = 5
    # run
    seed: int = 0
    out_dir: str = "runs/default"
    batch_size: int = 256

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.image_size, patch_size=self.patch_size, channels=self.channels,
            embed_dim=self.embed_dim, num_heads=self.num_heads, n_early=self.n_early,
            n_middle=self.n_middle, n_post=self.n_post, mlp_ratio=self.mlp_ratio,
            init_std=self.init_std, seed=self.seed,
        )

    def ipel_config(self) -> IpelConfig:
        return IpelConfig(
            ways=self.ways, shots=self.shots, query_per_class=self.query_per_class,
            n_po_test=self.n_po_test, tasks_per_epoch=self.tasks_per_epoch, epochs=self.epochs,
            lr0=self.lr0, alpha=self.alpha, lambda_adapt=self.lambda_adapt,
            lambda_balance=self.lambda_balance, seed=self.seed,
        )

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(
            num_classes=self.num_classes, train_per_class=self.train_per_class,
            test_per_class=self.test_per_class, image_size=self.image_size, channels=self.channels,
            sigma_between=self.sigma_between, sigma_within=self.sigma_within, seed=self.seed,
        )

    def split_config(self) -> SplitConfig:
        return SplitConfig(self.base_classes, self.sessions, self.session_ways, self.session_shots, self.seed)

    def validate(self) -> "RunConfig":
        """Build every sub-config so bad values fail before any side effect."""
        self.encoder_config()
        ipel = self.ipel_config()
        split = self.split_config()
        if self.batch_size < 1:
            raise ConfigFileError("batch_size must be positive")
        if self.base_classes < 1 or self.sessions < 0 or self.session_ways < 1 or self.session_shots < 1:
            raise ConfigFileError("split counts must be positive")
        if ipel.ways > self.base_classes:
            raise ConfigFileError(f"ways={ipel.ways} exceeds base_classes={self.base_classes}")
        if self.dataset == "synthetic":
            self.synthetic_config()
            if self.num_classes < split.total_classes:
                raise ConfigFileError(f"num_classes={self.num_classes} < {split.total_classes} needed by the split")
            if ipel.epochs and ipel.tasks_per_epoch and self.train_per_class < ipel.shots + ipel.query_per_class:
                raise ConfigFileError("train_per_class must cover shots + query_per_class")
            if self.train_per_class < self.session_shots:
                raise ConfigFileError("train_per_class must cover session_shots")
        elif not Path(self.dataset).is_file():
            raise ConfigFileError(f"dataset manifest not found: {self.dataset}")
        return self

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        return replace(self, **{k: _coerce(self, k, v) for k, v in overrides.items()})

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(cfg: RunConfig, key: str, value: str):
    if key not in _FIELDS:
        raise ConfigFileError(f"unknown config key {key!r}")
    kind = type(getattr(cfg, key))
    if kind is bool:
        low = value.strip().lower()
        if low not in ("true", "false", "1", "0"):
            raise ConfigFileError(f"{key}: expected a boolean, got {value!r}")
        return low in ("true", "1")
    try:
        return kind(value.strip())
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigFileError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigFileError(f"config file not found: {path}")
        cfg = cfg.with_overrides(parse_config_text(path.read_text(), str(path)))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
