"""Run configuration: one flat JSON object, flags override file values."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .data import STYLES
from .discriminator import CriticConfig
from .generator import GeneratorConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # optimisation (see TrainConfig)
    lam1: float = 1.0
    lam2: float = 0.1
    n_roll: int = 5
    g_steps: int = 1
    d_steps: int = 3
    gen_lr: float = 1e-4
    critic_lr: float = 5e-5
    gen_batch: int = 64
    critic_batch: int = 80
    clip: float = 0.01
    adv_epochs: int = 20
    pretrain_epochs: int = 30
    disc_pretrain_steps: int = 100
    max_len: int = 15          # generated tokens; encoded captions hold max_len + 1 ids
    seed: int = 0
    val_metric: str = "cider"
    # generator
    embed_dim: int = 32
    hidden: int = 64
    attn_dim: int = 32
    # critic
    critic_embed_dim: int = 32
    windows: tuple = (2, 3, 4, 5)
    filters: int = 32
    # data
    style: str = "positive"    # styled split used for adversarial training
    critic_pretrain_style: str = "factual"
    dataset: str | None = None
    lexicon: str | None = None
    checkpoint_dir: str | None = None
    report: str | None = None

    def __post_init__(self):
        self.windows = tuple(int(w) for w in self.windows)

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        unknown = sorted(set(obj) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        obj = {}
        if path is not None:
            try:
                obj = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from None
            if not isinstance(obj, dict):
                raise ConfigError(f"{path}: config must be a JSON object")
        obj.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["windows"] = list(self.windows)
        return d

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    def generator_config(self, vocab_size: int, feature_dim: int) -> GeneratorConfig:
        return GeneratorConfig(vocab_size, feature_dim, self.embed_dim, self.hidden, self.attn_dim)

    def critic_config(self, vocab_size: int) -> CriticConfig:
        return CriticConfig(vocab_size, self.max_len, self.critic_embed_dim, self.windows, self.filters, self.clip)

    @property
    def seq_len(self) -> int:
        return self.max_len + 1

    def validate(self):
        try:
            self.train_config().check()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for name in ("embed_dim", "hidden", "attn_dim", "critic_embed_dim", "filters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.windows or min(self.windows) < 1:
            raise ConfigError("critic windows must be positive")
        if max(self.windows) > self.max_len:
            raise ConfigError(f"critic window {max(self.windows)} exceeds max_len {self.max_len}")
        if self.style not in STYLES or self.style == "factual":
            raise ConfigError(f"style must be positive or negative, got {self.style!r}")
        if self.critic_pretrain_style not in STYLES:
            raise ConfigError(f"unknown critic_pretrain_style {self.critic_pretrain_style!r}")
