"""Run configuration shared by the model, the trainer and the CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

FAMILIES = ("gcn", "gine", "gat", "lcgn")
AGGREGATES = ("mean", "sum", "max")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # optimisation schedule (Adam, lr dropped by lr_drop_factor every lr_drop_epoch epochs)
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    lr_drop_epoch: int = 90
    lr_drop_factor: float = 10.0
    clip_norm: float = 5.0
    seed: int = 0

    # reasoning program
    family: str = "gat"
    M: int = 5
    hidden_dim: int = 300
    embed_dim: int = 300
    instruction_dim: int = 512
    gat_heads: int = 4
    gine_theta_depth: int = 1
    layer_residual: bool | None = None
    layer_dropout: bool | None = None
    aggregate: str = "mean"
    answer_hidden: int = 512
    dropout: float = 0.1

    # question encoder / instruction decoder
    lang_heads: int = 4
    ffn_dim: int = 1024
    encoder_layers: int = 2
    decoder_layers: int = 2
    max_len: int = 30

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.aggregate not in AGGREGATES:
            raise ConfigError(f"unknown aggregate {self.aggregate!r}")
        if self.gine_theta_depth not in (1, 2):
            raise ConfigError("gine_theta_depth must be 1 or 2")
        for name in ("lr", "batch_size", "epochs", "lr_drop_epoch", "lr_drop_factor", "M",
                     "hidden_dim", "embed_dim", "instruction_dim", "gat_heads", "answer_hidden",
                     "lang_heads", "ffn_dim", "max_len"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.hidden_dim % self.gat_heads:
            raise ConfigError("hidden_dim must be divisible by gat_heads")
        if self.instruction_dim % self.lang_heads:
            raise ConfigError("instruction_dim must be divisible by lang_heads")

    @property
    def residual(self) -> bool:
        if self.layer_residual is None:
            return self.family == "gat"
        return self.layer_residual

    @property
    def use_layer_dropout(self) -> bool:
        if self.layer_dropout is None:
            return self.family == "gat"
        return self.layer_dropout

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(obj)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)
