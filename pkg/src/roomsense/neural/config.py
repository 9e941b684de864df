"""Model configuration records."""

from __future__ import annotations

from dataclasses import dataclass, asdict


@dataclass
class TransformerConfig:
    embed_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    patch: int = 16
    stride: int = 10
    mlp_ratio: int = 4
    dropout_rate: float = 0.0
    pool: str = "mean"              # "mean" or "cls"
    input_shape: tuple = (30, 1997)
    label_ranges: tuple = ((0.0, 5.0),)

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.pool not in ("mean", "cls"):
            raise ValueError(f"unknown pooling mode {self.pool!r}")
        if self.stride != self.patch - 6:
            # patches carry a 6-unit overlap on both axes
            raise ValueError("stride must equal patch size minus the 6 overlap")

    def to_dict(self):
        d = asdict(self)
        d["family"] = "ast"
        return d


def paper_scale_transformer(**overrides) -> TransformerConfig:
    """Published transformer dimensions; used for shape tests only."""
    base = dict(embed_dim=768, n_layers=12, n_heads=12)
    base.update(overrides)
    return TransformerConfig(**base)


@dataclass
class ConvNetConfig:
    channels: tuple = (32, 32, 64, 64, 128, 128)
    kernel: int = 3
    dropout_rate: float = 0.5
    input_shape: tuple = (30, 1997)
    n_outputs: int = 1

    def to_dict(self):
        d = asdict(self)
        d["family"] = "cnn"
        return d


@dataclass
class ConvRecurrentConfig:
    channels: tuple = (32, 32, 64, 64, 96, 96)
    kernel: int = 3
    lstm_hidden: int = 64
    time_pool: int = 2
    dropout_rate: float = 0.5
    input_rows: int = 30
    n_outputs: int = 1

    def to_dict(self):
        d = asdict(self)
        d["family"] = "crnn"
        return d
