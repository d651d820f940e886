from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from .errors import ConfigError

ABLATIONS = ("full", "no-align", "no-filter", "random-latent", "baseline-bpr", "baseline-lightgcn")


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 64
    layers: int = 3
    lr: float = 1e-3
    batch_size: int = 2048
    lambda1: float = 0.1
    l2: float = 1e-4
    mu: float = 0.6
    beta: float = 0.5
    heads: int = 4
    epochs: int = 200
    patience: int = 10
    seed: int = 0
    eval_k: int = 10
    eval_every: int = 1
    # alignment phase
    align_epochs: int = 100
    align_lr: float = 1e-3
    align_batch_size: int = 2048
    # cap on candidate items when computing the semantic gate
    gate_candidates: int = 2048

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"confidence beta must lie in (0, 1), got {self.beta}")
        if self.lambda1 < 0 or self.l2 < 0:
            raise ConfigError("lambda1 and l2 must be non-negative")
        if self.dim <= 0 or self.heads <= 0 or self.dim % self.heads:
            raise ConfigError(f"dim={self.dim} must be a positive multiple of heads={self.heads}")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError(f"threshold mu must lie in [0, 1], got {self.mu}")
        if self.layers < 0 or self.epochs < 0 or self.align_epochs < 0:
            raise ConfigError("layers and epoch counts must be non-negative")
        if self.batch_size <= 0 or self.align_batch_size <= 0 or self.patience <= 0:
            raise ConfigError("batch sizes and patience must be positive")

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}
