"""Run configuration for the adaptation engine."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration value or generator argument."""


@dataclass
class AdaptConfig:
    """All knobs of the adaptation run, serializable for reproducibility.

    k            hyperedge degree (anchor + k-1 neighbors), must be > 2
    t_in         hypergraph refresh interval, in iterations
    alpha        weight of the coefficient-norm regularizer in the
                 neighbor-reconstruction solve
    h            cluster size (close-set neighbors per sample)
    gamma        sharpness exponent of the prediction-distance weighting
    delta        EMA factor for the accumulated target predictions
    eta          weight of the KL regularizer in the total loss
    beta         decay exponent of the pull/push balancing factor
    m_prime      compressed node-representation width (None: min(64, n-1))
    d_z          adapter output width (None: same as input dim)
    open_set     split target samples by entropy and train on the
                 low-entropy ("known") cluster only
    use_self_loops / high_order   ablation switches; both on by default
    """

    k: int = 6
    t_in: int = 50
    alpha: float = 2.0
    h: int = 3
    gamma: float = 7.0
    delta: float = 0.8
    eta: float = 2.0
    beta: float = 0.25
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 10
    m_prime: int | None = None
    d_z: int | None = None
    seed: int = 0
    open_set: bool = False
    use_self_loops: bool = True
    high_order: bool = True
    label_smoothing: float = 0.1

    def __post_init__(self) -> None:
        if self.k <= 2:
            raise ConfigError(f"hyperedge degree k must be > 2, got {self.k}")
        if self.t_in < 1:
            raise ConfigError(f"refresh interval t_in must be >= 1, got {self.t_in}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.h < 1:
            raise ConfigError(f"cluster size h must be >= 1, got {self.h}")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if not 0.0 <= self.delta < 1.0:
            raise ConfigError(f"delta must lie in [0, 1), got {self.delta}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.m_prime is not None and self.m_prime < 1:
            raise ConfigError(f"m_prime must be >= 1, got {self.m_prime}")
        if self.d_z is not None and self.d_z < 1:
            raise ConfigError(f"d_z must be >= 1, got {self.d_z}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(
                f"label_smoothing must lie in [0, 1), got {self.label_smoothing}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AdaptConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "AdaptConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        # a run manifest embeds the config under "config"
        if "config" in data and isinstance(data["config"], dict):
            data = data["config"]
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} does not hold a JSON object")
        return cls.from_dict(data)
