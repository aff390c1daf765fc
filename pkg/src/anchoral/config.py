"""Experiment configuration: defaults, flat key=value files, seeded sub-streams."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import Architecture
from .losses import LossWeights
from .model import TrainConfig
from .strategies import StrategyConfig

MODES = ("dalaup", "saie", "ie", "cs", "eer", "random", "aup_only")

# Fixed ids keep each stream independent of how many draws the others make.
STREAMS = {"split": 1, "init": 2, "sampling": 3, "bandit": 4, "query": 5, "generate": 6}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # structural context
    restart: float = 0.6
    steps: int = 5
    # network
    conv_layers: int = 2
    base_channels: int = 4
    kernel: int = 5
    stride: int = 2
    padding: int = 2
    dim: int = 56
    activation: str = "tanh"
    pair_features: str = "interaction"
    # loss
    lambda_cross: float = 0.01
    lambda_classify: float = 0.01
    lambda_reg: float = 1e-5
    margin: float = 0.0
    neg_ratio: int = 2
    # optimization
    lr: float = 1e-3
    epochs_initial: int = 100
    epochs_incremental: int = 30
    warm_start: bool = True
    # active learning
    bs: int = 100
    budget: int = 1500
    split_initial: int = 100
    split_validate: int = 300
    split_test: int = 600
    metric_k: int = 30
    mode: str = "dalaup"
    # strategies
    saie_cap: int = 1000
    eer_shortlist: int = 200
    eer_eval: int = 500
    eer_steps: int = 5
    eer_lr: float = 1.0
    exhaustive_limit: int = 250_000
    pool_block: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.restart < 1.0:
            raise ConfigError("restart must lie in (0, 1)")
        for name in ("steps", "conv_layers", "base_channels", "dim", "bs", "metric_k", "neg_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("budget", "split_initial", "split_validate", "split_test",
                     "epochs_initial", "epochs_incremental"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    @property
    def iterations(self) -> int:
        """Query rounds; a budget not divisible by bs gets a short last round."""
        return -(-self.budget // self.bs)

    def batch_size_at(self, e: int) -> int:
        return min(self.bs, self.budget - (e - 1) * self.bs)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2 ** l for l in range(self.conv_layers))

    def architecture(self, n_a: int, n_b: int) -> Architecture:
        return Architecture(n_a, n_b, dim=self.dim, channels=self.channels, kernel=self.kernel,
                            stride=self.stride, padding=self.padding,
                            pair_features=self.pair_features, activation=self.activation)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_cross, self.lambda_classify, self.lambda_reg, self.margin)

    def train_config(self, initial: bool) -> TrainConfig:
        epochs = self.epochs_initial if initial else self.epochs_incremental
        return TrainConfig(epochs=epochs, lr=self.lr, weights=self.loss_weights(),
                           neg_ratio=self.neg_ratio)

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(saie_cap=self.saie_cap, eer_shortlist=self.eer_shortlist,
                              eer_eval=self.eer_eval, eer_steps=self.eer_steps, eer_lr=self.eer_lr,
                              exhaustive_limit=self.exhaustive_limit, block=self.pool_block)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    if key not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    kind = type(getattr(ExperimentConfig(), key))
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_overrides(lines, source: str = "<overrides>") -> dict:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = line.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), raw)
    return out


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    values = {}
    if path is not None:
        path = Path(path)
        values.update(parse_overrides(path.read_text().splitlines(), str(path)))
    values.update(parse_overrides(list(overrides), "--set"))
    return ExperimentConfig(**values)


def substream(seed: int, name: str) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown stream {name!r}")
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, STREAMS[name]])
