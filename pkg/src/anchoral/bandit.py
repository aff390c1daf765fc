"""Time-sensitive epsilon-greedy choice among query strategies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Metrics

ENSEMBLE = ("saie", "cs", "eer")


@dataclass
class StrategyStats:
    """Running mean reward ``Q`` and use count ``n`` per strategy."""

    names: tuple = ENSEMBLE
    q: dict = field(default_factory=dict)
    n: dict = field(default_factory=dict)

    def __post_init__(self):
        self.names = tuple(self.names)
        for name in self.names:
            self.q.setdefault(name, 0.0)
            self.n.setdefault(name, 0)

    @property
    def iterations(self) -> int:
        return sum(self.n.values())


def sample_epsilon(e: int, rng: np.random.Generator, alpha: float = 0.1) -> float:
    """Draw from Beta(alpha, e) as X / (X + Y) with X ~ Gamma(alpha), Y ~ Gamma(e)."""
    if e < 1:
        raise ValueError("iteration index starts at 1")
    x = rng.standard_gamma(alpha)
    y = rng.standard_gamma(float(e))
    return float(x / (x + y)) if x + y > 0 else 0.0


def choose_strategy(stats: StrategyStats, epsilon: float, rng: np.random.Generator,
                    gamma: float | None = None) -> str:
    """Explore uniformly when ``gamma < epsilon``, else exploit the best mean reward.

    ``gamma`` is the uniform draw compared against ``epsilon``; it is drawn
    from ``rng`` when not supplied. Tied maxima are broken uniformly at random.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if gamma is None:
        gamma = rng.random()
    if gamma < epsilon:
        return stats.names[int(rng.integers(len(stats.names)))]
    best = max(stats.q[name] for name in stats.names)
    tied = [name for name in stats.names if stats.q[name] == best]
    return tied[int(rng.integers(len(tied)))] if len(tied) > 1 else tied[0]


def update_reward(stats: StrategyStats, name: str, reward: float) -> StrategyStats:
    if not math.isfinite(reward):
        raise ValueError("reward must be finite")
    if name not in stats.q:
        raise KeyError(f"unregistered strategy {name!r}")
    n = stats.n[name]
    stats.q[name] = (n * stats.q[name] + reward) / (n + 1)
    stats.n[name] = n + 1
    return stats


def compute_reward(before: Metrics, after: Metrics) -> float:
    """Average rise of Precision@k and MAP@k between two evaluations."""
    if before.k != after.k:
        raise ValueError(f"metrics measured at different k ({before.k} vs {after.k})")
    return ((after.precision_at_k - before.precision_at_k)
            + (after.map_at_k - before.map_at_k)) / 2.0
