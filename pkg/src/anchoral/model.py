"""Anchor-user prediction: label bookkeeping, training, ranking and metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .encoder import (Adam, ModelParams, backward, encode_all, forward_batch,
                      head_probs, sgd_step)
from .losses import (LossWeights, cosine_rows, loss_classify, loss_cross,  # noqa: F401
                     loss_reg, loss_single, loss_total)

log = logging.getLogger(__name__)

SOURCES = ("seed", "queried", "inferred", "sampled_negative")


class InterlockError(ValueError):
    """A new anchor would share a user with an existing anchor."""


@dataclass(frozen=True)
class LabeledPair:
    a_idx: int
    b_idx: int
    label: int
    source: str = "queried"

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")


class LabelStore:
    """Labeled anchor / non-anchor pairs.

    Negatives implied by the interlock (every pair sharing exactly one user
    with an anchor) are not materialized; they are answered by membership
    tests and enumerated on demand.
    """

    def __init__(self, n_a: int, n_b: int):
        self.n_a, self.n_b = n_a, n_b
        self._pos_ab: dict[int, int] = {}
        self._pos_ba: dict[int, int] = {}
        self.negatives: set[tuple[int, int]] = set()
        self.sources: dict[tuple[int, int], str] = {}

    def copy(self) -> "LabelStore":
        new = LabelStore(self.n_a, self.n_b)
        new._pos_ab = dict(self._pos_ab)
        new._pos_ba = dict(self._pos_ba)
        new.negatives = set(self.negatives)
        new.sources = dict(self.sources)
        return new

    @property
    def positives(self) -> list[tuple[int, int]]:
        return sorted(self._pos_ab.items())

    @property
    def labeled_a(self) -> set[int]:
        return set(self._pos_ab)

    @property
    def labeled_b(self) -> set[int]:
        return set(self._pos_ba)

    def _check(self, a: int, b: int):
        if not (0 <= a < self.n_a and 0 <= b < self.n_b):
            raise IndexError(f"pair ({a}, {b}) outside {self.n_a}x{self.n_b}")

    def add(self, pair: LabeledPair) -> None:
        if pair.label == 1:
            self.add_positive(pair.a_idx, pair.b_idx, pair.source)
        else:
            self.add_negative(pair.a_idx, pair.b_idx, pair.source)

    def add_positive(self, a: int, b: int, source: str = "queried") -> None:
        a, b = int(a), int(b)
        self._check(a, b)
        if self._pos_ab.get(a) == b:
            return
        if a in self._pos_ab or b in self._pos_ba:
            raise InterlockError(f"({a}, {b}) conflicts with an existing anchor")
        if (a, b) in self.negatives:
            raise ValueError(f"({a}, {b}) is already labeled non-anchor")
        self._pos_ab[a] = b
        self._pos_ba[b] = a
        self.sources[(a, b)] = source

    def add_negative(self, a: int, b: int, source: str = "queried") -> None:
        a, b = int(a), int(b)
        self._check(a, b)
        if self._pos_ab.get(a) == b:
            raise ValueError(f"({a}, {b}) is already labeled anchor")
        self.negatives.add((a, b))
        self.sources.setdefault((a, b), source)

    def is_inferred(self, a: int, b: int) -> bool:
        if self._pos_ab.get(a) == b or (a, b) in self.negatives:
            return False
        return a in self._pos_ab or b in self._pos_ba

    def label_of(self, a: int, b: int) -> int | None:
        if self._pos_ab.get(a) == b:
            return 1
        if (a, b) in self.negatives or a in self._pos_ab or b in self._pos_ba:
            return 0
        return None

    def is_labeled(self, a: int, b: int) -> bool:
        return self.label_of(a, b) is not None

    def __contains__(self, pair) -> bool:
        return self.is_labeled(*pair)

    def iter_inferred(self) -> Iterator[tuple[int, int]]:
        seen_rows = set(self._pos_ab)
        for a in sorted(self._pos_ab):
            for m in range(self.n_b):
                if self.is_inferred(a, m):
                    yield (a, m)
        for b in sorted(self._pos_ba):
            for i in range(self.n_a):
                if i not in seen_rows and self.is_inferred(i, b):
                    yield (i, b)

    @property
    def inferred_negatives(self) -> set[tuple[int, int]]:
        return set(self.iter_inferred())

    def inferred_count(self) -> int:
        pa, pb = len(self._pos_ab), len(self._pos_ba)
        region = pa * self.n_b + pb * self.n_a - pa * pb - pa
        overlap = sum(1 for (a, b) in self.negatives if a in self._pos_ab or b in self._pos_ba)
        return region - overlap

    def labeled_mask(self) -> np.ndarray:
        """Dense (n_a, n_b) boolean mask of every labeled pair, explicit or inferred."""
        mask = np.zeros((self.n_a, self.n_b), dtype=bool)
        if self._pos_ab:
            mask[list(self._pos_ab), :] = True
            mask[:, list(self._pos_ba)] = True
        for a, b in self.negatives:
            mask[a, b] = True
        return mask

    def __len__(self) -> int:
        return len(self._pos_ab) + len(self.negatives) + self.inferred_count()


@dataclass(frozen=True)
class Metrics:
    precision_at_k: float
    map_at_k: float
    k: int

    def __post_init__(self):
        for v in (self.precision_at_k, self.map_at_k):
            if not 0.0 <= v <= 1.0:
                raise ValueError("metrics must lie in [0, 1]")


def undersample_negatives(store: LabelStore, ratio: int, rng: np.random.Generator,
                          exclude_a: Iterable[int] = (), exclude_b: Iterable[int] = ()
                          ) -> list[tuple[int, int, int]]:
    """Every anchor plus ``ratio`` non-anchor pairs per anchor, plus every
    explicitly labeled non-anchor.

    Sampled negatives come from the pairs interlocked with that anchor (same
    A user or same B user); pairs touching an excluded node are never used.
    Returns ``(a, b, label)`` triples.
    """
    positives = store.positives
    if not positives:
        raise ValueError("undersampling needs at least one anchor")
    ex_a, ex_b = set(exclude_a), set(exclude_b)
    all_b = np.array([m for m in range(store.n_b) if m not in ex_b], dtype=np.int64)
    all_a = np.array([i for i in range(store.n_a) if i not in ex_a], dtype=np.int64)
    explicit = sorted(p for p in store.negatives if p[0] not in ex_a and p[1] not in ex_b)
    batch = []
    for a, b in positives:
        batch.append((a, b, 1))
        row = all_b[all_b != b]
        col = all_a[all_a != a]
        n_local = len(row) + len(col)
        if n_local >= ratio:
            picks = rng.choice(n_local, size=ratio, replace=False)
            for r in picks:
                batch.append((a, int(row[r]), 0) if r < len(row) else (int(col[r - len(row)]), b, 0))
            continue
        local = [(a, int(m)) for m in row] + [(int(i), b) for i in col]
        extra = [p for p in explicit if p not in set(local)]
        pool = local + extra
        if len(pool) >= ratio:
            picks = rng.choice(len(pool), size=ratio, replace=False)
        elif pool:
            log.warning("only %d negatives available for anchor (%d, %d); sampling with replacement",
                        len(pool), a, b)
            picks = rng.choice(len(pool), size=ratio, replace=True)
        else:
            log.warning("no negatives available for anchor (%d, %d)", a, b)
            picks = []
        batch.extend((pool[r][0], pool[r][1], 0) for r in picks)
    drawn = {(a, b) for a, b, _ in batch}
    batch.extend((a, b, 0) for a, b in explicit if (a, b) not in drawn)
    return batch


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    neg_ratio: int = 2


@dataclass
class TrainResult:
    params: ModelParams
    optimizer: Adam
    losses: list
    diverged: bool = False
    batch: np.ndarray | None = None  # (n, 3) rows of (a, b, label)


def train(store: LabelStore, ctx_a: np.ndarray, ctx_b: np.ndarray, params: ModelParams,
          config: TrainConfig, rng: np.random.Generator, optimizer: Adam | None = None,
          exclude_a=(), exclude_b=()) -> TrainResult:
    """Full-batch training on one undersampled batch; ``params`` is updated in place."""
    optimizer = optimizer if optimizer is not None else Adam(params)
    losses: list[float] = []
    if config.epochs <= 0:
        return TrainResult(params, optimizer, losses)
    batch = np.array(undersample_negatives(store, config.neg_ratio, rng, exclude_a, exclude_b))
    users_a, rows_a = np.unique(batch[:, 0], return_inverse=True)
    users_b, rows_b = np.unique(batch[:, 1], return_inverse=True)
    xa, xb, y = ctx_a[users_a], ctx_b[users_b], batch[:, 2]
    last_good = params.copy()
    for _ in range(config.epochs):
        try:
            fwd = forward_batch(xa, xb, params, rows_a, rows_b)
            grads, loss = backward(fwd, y, params, config.weights)
            sgd_step(params, grads, optimizer, config.lr)
        except FloatingPointError as exc:
            log.warning("training diverged after %d epochs: %s", len(losses), exc)
            for name, t in last_good.items():
                params[name][...] = t
            return TrainResult(params, optimizer, losses, diverged=True, batch=batch)
        losses.append(loss)
        for name, t in params.items():
            last_good[name][...] = t
    return TrainResult(params, optimizer, losses, batch=batch)


@dataclass
class Embeddings:
    """Embeddings of every user in both networks under fixed parameters."""

    a: np.ndarray
    b: np.ndarray

    @classmethod
    def compute(cls, params: ModelParams, ctx_a: np.ndarray, ctx_b: np.ndarray) -> "Embeddings":
        return cls(encode_all(ctx_a, "a", params), encode_all(ctx_b, "b", params))


def pair_scores(emb: Embeddings, params: ModelParams, a_idx, b_idx) -> tuple[np.ndarray, np.ndarray]:
    """(p1, cosine) for aligned index arrays."""
    va, vb = emb.a[a_idx], emb.b[b_idx]
    p = head_probs(va, vb, params)
    cos, _, _ = cosine_rows(va, vb)
    return p[..., 1], cos


def order_by_scores(candidates: np.ndarray, p1: np.ndarray, cos: np.ndarray) -> np.ndarray:
    """Descending p1, then descending cosine, then ascending index."""
    order = np.lexsort((candidates, -cos, -p1))
    return candidates[order]


def rank_candidates(a_idx: int, params: ModelParams, ctx_a: np.ndarray, ctx_b: np.ndarray,
                    candidate_b, emb: Embeddings | None = None) -> list[int]:
    cand = np.asarray(sorted(candidate_b), dtype=np.int64)
    if len(cand) == 0:
        raise ValueError("empty candidate set")
    if emb is None:
        va = encode_all(ctx_a[[a_idx]], "a", params)
        vb = encode_all(ctx_b[cand], "b", params)
        emb = Embeddings(np.zeros((ctx_a.shape[0], va.shape[1])), np.zeros((ctx_b.shape[0], vb.shape[1])))
        emb.a[a_idx] = va[0]
        emb.b[cand] = vb
    p1, cos = pair_scores(emb, params, np.full(len(cand), a_idx), cand)
    return order_by_scores(cand, p1, cos).tolist()


def rank_all(a_nodes, params: ModelParams, emb: Embeddings, candidate_b, top: int | None = None
             ) -> dict[int, list[tuple[int, float]]]:
    """Rankings for several A users; each entry is ``(b, p1)`` best first."""
    cand = np.asarray(sorted(candidate_b), dtype=np.int64)
    if len(cand) == 0:
        raise ValueError("empty candidate set")
    out = {}
    for a in a_nodes:
        p1, cos = pair_scores(emb, params, np.full(len(cand), a), cand)
        order = np.lexsort((cand, -cos, -p1))
        if top is not None:
            order = order[:top]
        out[int(a)] = [(int(cand[j]), float(p1[j])) for j in order]
    return out


def ranking_metrics(test_anchors: dict[int, int], rankings: dict, k: int) -> Metrics:
    """Precision@k and MAP@k with one relevant item per test user."""
    if not test_anchors:
        raise ValueError("empty test set")
    hits, rr = 0, 0.0
    for a, true_b in test_anchors.items():
        if a not in rankings:
            raise KeyError(f"no ranking for test user {a}")
        top = [r[0] if isinstance(r, tuple) else r for r in rankings[a][:k]]
        if true_b in top:
            hits += 1
            rr += 1.0 / (top.index(true_b) + 1)
    n = len(test_anchors)
    return Metrics(hits / n, rr / n, k)


def precision_at_k(test_anchors, rankings, k) -> float:
    return ranking_metrics(test_anchors, rankings, k).precision_at_k


def map_at_k(test_anchors, rankings, k) -> float:
    return ranking_metrics(test_anchors, rankings, k).map_at_k


def evaluate(params: ModelParams, emb: Embeddings, test_anchors: dict[int, int],
             candidate_b, k: int) -> tuple[Metrics, dict]:
    rankings = rank_all(sorted(test_anchors), params, emb, candidate_b, top=k)
    return ranking_metrics(test_anchors, rankings, k), rankings
