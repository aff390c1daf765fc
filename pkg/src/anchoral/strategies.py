"""Active-learning query strategies over unlabeled user pairs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoder import ModelParams, head_probs, pair_features, softmax
from .losses import PROB_CLAMP, cosine_rows
from .model import Embeddings, LabelStore

log = logging.getLogger(__name__)

STRATEGIES = ("saie", "ie", "cs", "eer", "random")


@dataclass(frozen=True)
class Universe:
    """The users whose pairs may be queried (held-out users removed)."""

    a_nodes: np.ndarray
    b_nodes: np.ndarray

    @classmethod
    def full(cls, n_a: int, n_b: int) -> "Universe":
        return cls(np.arange(n_a), np.arange(n_b))

    @classmethod
    def excluding(cls, n_a: int, n_b: int, exclude_a=(), exclude_b=()) -> "Universe":
        ex_a, ex_b = set(exclude_a), set(exclude_b)
        return cls(np.array([i for i in range(n_a) if i not in ex_a], dtype=np.int64),
                   np.array([m for m in range(n_b) if m not in ex_b], dtype=np.int64))


@dataclass
class StrategyConfig:
    saie_cap: int = 1000
    eer_shortlist: int = 200
    eer_eval: int = 500
    eer_steps: int = 5
    eer_lr: float = 1.0
    exhaustive_limit: int = 250_000
    block: int = 20


@dataclass
class CandidatePool:
    pairs: np.ndarray  # (M, 2), lexicographically sorted
    exhaustive: bool
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)


@dataclass
class ScoringContext:
    """Read-only model state shared by all strategies during one query round."""

    params: ModelParams
    emb: Embeddings
    store: LabelStore
    universe: Universe
    train_batch: np.ndarray | None = None  # (n, 3) rows of (a, b, label)
    config: StrategyConfig = field(default_factory=StrategyConfig)

    def probs(self, a_idx, b_idx) -> np.ndarray:
        return head_probs(self.emb.a[a_idx], self.emb.b[b_idx], self.params)


def entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -np.sum(p * np.log(np.maximum(p, PROB_CLAMP)), axis=-1)


# -- interlock -----------------------------------------------------------------

def interlock_set(pair, store: LabelStore, universe: Universe | None = None) -> set:
    """Unlabeled pairs sharing exactly one user with ``pair``."""
    i, m = int(pair[0]), int(pair[1])
    universe = universe or Universe.full(store.n_a, store.n_b)
    out = {(i, int(b)) for b in universe.b_nodes if b != m and not store.is_labeled(i, int(b))}
    out |= {(int(a), m) for a in universe.a_nodes if a != i and not store.is_labeled(int(a), m)}
    return out


def _prob0_matrix(ctx: ScoringContext, a_nodes, b_nodes, budget: int = 4_000_000) -> np.ndarray:
    nb = max(len(b_nodes), 1)
    chunk = max(1, budget // (nb * 2 * ctx.params.arch.dim))
    vb = ctx.emb.b[b_nodes]
    rows = []
    for s in range(0, len(a_nodes), chunk):
        va = ctx.emb.a[a_nodes[s:s + chunk]]
        rows.append(head_probs(va[:, None, :], vb[None, :, :], ctx.params)[..., 0])
    return np.vstack(rows) if rows else np.zeros((0, len(b_nodes)))


def interlock_log_sums(ctx: ScoringContext, pairs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each pair, sum of -log p(s, 0) over its interlock set, and the set size.

    Computed exactly from row and column sums over the universe.
    """
    a_nodes, b_nodes = ctx.universe.a_nodes, ctx.universe.b_nodes
    nlog = -np.log(np.maximum(_prob0_matrix(ctx, a_nodes, b_nodes), PROB_CLAMP))
    unl = ~ctx.store.labeled_mask()[np.ix_(a_nodes, b_nodes)]
    nlog = np.where(unl, nlog, 0.0)
    pos_a = np.full(ctx.store.n_a, -1)
    pos_a[a_nodes] = np.arange(len(a_nodes))
    pos_b = np.full(ctx.store.n_b, -1)
    pos_b[b_nodes] = np.arange(len(b_nodes))
    ra, rb = pos_a[pairs[:, 0]], pos_b[pairs[:, 1]]
    if (ra < 0).any() or (rb < 0).any():
        raise ValueError("candidate pair outside the universe")
    row_sum, col_sum = nlog.sum(axis=1), nlog.sum(axis=0)
    row_cnt, col_cnt = unl.sum(axis=1), unl.sum(axis=0)
    own = np.where(unl[ra, rb], nlog[ra, rb], 0.0)
    self_cnt = unl[ra, rb].astype(int)
    sums = row_sum[ra] + col_sum[rb] - 2 * own
    sizes = row_cnt[ra] + col_cnt[rb] - 2 * self_cnt
    return sums, sizes


# -- per-pair scores ----------------------------------------------------------------

def saie_from_probs(p, interlock_nlog_sum) -> np.ndarray:
    """Expected reward with the anchor outcome credited for its inferred negatives."""
    p = np.asarray(p, dtype=np.float64)
    return entropy(p) + p[..., 1] * np.asarray(interlock_nlog_sum)


def phi_ie(pair, ctx: ScoringContext) -> float:
    return float(entropy(ctx.probs(pair[0], pair[1])))


def phi_saie(pair, ctx: ScoringContext, rng: np.random.Generator | None = None) -> float:
    """Structure-aware entropy of one pair.

    The interlock sum runs over at most ``saie_cap`` pairs; larger sets are
    subsampled and the partial sum scaled by ``|S| / sample_size``.
    """
    p = ctx.probs(pair[0], pair[1])
    s_pairs = sorted(interlock_set(pair, ctx.store, ctx.universe))
    cap = ctx.config.saie_cap
    if len(s_pairs) > cap:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(s_pairs), size=cap, replace=False)
        sample = np.array([s_pairs[j] for j in pick])
        scale = len(s_pairs) / cap
    else:
        sample = np.array(s_pairs, dtype=np.int64).reshape(-1, 2)
        scale = 1.0
    total = 0.0
    if len(sample):
        p0 = ctx.probs(sample[:, 0], sample[:, 1])[:, 0]
        total = scale * float(-np.log(np.maximum(p0, PROB_CLAMP)).sum())
    return float(saie_from_probs(p, total))


def cs_from_vectors(va, vb) -> np.ndarray:
    cos, _, _ = cosine_rows(np.asarray(va, dtype=np.float64), np.asarray(vb, dtype=np.float64))
    return np.abs(cos)


def phi_cs(pair, ctx: ScoringContext) -> float:
    return float(cs_from_vectors(ctx.emb.a[pair[0]], ctx.emb.b[pair[1]]))


def certainty(p1: np.ndarray) -> float:
    """Sum over both classes of |p - 0.5|."""
    return float(2.0 * np.abs(np.asarray(p1) - 0.5).sum())


def _eer_batch(ctx: ScoringContext, cand: np.ndarray, eval_pairs: np.ndarray) -> np.ndarray:
    """Vectorized hypothetical head fine-tunes for each candidate and each label."""
    cfg, params = ctx.config, ctx.params
    mode = params.arch.pair_features
    emb = ctx.emb
    if ctx.train_batch is not None and len(ctx.train_batch):
        tb = np.asarray(ctx.train_batch)
        z_train = pair_features(emb.a[tb[:, 0]], emb.b[tb[:, 1]], mode)
        y_train = np.eye(2)[tb[:, 2].astype(int)]
    else:
        z_train = np.zeros((0, 2 * params.arch.dim))
        y_train = np.zeros((0, 2))
    z_new = pair_features(emb.a[cand[:, 0]], emb.b[cand[:, 1]], mode)
    z_eval = pair_features(emb.a[eval_pairs[:, 0]], emb.b[eval_pairs[:, 1]], mode)
    # candidate j must not count itself among the remaining pairs
    same = (eval_pairs[None, :, 0] == cand[:, None, 0]) & (eval_pairs[None, :, 1] == cand[:, None, 1])

    p_now = softmax(z_new @ params["clf.w"].T + params["clf.b"])
    score = np.zeros(len(cand))
    n = len(z_train) + 1
    for c in (0, 1):
        W = np.broadcast_to(params["clf.w"], (len(cand),) + params["clf.w"].shape).copy()
        b = np.broadcast_to(params["clf.b"], (len(cand), 2)).copy()
        y_new = np.eye(2)[c]
        for _ in range(cfg.eer_steps):
            pt = softmax(np.einsum("nd,ckd->cnk", z_train, W) + b[:, None, :])
            pn = softmax(np.einsum("cd,ckd->ck", z_new, W) + b)
            gt = pt - y_train[None]
            gn = pn - y_new
            gW = (np.einsum("cnk,nd->ckd", gt, z_train) + gn[:, :, None] * z_new[:, None, :]) / n
            gb = (gt.sum(axis=1) + gn) / n
            W -= cfg.eer_lr * gW
            b -= cfg.eer_lr * gb
        pe = softmax(np.einsum("ed,ckd->cek", z_eval, W) + b[:, None, :])[..., 1]
        cert = 2.0 * np.where(same, 0.0, np.abs(pe - 0.5)).sum(axis=1)
        score += p_now[:, c] * cert
    return score


def phi_eer(pair, ctx: ScoringContext, eval_pairs: np.ndarray | None = None,
            rng: np.random.Generator | None = None) -> float:
    """Expected certainty of the remaining pairs after a hypothetical label."""
    if eval_pairs is None:
        pool = build_candidate_pool(ctx.store, ctx.emb, ctx.universe, ctx.config)
        eval_pairs = _eval_subsample(pool.pairs, ctx.config.eer_eval, rng or np.random.default_rng(0))
    return float(_eer_batch(ctx, np.array([pair], dtype=np.int64), np.asarray(eval_pairs))[0])


def _eval_subsample(pairs: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    if len(pairs) <= size:
        return pairs
    return pairs[np.sort(rng.choice(len(pairs), size=size, replace=False))]


# -- pools and batch scoring ---------------------------------------------------------

def build_candidate_pool(store: LabelStore, emb: Embeddings, universe: Universe,
                         config: StrategyConfig = StrategyConfig()) -> CandidatePool:
    """Unlabeled pairs to score: all of them when small, else top-cosine blocks per A user."""
    a_nodes, b_nodes = universe.a_nodes, universe.b_nodes
    unl = ~store.labeled_mask()[np.ix_(a_nodes, b_nodes)]
    if store.n_a * store.n_b <= config.exhaustive_limit:
        ia, ib = np.nonzero(unl)
        pairs = np.stack([a_nodes[ia], b_nodes[ib]], axis=1)
        return CandidatePool(pairs.reshape(-1, 2), True, dict(size=len(pairs)))
    free_b = ~np.isin(b_nodes, list(store.labeled_b))
    rows = []
    for r, a in enumerate(a_nodes):
        if a in store.labeled_a:
            continue
        ok = unl[r] & free_b
        if not ok.any():
            continue
        cand = b_nodes[ok]
        cos, _, _ = cosine_rows(emb.a[a][None, :], emb.b[cand])
        top = cand[np.lexsort((cand, -cos))[:config.block]]
        rows.extend((int(a), int(m)) for m in sorted(top))
    pairs = np.array(rows, dtype=np.int64).reshape(-1, 2)
    return CandidatePool(pairs, False, dict(size=len(pairs), block=config.block))


def score_pool(strategy: str, pool: CandidatePool, ctx: ScoringContext,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Score pool pairs under one strategy; returns (pairs, scores).

    ``eer`` scores only its shortlist (the top pairs by plain entropy).
    """
    pairs = pool.pairs
    if len(pairs) == 0:
        return pairs, np.zeros(0)
    if strategy == "random":
        return pairs, rng.random(len(pairs))
    if strategy == "cs":
        return pairs, cs_from_vectors(ctx.emb.a[pairs[:, 0]], ctx.emb.b[pairs[:, 1]])
    p = ctx.probs(pairs[:, 0], pairs[:, 1])
    if strategy == "ie":
        return pairs, entropy(p)
    if strategy == "saie":
        sums, _ = interlock_log_sums(ctx, pairs)
        return pairs, saie_from_probs(p, sums)
    if strategy == "eer":
        ent = entropy(p)
        k = min(ctx.config.eer_shortlist, len(pairs))
        short = np.sort(np.lexsort((np.arange(len(pairs)), -ent))[:k])
        eval_pairs = _eval_subsample(pairs, ctx.config.eer_eval, rng)
        return pairs[short], _eer_batch(ctx, pairs[short], eval_pairs)
    raise ValueError(f"unknown strategy {strategy!r}")


def select_top_bs(pairs: np.ndarray, scores: np.ndarray, bs: int) -> list[tuple[int, int]]:
    """Greedy best-first choice of ``bs`` pairs with no shared A or B user."""
    pairs = np.asarray(pairs).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64)
    if len(pairs) == 0:
        raise ValueError("no scored pairs to select from")
    order = np.lexsort((np.arange(len(pairs)), -scores))
    used_a, used_b, chosen = set(), set(), []
    for j in order:
        a, b = int(pairs[j, 0]), int(pairs[j, 1])
        if a in used_a or b in used_b:
            continue
        chosen.append((a, b))
        used_a.add(a)
        used_b.add(b)
        if len(chosen) == bs:
            break
    if len(chosen) < bs:
        log.warning("only %d of %d requested pairs available", len(chosen), bs)
    return chosen
