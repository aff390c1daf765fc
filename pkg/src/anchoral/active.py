"""The active-learning loop: splits, oracle, query rounds and repeated runs."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .bandit import ENSEMBLE, StrategyStats, choose_strategy, compute_reward, sample_epsilon, update_reward
from .config import ExperimentConfig, substream
from .context import structural_context
from .encoder import Adam, ModelParams, init_params, save_checkpoint
from .graph import TwinNetworkDataset, validate_anchor_map
from .model import Embeddings, LabeledPair, LabelStore, Metrics, evaluate, train
from .strategies import ScoringContext, Universe, build_candidate_pool, score_pool, select_top_bs

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "strategy", "epsilon", "gamma", "reward", "queried", "queried_pos",
                 "labeled", "n_pos", "n_neg_explicit", "n_neg_inferred",
                 "val_p_at_k", "val_map_at_k", "test_p_at_k", "test_map_at_k",
                 *(f"q_{s}" for s in ENSEMBLE), *(f"n_{s}" for s in ENSEMBLE))


@dataclass(frozen=True)
class Split:
    initial: np.ndarray
    validate: np.ndarray
    test: np.ndarray
    unlabeled: np.ndarray


def split_dataset(anchors: np.ndarray, sizes: tuple[int, int, int],
                  rng: np.random.Generator) -> Split:
    """Disjoint random (initial, validate, test) parts; the rest is unlabeled."""
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
    if any(s < 0 for s in sizes) or sum(sizes) > len(anchors):
        raise ValueError(f"split sizes {tuple(sizes)} infeasible for {len(anchors)} anchors")
    perm = rng.permutation(len(anchors))
    cuts = np.cumsum(sizes)
    parts = np.split(perm, cuts)

    def take(idx):
        return anchors[np.sort(idx)]
    return Split(take(parts[0]), take(parts[1]), take(parts[2]), take(parts[3]))


class Oracle:
    """Ground-truth anchor map standing in for a human labeler."""

    def __init__(self, anchors: np.ndarray, n_a: int, n_b: int):
        anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
        validate_anchor_map(anchors, n_a, n_b)
        self.mapping = {int(a): int(b) for a, b in anchors}
        self.queries = 0

    def __call__(self, a: int, b: int) -> int:
        self.queries += 1
        return int(self.mapping.get(int(a)) == int(b))


def oracle_label(pairs, oracle: Oracle, store: LabelStore) -> list[LabeledPair]:
    """Label each pair and add it to ``store``.

    A new anchor makes every pair sharing one of its users a known
    non-anchor; the store answers those implicitly.
    """
    pairs = [(int(a), int(b)) for a, b in pairs]
    for a, b in pairs:
        if store.is_labeled(a, b):
            raise ValueError(f"pair ({a}, {b}) is already labeled")
    out = []
    for a, b in pairs:
        lp = LabeledPair(a, b, oracle(a, b), "queried")
        store.add(lp)
        out.append(lp)
    return out


@dataclass
class IterationRecord:
    iteration: int
    strategy: str
    epsilon: float
    gamma: float
    reward: float
    queried: int
    queried_pos: int
    n_pos: int
    n_neg_explicit: int
    n_neg_inferred: int
    validate: Metrics
    test: Metrics
    wall_time: float = 0.0
    q: dict = field(default_factory=dict)  # bandit state after this iteration; empty outside dalaup
    n: dict = field(default_factory=dict)

    @property
    def labeled(self) -> int:
        return self.n_pos + self.n_neg_explicit + self.n_neg_inferred

    def row(self) -> dict:
        return dict(iteration=self.iteration, strategy=self.strategy,
                    epsilon=_fmt(self.epsilon), gamma=_fmt(self.gamma), reward=_fmt(self.reward),
                    queried=self.queried, queried_pos=self.queried_pos, labeled=self.labeled,
                    n_pos=self.n_pos,
                    n_neg_explicit=self.n_neg_explicit, n_neg_inferred=self.n_neg_inferred,
                    val_p_at_k=_fmt(self.validate.precision_at_k),
                    val_map_at_k=_fmt(self.validate.map_at_k),
                    test_p_at_k=_fmt(self.test.precision_at_k),
                    test_map_at_k=_fmt(self.test.map_at_k),
                    **{f"q_{s}": _fmt(self.q[s]) if s in self.q else "" for s in ENSEMBLE},
                    **{f"n_{s}": self.n.get(s, "") for s in ENSEMBLE})


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


@dataclass
class RunResult:
    records: list
    params: ModelParams
    initial_validate: Metrics
    initial_test: Metrics
    rankings: dict
    store: LabelStore
    split: Split
    stats: StrategyStats | None = None
    wall_time: float = 0.0

    @property
    def final_test(self) -> Metrics:
        return self.records[-1].test if self.records else self.initial_test


class TraceWriter:
    """Appends one CSV row per iteration and flushes, so partial runs stay readable."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.DictWriter(self._fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        self._w.writeheader()
        self._fh.flush()

    def write(self, rec: IterationRecord):
        self._w.writerow(rec.row())
        self._fh.flush()

    def close(self):
        self._fh.close()


def write_predictions(rankings: dict, path) -> None:
    """One line per test A user: its index, then ``b:score`` for the top candidates."""
    with open(path, "w") as fh:
        for a in sorted(rankings):
            cells = " ".join(f"{b}:{p:.6f}" for b, p in rankings[a])
            fh.write(f"{a}\t{cells}\n")


def _contexts(dataset: TwinNetworkDataset, cfg: ExperimentConfig):
    ca = structural_context(dataset.graph_a, cfg.restart, cfg.steps).rows
    cb = structural_context(dataset.graph_b, cfg.restart, cfg.steps).rows
    return ca, cb


def run_algorithm1(dataset: TwinNetworkDataset, config: ExperimentConfig, out_dir=None,
                   contexts: tuple[np.ndarray, np.ndarray] | None = None) -> RunResult:
    """Seed model, then ``config.iterations`` rounds of select, label, retrain, reward.

    With ``out_dir`` the trace CSV grows row by row and the final checkpoint
    and test rankings are written at the end.
    """
    t0 = time.perf_counter()
    cfg = config
    n_a, n_b = dataset.graph_a.node_count, dataset.graph_b.node_count
    ctx_a, ctx_b = contexts if contexts is not None else _contexts(dataset, cfg)

    split = split_dataset(dataset.anchors, (cfg.split_initial, cfg.split_validate, cfg.split_test),
                          substream(cfg.seed, "split"))
    if len(split.initial) == 0:
        raise ValueError("the initial labeled set is empty")
    oracle = Oracle(dataset.anchors, n_a, n_b)
    held_a = np.concatenate([split.validate[:, 0], split.test[:, 0]])
    held_b = np.concatenate([split.validate[:, 1], split.test[:, 1]])
    universe = Universe.excluding(n_a, n_b, held_a, held_b)
    val_map = {int(a): int(b) for a, b in split.validate}
    test_map = {int(a): int(b) for a, b in split.test}

    store = LabelStore(n_a, n_b)
    for a, b in split.initial:
        store.add_positive(a, b, "seed")

    init_rng = substream(cfg.seed, "init")
    samp_rng = substream(cfg.seed, "sampling")
    bandit_rng = substream(cfg.seed, "bandit")
    query_rng = substream(cfg.seed, "query")
    arch = cfg.architecture(n_a, n_b)
    scfg = cfg.strategy_config()

    params = init_params(arch, init_rng)
    res = train(store, ctx_a, ctx_b, params, cfg.train_config(True), samp_rng,
                exclude_a=held_a, exclude_b=held_b)
    opt, batch = res.optimizer, res.batch

    def measure(params):
        emb = Embeddings.compute(params, ctx_a, ctx_b)
        cand = [m for m in range(n_b) if m not in store.labeled_b]
        val = evaluate(params, emb, val_map, cand, cfg.metric_k)[0] if val_map else Metrics(0.0, 0.0, cfg.metric_k)
        test, rankings = evaluate(params, emb, test_map, cand, cfg.metric_k) if test_map else (
            Metrics(0.0, 0.0, cfg.metric_k), {})
        return emb, val, test, rankings

    emb, val0, test0, rankings = measure(params)
    prev_val = val0
    stats = StrategyStats(ENSEMBLE) if cfg.mode == "dalaup" else None
    records: list[IterationRecord] = []
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        writer = TraceWriter(out_dir / "trace.csv")
    try:
        for e in range(1, cfg.iterations + 1):
            ti = time.perf_counter()
            eps = gamma = float("nan")
            chosen: list = []
            labeled: list = []
            if cfg.mode == "aup_only":
                name = "none"
            else:
                if cfg.mode == "dalaup":
                    eps = sample_epsilon(e, bandit_rng)
                    gamma = float(bandit_rng.random())
                    name = choose_strategy(stats, eps, bandit_rng, gamma)
                else:
                    name = cfg.mode
                pool = build_candidate_pool(store, emb, universe, scfg)
                if len(pool):
                    sctx = ScoringContext(params, emb, store, universe, batch, scfg)
                    pairs, scores = score_pool(name, pool, sctx, query_rng)
                    chosen = select_top_bs(pairs, scores, cfg.batch_size_at(e))
                else:
                    log.warning("candidate pool exhausted at iteration %d", e)
                labeled = oracle_label(chosen, oracle, store)
                if cfg.warm_start:
                    res = train(store, ctx_a, ctx_b, params, cfg.train_config(False), samp_rng,
                                optimizer=opt, exclude_a=held_a, exclude_b=held_b)
                else:
                    params = init_params(arch, init_rng)
                    res = train(store, ctx_a, ctx_b, params, cfg.train_config(True), samp_rng,
                                exclude_a=held_a, exclude_b=held_b)
                opt, batch = res.optimizer, res.batch
                emb, val, test, rankings = measure(params)
            if cfg.mode == "aup_only":
                val, test = val0, test0
            reward = compute_reward(prev_val, val)
            if stats is not None:
                update_reward(stats, name, reward)
            prev_val = val
            rec = IterationRecord(
                e, name, eps, gamma, reward, len(labeled), sum(lp.label for lp in labeled),
                len(store.positives), len(store.negatives), store.inferred_count(),
                val, test, time.perf_counter() - ti,
                dict(stats.q) if stats else {}, dict(stats.n) if stats else {})
            records.append(rec)
            if writer:
                writer.write(rec)
    finally:
        if writer:
            writer.close()
    result = RunResult(records, params, val0, test0, rankings, store, split, stats,
                       time.perf_counter() - t0)
    if out_dir is not None:
        save_checkpoint(out_dir / "model.ckpt", params, opt, cfg.digest())
        write_predictions(rankings, out_dir / "predictions.tsv")
        (out_dir / "config.cfg").write_text(cfg.dumps())
    return result


# -- repeats -------------------------------------------------------------------

SUMMARY_METRICS = ("val_p_at_k", "val_map_at_k", "test_p_at_k", "test_map_at_k", "reward")


@dataclass
class RepeatedResult:
    runs: list
    seeds: list
    table: list = field(default_factory=list)  # per-iteration dicts of mean/sd


def _values(run: RunResult, e: int) -> dict:
    if e == 0:
        return dict(val_p_at_k=run.initial_validate.precision_at_k,
                    val_map_at_k=run.initial_validate.map_at_k,
                    test_p_at_k=run.initial_test.precision_at_k,
                    test_map_at_k=run.initial_test.map_at_k, reward=0.0)
    r = run.records[e - 1]
    return dict(val_p_at_k=r.validate.precision_at_k, val_map_at_k=r.validate.map_at_k,
                test_p_at_k=r.test.precision_at_k, test_map_at_k=r.test.map_at_k, reward=r.reward)


def aggregate_runs(runs: list) -> list[dict]:
    """Mean and sample standard deviation of each metric per iteration (0 = seed model)."""
    if not runs:
        raise ValueError("nothing to aggregate")
    depth = min(len(r.records) for r in runs)
    table = []
    for e in range(depth + 1):
        vals = [_values(r, e) for r in runs]
        row = {"iteration": e}
        for m in SUMMARY_METRICS:
            x = np.array([v[m] for v in vals])
            row[f"{m}_mean"] = float(x.mean())
            row[f"{m}_sd"] = float(x.std(ddof=1)) if len(x) > 1 else 0.0
        table.append(row)
    return table


def run_repeated(dataset_generator: Callable[[int], TwinNetworkDataset] | TwinNetworkDataset,
                 config: ExperimentConfig, repeats: int, out_dir=None) -> RepeatedResult:
    """Runs with seeds ``seed .. seed + repeats - 1``.

    ``dataset_generator`` maps a seed to a dataset; a fixed dataset is reused
    for every repeat (only the split, initialization and sampling change).
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    runs, seeds = [], []
    cache = {}
    for r in range(repeats):
        seed = config.seed + r
        if callable(dataset_generator):
            ds = dataset_generator(seed)
            ctx = None
        else:
            ds = dataset_generator
            if "ctx" not in cache:
                cache["ctx"] = _contexts(ds, config)
            ctx = cache["ctx"]
        sub = None if out_dir is None else Path(out_dir) / f"seed_{seed}"
        runs.append(run_algorithm1(ds, config.replace(seed=seed), sub, ctx))
        seeds.append(seed)
    return RepeatedResult(runs, seeds, aggregate_runs(runs))


# -- supervised training at a fixed anchor ratio ------------------------------------

@dataclass
class RatioResult:
    eta: float
    seed: int
    n_train: int
    n_test: int
    metrics: Metrics
    params: ModelParams
    optimizer: Adam
    rankings: dict


def train_at_ratio(dataset: TwinNetworkDataset, config: ExperimentConfig, eta: float,
                   seed: int | None = None, contexts=None) -> RatioResult:
    """Train on a random fraction ``eta`` of the anchors and rank the rest."""
    if not 0.0 < eta < 1.0:
        raise ValueError(f"train ratio must lie in (0, 1), got {eta}")
    cfg = config if seed is None else config.replace(seed=seed)
    n_a, n_b = dataset.graph_a.node_count, dataset.graph_b.node_count
    ctx_a, ctx_b = contexts if contexts is not None else _contexts(dataset, cfg)
    m = len(dataset.anchors)
    n_train = int(round(eta * m))
    if not 1 <= n_train < m:
        raise ValueError(f"ratio {eta} leaves no train or no test anchors out of {m}")
    perm = substream(cfg.seed, "split").permutation(m)
    train_anchors = dataset.anchors[np.sort(perm[:n_train])]
    test_anchors = dataset.anchors[np.sort(perm[n_train:])]

    store = LabelStore(n_a, n_b)
    for a, b in train_anchors:
        store.add_positive(a, b, "seed")
    params = init_params(cfg.architecture(n_a, n_b), substream(cfg.seed, "init"))
    res = train(store, ctx_a, ctx_b, params, cfg.train_config(True), substream(cfg.seed, "sampling"),
                exclude_a=test_anchors[:, 0], exclude_b=test_anchors[:, 1])
    emb = Embeddings.compute(params, ctx_a, ctx_b)
    cand = [b for b in range(n_b) if b not in store.labeled_b]
    test_map = {int(a): int(b) for a, b in test_anchors}
    metrics, rankings = evaluate(params, emb, test_map, cand, cfg.metric_k)
    return RatioResult(eta, cfg.seed, n_train, m - n_train, metrics, params, res.optimizer, rankings)
