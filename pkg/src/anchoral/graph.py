"""Social graphs, transition matrices and synthetic twin networks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class GraphFormatError(ValueError):
    """Raised for malformed edge-list or anchor files."""


@dataclass(frozen=True)
class SocialGraph:
    """Undirected, unweighted graph over dense node indices ``0..node_count-1``.

    ``edges`` holds each unordered pair once as ``(u, v)`` with ``u < v``;
    ``adjacency`` is the symmetric CSR pattern built from it.
    """

    node_count: int
    edges: np.ndarray
    adjacency: sp.csr_matrix = field(repr=False)

    @classmethod
    def from_edges(cls, node_count: int, pairs) -> "SocialGraph":
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.size and (pairs.min() < 0 or pairs.max() >= node_count):
            raise GraphFormatError("edge endpoint outside 0..node_count-1")
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        lo = np.minimum(pairs[:, 0], pairs[:, 1])
        hi = np.maximum(pairs[:, 0], pairs[:, 1])
        edges = np.unique(np.stack([lo, hi], axis=1), axis=0).reshape(-1, 2)
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        adj = sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(node_count, node_count)
        )
        adj.sort_indices()
        return cls(node_count, edges, adj)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)


@dataclass(frozen=True)
class TwinNetworkDataset:
    graph_a: SocialGraph
    graph_b: SocialGraph
    anchors: np.ndarray  # (M, 2) rows of (a_index, b_index), sorted by a
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_anchor_map(self.anchors, self.graph_a.node_count, self.graph_b.node_count)

    def anchor_dict(self) -> dict[int, int]:
        return {int(a): int(b) for a, b in self.anchors}


def validate_anchor_map(anchors: np.ndarray, n_a: int, n_b: int) -> None:
    anchors = np.asarray(anchors).reshape(-1, 2)
    if anchors.size == 0:
        return
    if anchors.min() < 0 or anchors[:, 0].max() >= n_a or anchors[:, 1].max() >= n_b:
        raise GraphFormatError("anchor index out of range")
    if len(np.unique(anchors[:, 0])) != len(anchors) or len(np.unique(anchors[:, 1])) != len(anchors):
        raise GraphFormatError("anchor map is not injective")


def _parse_pairs(path: Path, what: str) -> list[tuple[str, str, int]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected two fields in {what}, got {len(parts)}")
            out.append((parts[0], parts[1], lineno))
    return out


def _as_index(tok: str, path: Path, lineno: int) -> int:
    if not tok.isdigit():
        raise GraphFormatError(f"{path}:{lineno}: not a non-negative integer: {tok!r}")
    return int(tok)


def _header_node_count(path: Path) -> int | None:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            s = line.strip()
            if not s:
                continue
            if not s.startswith("#"):
                return None
            parts = s[1:].split()
            if len(parts) == 2 and parts[0] == "nodes" and parts[1].isdigit():
                return int(parts[1])
    return None


def load_edge_list(path, node_count_hint: int | None = None) -> SocialGraph:
    """Read an integer edge list; duplicates and reversed duplicates collapse.

    A leading ``# nodes N`` comment supplies the node count when no hint is
    given, so trailing isolated nodes survive a round trip.
    """
    path = Path(path)
    if node_count_hint is None:
        node_count_hint = _header_node_count(path)
    pairs = []
    for u, v, lineno in _parse_pairs(path, "edge list"):
        iu, iv = _as_index(u, path, lineno), _as_index(v, path, lineno)
        if node_count_hint is not None and max(iu, iv) >= node_count_hint:
            raise GraphFormatError(
                f"{path}:{lineno}: index {max(iu, iv)} exceeds node count hint {node_count_hint}"
            )
        if iu == iv:
            log.warning("%s:%d: self-loop on %d ignored", path, lineno, iu)
        pairs.append((iu, iv))
    n = max((max(p) for p in pairs), default=-1) + 1
    if node_count_hint is not None:
        n = max(n, node_count_hint)
    return SocialGraph.from_edges(n, pairs)


def load_edge_list_ids(path, sidecar=None) -> tuple[SocialGraph, list[str]]:
    """Read an edge list with arbitrary string IDs.

    IDs are numbered in order of first appearance and the mapping is written
    to ``sidecar`` (default ``<path>.index.tsv``) as ``index<TAB>id`` lines.
    """
    path = Path(path)
    ids: dict[str, int] = {}
    pairs = []
    for u, v, _ in _parse_pairs(path, "edge list"):
        pairs.append((ids.setdefault(u, len(ids)), ids.setdefault(v, len(ids))))
    names = list(ids)
    sidecar = Path(sidecar) if sidecar else path.with_name(path.name + ".index.tsv")
    with open(sidecar, "w", encoding="utf-8") as fh:
        for i, name in enumerate(names):
            fh.write(f"{i}\t{name}\n")
    return SocialGraph.from_edges(len(names), pairs), names


def load_anchor_map(path, n_a: int, n_b: int, a_ids=None, b_ids=None) -> np.ndarray:
    """Read ``a<TAB>b`` anchor lines, optionally translating string IDs."""
    path = Path(path)
    a_lookup = {name: i for i, name in enumerate(a_ids)} if a_ids is not None else None
    b_lookup = {name: i for i, name in enumerate(b_ids)} if b_ids is not None else None
    rows = []
    for a, b, lineno in _parse_pairs(path, "anchor map"):
        try:
            ia = a_lookup[a] if a_lookup is not None else _as_index(a, path, lineno)
            ib = b_lookup[b] if b_lookup is not None else _as_index(b, path, lineno)
        except KeyError as exc:
            raise GraphFormatError(f"{path}:{lineno}: unknown node id {exc.args[0]!r}") from None
        rows.append((ia, ib))
    anchors = np.array(sorted(rows), dtype=np.int64).reshape(-1, 2)
    validate_anchor_map(anchors, n_a, n_b)
    return anchors


def write_edge_list(graph: SocialGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# nodes {graph.node_count}\n")
        for u, v in graph.edges:
            fh.write(f"{u} {v}\n")


def write_anchor_map(anchors: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in anchors:
            fh.write(f"{a}\t{b}\n")


def build_transition(g: SocialGraph) -> sp.csr_matrix:
    """Row-stochastic transition matrix; isolated nodes get a self-loop."""
    deg = g.degrees().astype(np.float64)
    adj = g.adjacency.copy().astype(np.float64)
    isolated = np.flatnonzero(deg == 0)
    if len(isolated):
        adj = adj + sp.csr_matrix(
            (np.ones(len(isolated)), (isolated, isolated)), shape=adj.shape
        )
        deg[isolated] = 1.0
    D = sp.diags(1.0 / deg) @ adj
    D = sp.csr_matrix(D)
    D.sort_indices()
    return D


def _er_edges(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    return np.stack([iu[keep], ju[keep]], axis=1)


def _add_random_edges(n: int, existing: set, count: int, rng: np.random.Generator) -> None:
    limit = n * (n - 1) // 2
    attempts = 0
    while count > 0 and len(existing) < limit and attempts < 100 * (count + 10):
        attempts += 1
        u, v = rng.integers(0, n, size=2)
        if u == v:
            continue
        e = (min(u, v), max(u, v))
        if e not in existing:
            existing.add(e)
            count -= 1


def _derive_network(base: np.ndarray, is_anchor: np.ndarray, perturb_prob: float,
                    rng: np.random.Generator) -> set:
    n = len(is_anchor)
    edges = set()
    for u, v in base:
        if is_anchor[u] and is_anchor[v]:
            edges.add((int(u), int(v)))
            continue
        # keep the exclusive endpoint, redraw its partner
        keep = int(u) if not is_anchor[u] else int(v)
        other = int(rng.integers(0, n - 1))
        other += other >= keep
        edges.add((min(keep, other), max(keep, other)))
    if perturb_prob > 0:
        ordered = sorted(edges)
        drop = rng.random(len(ordered)) < perturb_prob
        edges = {e for e, d in zip(ordered, drop) if not d}
        _add_random_edges(n, edges, int(drop.sum()), rng)
    return edges


def generate_twin_networks(n: int, base_edge_prob: float, anchor_fraction: float,
                           perturb_prob: float, seed: int) -> TwinNetworkDataset:
    """Two perturbed copies of one random graph with a known anchor map.

    Anchor nodes share their anchor-to-anchor edges in both networks; every
    edge touching a non-anchor node is rewired independently per network.
    B's indices are a random relabeling of A's.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    for name, val in (("base_edge_prob", base_edge_prob), ("anchor_fraction", anchor_fraction),
                      ("perturb_prob", perturb_prob)):
        if not 0.0 <= val <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1]")
    n_anchor = int(math.floor(n * anchor_fraction + 1e-9))
    if anchor_fraction > 0 and n_anchor < 1:
        raise ValueError(f"n={n} too small to realize anchor_fraction={anchor_fraction}")

    rng = np.random.default_rng(seed)
    base = _er_edges(n, base_edge_prob, rng)
    anchor_nodes = np.sort(rng.choice(n, size=n_anchor, replace=False))
    is_anchor = np.zeros(n, dtype=bool)
    is_anchor[anchor_nodes] = True

    edges_a = _derive_network(base, is_anchor, perturb_prob, rng)
    edges_b = _derive_network(base, is_anchor, perturb_prob, rng)
    relabel = rng.permutation(n)
    graph_a = SocialGraph.from_edges(n, sorted(edges_a))
    graph_b = SocialGraph.from_edges(n, [(relabel[u], relabel[v]) for u, v in sorted(edges_b)])
    anchors = np.stack([anchor_nodes, relabel[anchor_nodes]], axis=1).astype(np.int64)
    meta = dict(n=n, base_edge_prob=base_edge_prob, anchor_fraction=anchor_fraction,
                perturb_prob=perturb_prob, seed=seed)
    return TwinNetworkDataset(graph_a, graph_b, anchors.reshape(-1, 2), meta)
