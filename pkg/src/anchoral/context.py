"""Random-walk-with-restart structural context vectors."""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import SocialGraph, build_transition

CACHE_MAGIC = b"RWRCTX\x00\x00"
CACHE_VERSION = 1
_HEADER = struct.Struct("<8sIqqd")


@dataclass(frozen=True)
class ContextMatrix:
    rows: np.ndarray  # (N, N), row i is the context of user i
    steps: int
    restart: float

    @property
    def node_count(self) -> int:
        return self.rows.shape[0]


def rwr_step(p_prev: np.ndarray, D: sp.spmatrix, restart: float, origin: int) -> np.ndarray:
    """One transition: ``(1 - c) * p_prev @ D + c * e_origin``."""
    p_prev = np.asarray(p_prev, dtype=np.float64)
    if p_prev.shape[-1] != D.shape[0]:
        raise ValueError(f"vector of length {p_prev.shape[-1]} does not match {D.shape[0]} nodes")
    p = (1.0 - restart) * (D.T @ p_prev)
    p[origin] += restart
    return p


def _block_context(D_t: sp.csr_matrix, origins: np.ndarray, restart: float, steps: int) -> np.ndarray:
    n = D_t.shape[0]
    # columns are walkers: P[:, j] is the distribution of the walk started at origins[j]
    start = np.zeros((n, len(origins)))
    start[origins, np.arange(len(origins))] = 1.0
    p = start
    acc = np.zeros_like(start)
    for _ in range(steps):
        p = (1.0 - restart) * (D_t @ p) + restart * start
        acc += p
    return acc.T


def structural_context(g: SocialGraph, restart: float = 0.6, steps: int = 5,
                       block: int = 512, workers: int = 1) -> ContextMatrix:
    """Sum of the first ``steps`` RWR distributions for every origin node.

    Origins are processed in independent blocks, optionally on a thread pool.
    """
    if not 0.0 < restart < 1.0:
        raise ValueError("restart probability must lie in (0, 1)")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n = g.node_count
    D_t = sp.csr_matrix(build_transition(g).T)
    blocks = [np.arange(s, min(s + block, n)) for s in range(0, n, block)]

    def run(origins):
        return _block_context(D_t, origins, restart, steps)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    rows = np.vstack(parts) if parts else np.zeros((0, 0))
    return ContextMatrix(rows, steps, restart)


def save_context(ctx: ContextMatrix, path) -> None:
    n = ctx.node_count
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, n, ctx.steps, ctx.restart))
        fh.write(np.ascontiguousarray(ctx.rows, dtype="<f8").tobytes())


def load_context(path) -> ContextMatrix:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: not a context cache")
    magic, version, n, steps, restart = _HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise ValueError(f"{path}: not a context cache")
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != n * n:
        raise ValueError(f"{path}: truncated cache ({body.size} of {n * n} values)")
    return ContextMatrix(body.reshape(n, n).astype(np.float64), int(steps), float(restart))
