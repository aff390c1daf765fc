"""Terms of the anchor-user-prediction objective, evaluated on a batch forward."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

PROB_CLAMP = 1e-12

# counts of degenerate evaluations, e.g. cosine of a zero-norm embedding
DIAGNOSTICS: Counter = Counter()


@dataclass(frozen=True)
class LossWeights:
    cross: float = 0.01
    classify: float = 0.01
    reg: float = 1e-5
    margin: float = 0.0

    def __post_init__(self):
        if min(self.cross, self.classify, self.reg) < 0:
            raise ValueError("loss weights must be non-negative")


def cosine_rows(va: np.ndarray, vb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise cosine; zero-norm rows get cos = 0. Returns (cos, |va|, |vb|)."""
    na = np.linalg.norm(va, axis=-1)
    nb = np.linalg.norm(vb, axis=-1)
    denom = na * nb
    ok = denom > 0
    cos = np.zeros(np.broadcast(na, nb).shape)
    np.divide(np.sum(va * vb, axis=-1), denom, out=cos, where=ok)
    bad = int(np.size(ok) - np.count_nonzero(ok))
    if bad:
        DIAGNOSTICS["zero_norm_cosine"] += bad
    return cos, na, nb


def loss_single(fwd) -> float:
    ra = np.sum((fwd.ctx_a - fwd.recon_a) ** 2, axis=1)
    rb = np.sum((fwd.ctx_b - fwd.recon_b) ** 2, axis=1)
    return float(np.mean(ra + rb))


def loss_cross(fwd, labels, margin: float = 0.0) -> float:
    labels = np.asarray(labels)
    cos, _, _ = cosine_rows(fwd.v_a, fwd.v_b)
    pos, neg = labels == 1, labels == 0
    # an empty side contributes 0
    total = 0.0
    if pos.any():
        total += float(np.mean(1.0 - cos[pos]))
    if neg.any():
        total += float(np.mean(np.maximum(0.0, cos[neg] - margin)))
    return total


def loss_classify(fwd, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    p_true = fwd.probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p_true, PROB_CLAMP))))


def loss_reg(fwd) -> float:
    return float(np.mean(np.sum(fwd.v_a ** 2, axis=1) + np.sum(fwd.v_b ** 2, axis=1)))


def loss_total(fwd, labels, weights: LossWeights = LossWeights()) -> float:
    return (loss_single(fwd)
            + weights.cross * loss_cross(fwd, labels, weights.margin)
            + weights.classify * loss_classify(fwd, labels)
            + weights.reg * loss_reg(fwd))
