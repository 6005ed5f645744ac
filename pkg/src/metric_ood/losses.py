"""Contrastive / out-of-distribution-mining pair losses and in-batch pairing.

Pairs are built after the embedding layer from a single forward pass. Labels
follow the usual convention: ``y = 0`` same class, ``y = 1`` different class
(or in vs. out); ``z = 0`` marks an out/out pair, which the builder never
emits.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import PairingWarning, UsageError

DEFAULT_MARGIN = 10.0


def _pair_terms(e1, e2, y, margin):
    """Vectorised contrastive loss; returns (losses, grad wrt e1)."""
    diff = e1 - e2
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    gap = np.maximum(0.0, margin - dist)
    same = y == 0
    loss = np.where(same, 0.5 * dist * dist, 0.5 * gap * gap)
    # subgradient 0 at dist == 0 (y=1) and at the hinge dist == margin
    safe = np.where(dist > 0, dist, 1.0)
    coef = np.where(same, 1.0, np.where((dist > 0) & (gap > 0), -gap / safe, 0.0))
    return loss, coef[:, None] * diff


def _check_pair_args(e1, e2, margin):
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape or e1.ndim != 1:
        raise UsageError(f"embedding shapes {e1.shape} and {e2.shape} differ")
    if not margin > 0:
        raise UsageError("margin must be positive")
    return e1, e2


def contrastive_pair_loss(e1, e2, y, margin=DEFAULT_MARGIN):
    """Loss and gradients for one pair: ½(1-y)D² + ½y·max(0, m-D)²."""
    e1, e2 = _check_pair_args(e1, e2, margin)
    loss, g = _pair_terms(e1[None], e2[None], np.array([y]), margin)
    return float(loss[0]), g[0], -g[0]


def odm_pair_loss(e1, e2, y, z, margin=DEFAULT_MARGIN):
    """Contrastive loss gated by ``z``; a z=0 (out/out) pair contributes nothing."""
    e1, e2 = _check_pair_args(e1, e2, margin)
    if z not in (0, 1):
        raise UsageError(f"z must be 0 or 1, got {z!r}")
    loss, g = _pair_terms(e1[None], e2[None], np.array([y]), margin)
    zf = float(z)
    return float(loss[0]) * zf, g[0] * zf, -g[0] * zf


# -- pairing ---------------------------------------------------------------------


@dataclass(frozen=True)
class PairSchedule:
    """How many and which pairs to draw per minibatch.

    Every ``period``-th step (1-based) is a cross step: ``cross_ratio`` of the
    pairs are (in, out) pairs, the rest are in/in. Other steps draw in/in
    pairs only. Among in/in pairs ``same_ratio`` are same-class.
    ``pairs_per_batch=None`` means one pair per minibatch member.
    """

    cross_ratio: float = 0.25
    period: int = 2
    same_ratio: float = 0.5
    pairs_per_batch: int = None

    def __post_init__(self):
        if not 0.0 <= self.cross_ratio <= 1.0:
            raise UsageError("cross_ratio must lie in [0, 1]")
        if not 0.0 <= self.same_ratio <= 1.0:
            raise UsageError("same_ratio must lie in [0, 1]")
        if self.period < 1:
            raise UsageError("period must be >= 1")

    def is_cross_step(self, step):
        return step % self.period == 0


@dataclass
class PairBatch:
    pairs: np.ndarray  # (P, 2) int indices into the minibatch
    y: np.ndarray
    z: np.ndarray

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64),
                   np.zeros(0, dtype=np.int64))

    def n_cross(self, is_in):
        is_in = np.asarray(is_in, dtype=bool)
        return int(np.sum(is_in[self.pairs[:, 0]] != is_in[self.pairs[:, 1]]))

    def n_out_out(self, is_in):
        is_in = np.asarray(is_in, dtype=bool)
        return int(np.sum(~is_in[self.pairs[:, 0]] & ~is_in[self.pairs[:, 1]]))

    def check(self, labels, is_in):
        """Raise ``UsageError`` if any pair violates the labelling rules."""
        labels = np.asarray(labels)
        is_in = np.asarray(is_in, dtype=bool)
        a, b = self.pairs[:, 0], self.pairs[:, 1]
        if np.any(a == b):
            raise UsageError("pair with identical members")
        if np.any(self.z != 1) or self.n_out_out(is_in):
            raise UsageError("out/out pair present")
        same = is_in[a] & is_in[b] & (labels[a] == labels[b])
        if np.any((self.y == 0) != same):
            raise UsageError("y label inconsistent with pair membership")


def _as_in_mask(origin):
    origin = np.asarray(origin)
    if origin.dtype == bool:
        return origin
    return origin == "in"


def _take(rng, candidates, k):
    if k >= len(candidates):
        return candidates
    pick = np.sort(rng.choice(len(candidates), size=k, replace=False))
    return candidates[pick]


def build_pairs(labels, origin, schedule, rng, step=1):
    """Sample a :class:`PairBatch` from one minibatch.

    ``origin`` is a per-sample ``"in"``/``"out"`` tag (or boolean in-mask).
    Shortfalls in one pair category are filled from the others, so the pair
    count stays at the schedule's target whenever enough candidates exist.
    """
    labels = np.asarray(labels)
    is_in = _as_in_mask(origin)
    n = len(labels)
    in_idx = np.flatnonzero(is_in)
    out_idx = np.flatnonzero(~is_in)

    ia, ib = np.triu_indices(len(in_idx), k=1)
    a, b = in_idx[ia], in_idx[ib]
    same_mask = labels[a] == labels[b]
    same_cand = np.stack([a[same_mask], b[same_mask]], axis=1)
    diff_cand = np.stack([a[~same_mask], b[~same_mask]], axis=1)
    if schedule.is_cross_step(step) and len(out_idx):
        cross_cand = np.stack(np.meshgrid(in_idx, out_idx, indexing="ij"), axis=-1).reshape(-1, 2)
    else:
        cross_cand = np.zeros((0, 2), dtype=np.int64)

    total = schedule.pairs_per_batch if schedule.pairs_per_batch is not None else n
    if not (len(same_cand) + len(diff_cand) + len(cross_cand)) or total == 0:
        warnings.warn(f"no valid pairs in minibatch of {n} ({len(in_idx)} in)", PairingWarning,
                      stacklevel=2)
        return PairBatch.empty()

    n_cross = min(int(round(schedule.cross_ratio * total)), len(cross_cand)) if len(cross_cand) else 0
    n_inin = total - n_cross
    n_same = min(int(round(schedule.same_ratio * n_inin)), len(same_cand))
    n_diff = min(n_inin - n_same, len(diff_cand))
    # top up from whichever pools still have room
    n_same = min(n_inin - n_diff, len(same_cand))
    short = total - (n_cross + n_same + n_diff)
    if short > 0 and len(cross_cand):
        n_cross = min(n_cross + short, len(cross_cand))

    same = _take(rng, same_cand, n_same)
    diff = _take(rng, diff_cand, n_diff)
    cross = _take(rng, cross_cand, n_cross)
    pairs = np.concatenate([same, diff, cross]).astype(np.int64).reshape(-1, 2)
    y = np.concatenate([np.zeros(len(same)), np.ones(len(diff) + len(cross))]).astype(np.int64)
    return PairBatch(pairs, y, np.ones(len(pairs), dtype=np.int64))


# -- batch losses --------------------------------------------------------------------


@dataclass
class LossOutput:
    value: float
    embedding_gradients: np.ndarray


def batch_metric_loss(embeddings, pair_batch, margin=DEFAULT_MARGIN, kind="contrastive"):
    """Mean pair loss over ``pair_batch`` and its gradient wrt every embedding."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if kind not in ("contrastive", "odm"):
        raise UsageError(f"unknown metric loss {kind!r}")
    if not margin > 0:
        raise UsageError("margin must be positive")
    grads = np.zeros_like(emb)
    p = len(pair_batch)
    if p == 0:
        warnings.warn("empty pair batch; loss is 0", PairingWarning, stacklevel=2)
        return LossOutput(0.0, grads)
    a, b = pair_batch.pairs[:, 0], pair_batch.pairs[:, 1]
    if a.min() < 0 or b.min() < 0 or max(a.max(), b.max()) >= len(emb):
        raise UsageError("pair index out of range")
    loss, g = _pair_terms(emb[a], emb[b], pair_batch.y, margin)
    if kind == "odm":
        zf = pair_batch.z.astype(np.float64)
        loss = loss * zf
        g = g * zf[:, None]
    scale = 1.0 / p
    np.add.at(grads, a, g * scale)
    np.add.at(grads, b, -g * scale)
    return LossOutput(float(loss.sum() * scale), grads)


# -- cross-entropy -------------------------------------------------------------------


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits, labels):
    """Mean negative log-softmax of the true class, and d(loss)/d(logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= c):
        raise UsageError(f"labels must be {n} integers in [0, {c})")
    labels = labels.astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), labels] - log_z
    probs = np.exp(shifted - log_z[:, None])
    probs[np.arange(n), labels] -= 1.0
    return float(-logp.mean()), probs / n
