"""Truncated Smooth-AP loss, its hard-indicator counterpart, and batch-hard triplet loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit

from .errors import NoPositives, NoValidAnchors, NoValidQueries


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.01
    k: int = 4
    margin: float = 0.2

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True, eq=False)
class BatchRelations:
    """Positive (<= 10 m) and negative (>= 50 m) pair masks of a batch; diagonal excluded."""

    positive_mask: np.ndarray
    negative_mask: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positive_mask, dtype=bool)
        neg = np.asarray(self.negative_mask, dtype=bool)
        if pos.shape != neg.shape or pos.ndim != 2 or pos.shape[0] != pos.shape[1]:
            raise ValueError("relation masks must be square and of equal shape")
        if (pos & neg).any():
            raise ValueError("a pair cannot be both positive and negative")
        if not ((pos == pos.T).all() and (neg == neg.T).all()):
            raise ValueError("relation masks must be symmetric")
        if pos.diagonal().any() or neg.diagonal().any():
            raise ValueError("the diagonal must be excluded")
        object.__setattr__(self, "positive_mask", pos)
        object.__setattr__(self, "negative_mask", neg)

    @property
    def m(self) -> int:
        return self.positive_mask.shape[0]

    @classmethod
    def from_locations(cls, locations, pos_radius: float = 10.0, neg_radius: float = 50.0) -> "BatchRelations":
        loc = np.asarray(locations, dtype=np.float64)
        d = cdist(loc, loc)
        off_diag = ~np.eye(len(loc), dtype=bool)
        return cls((d <= pos_radius) & off_diag, (d >= neg_radius) & off_diag)

    @classmethod
    def from_labels(cls, labels) -> "BatchRelations":
        lab = np.asarray(labels)
        same = lab[:, None] == lab[None, :]
        off_diag = ~np.eye(len(lab), dtype=bool)
        return cls(same & off_diag, ~same)


def sigmoid_indicator(x, tau: float):
    """Smooth step ``1 / (1 + exp(-x / tau))``; saturates without overflow."""
    return expit(np.asarray(x, dtype=np.float64) / tau)


def _top_k_positives(dists: np.ndarray, pos: np.ndarray, k: int) -> np.ndarray:
    idx = np.flatnonzero(pos)
    # ties broken by batch index
    order = np.lexsort((idx, dists[idx]))
    return idx[order[:k]]


def truncated_smooth_ap(q: int, dists: np.ndarray, rel: BatchRelations, cfg: LossConfig) -> float:
    """Smooth AP of query ``q`` over its ``k`` nearest positives, ranked among all labelled pairs."""
    dists = np.asarray(dists, dtype=np.float64)
    pos = rel.positive_mask[q]
    if not pos.any():
        raise NoPositives(f"query {q} has no positives in the batch")
    P = _top_k_positives(dists, pos, cfg.k)
    omega = np.flatnonzero(pos | rel.negative_mask[q])
    total = 0.0
    for i in P:
        g_p = sigmoid_indicator(dists[i] - dists[P[P != i]], cfg.tau).sum()
        g_o = sigmoid_indicator(dists[i] - dists[omega[omega != i]], cfg.tau).sum()
        total += (1.0 + g_p) / (1.0 + g_o)
    return total / len(P)


def hard_truncated_ap_oracle(q: int, dists: np.ndarray, rel: BatchRelations, k: int) -> float:
    """Same ranking ratio as the smooth version, with a strict step (ties count 0)."""
    dists = np.asarray(dists, dtype=np.float64)
    pos = rel.positive_mask[q]
    if not pos.any():
        raise NoPositives(f"query {q} has no positives in the batch")
    P = _top_k_positives(dists, pos, k)
    omega = np.flatnonzero(pos | rel.negative_mask[q])
    total = 0.0
    for i in P:
        num = 1 + sum(1 for j in P if j != i and dists[i] - dists[j] > 0)
        den = 1 + sum(1 for j in omega if j != i and dists[i] - dists[j] > 0)
        total += num / den
    return total / len(P)


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    return cdist(x, x)


def _distance_backward(x: np.ndarray, d: np.ndarray, grad_d: np.ndarray) -> np.ndarray:
    """Chain ``dL/dD`` (m x m, not necessarily symmetric) to ``dL/dX``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(d > 0, grad_d / d, 0.0)
    s = w + w.T
    return s.sum(axis=1)[:, None] * x - s @ x


# Called with the shape of every per-query difference structure the loss allocates.
AllocHook = Callable[[tuple[int, ...]], None]


def tsap_loss(descriptors: np.ndarray, rel: BatchRelations, cfg: LossConfig,
              alloc_hook: AllocHook | None = None) -> tuple[float, np.ndarray]:
    """Mean of ``1 - AP_q`` over queries with at least one positive, and its gradient.

    Top-k selection is treated as constant; gradients flow through the sigmoid
    terms and the Euclidean distances.  Per query only a ``k x m`` difference
    block is materialized.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    m = len(x)
    if m < 2:
        raise NoValidQueries("need at least two batch elements")
    if rel.m != m:
        raise ValueError("relations do not match the batch size")
    d = pairwise_distances(x)
    pos, neg = rel.positive_mask, rel.negative_mask
    n_pos = pos.sum(axis=1)
    queries = np.flatnonzero(n_pos > 0)
    if len(queries) == 0:
        raise NoValidQueries("no query has a positive in the batch")
    k = cfg.k

    # P[q, a]: a-th closest positive of q (padded with q itself where invalid)
    P = np.repeat(queries[:, None], k, axis=1)
    valid = np.zeros((len(queries), k), dtype=bool)
    for r, q in enumerate(queries):
        top = _top_k_positives(d[q], pos[q], k)
        P[r, :len(top)] = top
        valid[r, :len(top)] = True
    n_sel = valid.sum(axis=1)

    dq = d[queries]                                    # (Q, m)
    d_i = np.take_along_axis(dq, P, axis=1)            # (Q, k)
    diff = d_i[:, :, None] - dq[:, None, :]            # (Q, k, m)
    if alloc_hook is not None:
        alloc_hook(diff.shape)
    G = expit(diff / cfg.tau)

    in_p = np.zeros((len(queries), m), dtype=bool)
    rows = np.repeat(np.arange(len(queries)), k)
    in_p[rows[valid.ravel()], P[valid]] = True
    in_omega = pos[queries] | neg[queries]
    not_self = np.arange(m)[None, None, :] != P[:, :, None]
    mask_p = in_p[:, None, :] & not_self
    mask_o = in_omega[:, None, :] & not_self

    num = 1.0 + (G * mask_p).sum(axis=2)
    den = 1.0 + (G * mask_o).sum(axis=2)
    ratio = np.where(valid, num / den, 0.0)
    ap = ratio.sum(axis=1) / n_sel
    n_q = len(queries)
    loss = float(np.mean(1.0 - ap))

    # d loss / d ratio[q, a] = -1 / (n_q * n_sel[q])
    g_ratio = np.where(valid, -1.0 / (n_q * n_sel[:, None]), 0.0)
    g_G = g_ratio[:, :, None] * (mask_p / den[:, :, None] - (num / den ** 2)[:, :, None] * mask_o)
    g_diff = g_G * G * (1.0 - G) / cfg.tau
    g_dq = -g_diff.sum(axis=1)                          # via -d(q, j)
    np.add.at(g_dq, (np.repeat(np.arange(n_q), k), P.ravel()), g_diff.sum(axis=2).ravel())
    grad_d = np.zeros((m, m))
    grad_d[queries] = g_dq
    return loss, _distance_backward(x, d, grad_d)


def triplet_loss_batch_hard(descriptors: np.ndarray, rel: BatchRelations,
                            margin: float = 0.2) -> tuple[float, np.ndarray]:
    """Hinge on (farthest positive - nearest negative + margin), averaged over valid anchors."""
    x = np.asarray(descriptors, dtype=np.float64)
    d = pairwise_distances(x)
    pos, neg = rel.positive_mask, rel.negative_mask
    anchors = np.flatnonzero(pos.any(axis=1) & neg.any(axis=1))
    if len(anchors) == 0:
        raise NoValidAnchors("no anchor has both a positive and a negative")
    hp = np.argmax(np.where(pos[anchors], d[anchors], -np.inf), axis=1)
    hn = np.argmin(np.where(neg[anchors], d[anchors], np.inf), axis=1)
    viol = d[anchors, hp] - d[anchors, hn] + margin
    active = viol > 0
    loss = float(np.where(active, viol, 0.0).mean())
    grad_d = np.zeros_like(d)
    w = active / len(anchors)
    np.add.at(grad_d, (anchors, hp), w)
    np.add.at(grad_d, (anchors, hn), -w)
    return loss, _distance_backward(x, d, grad_d)
