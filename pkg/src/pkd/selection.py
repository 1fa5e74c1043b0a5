"""Disagreement-driven node selection and the distance-based neighbor selector.

Scores every candidate node by the sum of pairwise symmetric KL divergences
among the B teachers' predictive distributions (delta_k), ranks descending,
and picks the top of the ranking up to an annotation budget. The companion
score delta_v (mean KL from the ensemble-average distribution) satisfies
delta_k >= B * delta_v; the derivation actually yields the stronger
delta_k >= B^2 * delta_v, which the property tests assert.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

PROB_ATOL = 1e-9
PROB_FLOOR = 1e-12


def _validate_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    if np.any(rows < PROB_FLOOR):
        raise ValueError(f"probability entries must be >= {PROB_FLOOR}")
    sums = rows.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > PROB_ATOL):
        raise ValueError(f"rows must sum to 1 within {PROB_ATOL}, got sums {sums}")
    return rows


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; inputs must be clamped probability rows."""
    p = _validate_rows(p)[0]
    q = _validate_rows(q)[0]
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(np.sum(p * np.log(p / q)))


def k_uncertainty(probs_per_teacher) -> float:
    """delta_k: sum over teacher pairs of the symmetric KL divergence."""
    rows = _validate_rows(np.asarray(probs_per_teacher, dtype=np.float64))
    b = rows.shape[0]
    if b < 2:
        raise ValueError(f"k_uncertainty needs >= 2 teachers, got {b}")
    log_rows = np.log(rows)
    total = 0.0
    for i in range(b):
        for j in range(i + 1, b):
            diff = log_rows[i] - log_rows[j]
            total += float(np.sum(rows[i] * diff) - np.sum(rows[j] * diff))
    return total


def node_uncertainty(probs_per_teacher) -> float:
    """delta_v: mean KL of each teacher row from the ensemble average M."""
    rows = _validate_rows(np.asarray(probs_per_teacher, dtype=np.float64))
    b = rows.shape[0]
    if b < 2:
        raise ValueError(f"node_uncertainty needs >= 2 teachers, got {b}")
    m = rows.mean(axis=0)
    return float(np.mean(np.sum(rows * (np.log(rows) - np.log(m)), axis=1)))


@dataclass
class PreferenceRank:
    """Pool nodes ordered by descending delta_k, ties by ascending node id."""

    order: np.ndarray        # pool node ids, ranked
    delta_k: np.ndarray      # aligned with `order`
    delta_v: np.ndarray      # aligned with `order`


@dataclass
class Selection:
    """Top of a preference rank for a given budget."""

    nodes: np.ndarray            # selected node ids, in rank order
    threshold: float | None     # delta_k of the last selected node; None when empty


def _teacher_probs(teachers) -> np.ndarray:
    """Accept a TeacherEnsemble-like object or a raw (B, N, C) array."""
    probs = getattr(teachers, "probs", teachers)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ValueError(f"teacher probabilities must be (B, N, C), got {probs.shape}")
    return probs


def preference_rank(teachers, pool) -> PreferenceRank:
    """Rank pool nodes by delta_k, descending; deterministic tie-break by node id."""
    probs = _teacher_probs(teachers)
    pool = np.asarray(pool, dtype=np.int64)
    if pool.size == 0:
        raise ValueError("empty selection pool")
    b = probs.shape[0]
    rows = probs[:, pool, :]                       # (B, P, C)
    logs = np.log(rows)
    dk = np.zeros(pool.size)
    for i in range(b):
        for j in range(i + 1, b):
            diff = logs[i] - logs[j]
            dk += np.sum(rows[i] * diff, axis=1) - np.sum(rows[j] * diff, axis=1)
    m = rows.mean(axis=0)
    dv = np.mean(np.sum(rows * (logs - np.log(m)[None, :, :]), axis=2), axis=0)

    order = np.lexsort((pool, -dk))                # descending delta_k, ascending id
    return PreferenceRank(order=pool[order], delta_k=dk[order], delta_v=dv[order])


def select_nodes(rank: PreferenceRank, budget: int) -> Selection:
    """Top-`budget` nodes of the rank; records the delta_k threshold."""
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    if budget > rank.order.size:
        raise ValueError(f"budget {budget} exceeds pool size {rank.order.size}")
    if budget == 0:
        return Selection(nodes=np.zeros(0, dtype=np.int64), threshold=None)
    return Selection(nodes=rank.order[:budget].copy(), threshold=float(rank.delta_k[budget - 1]))


@dataclass
class DnsResult:
    """Per-teacher nearest neighbors of one node plus the merged set."""

    node: int
    per_teacher: list[np.ndarray]     # K nearest per teacher, by distance then id
    merged: np.ndarray                # union minus all-teacher-common ids, ascending
    mean_distances: np.ndarray        # mean distance to the K nearest, per teacher


def dns_neighbors(node: int, embeddings_per_teacher, k_nn: int) -> DnsResult:
    """K-nearest-neighbor search per teacher embedding space, merged.

    Euclidean distance, self excluded, distance ties by ascending node id.
    Nodes found in every one of the B lists are dropped from the merged set
    (applied only for B >= 2; a single space returns its list unchanged).
    """
    mats = [np.asarray(e, dtype=np.float64) for e in embeddings_per_teacher]
    if not mats:
        raise ValueError("need at least one embedding space")
    n = mats[0].shape[0]
    if k_nn < 1 or k_nn >= n:
        raise ValueError(f"k_nn must be in [1, N), got {k_nn} for N={n}")

    per_teacher: list[np.ndarray] = []
    means = np.zeros(len(mats))
    for b, emb in enumerate(mats):
        if emb.shape[0] != n:
            raise ValueError(f"embedding space {b} has {emb.shape[0]} rows, expected {n}")
        dist = np.linalg.norm(emb - emb[node], axis=1)
        dist[node] = np.inf
        order = np.lexsort((np.arange(n), dist))
        nearest = order[:k_nn]
        per_teacher.append(nearest.astype(np.int64))
        means[b] = float(dist[nearest].mean())

    if len(mats) == 1:
        merged = np.sort(per_teacher[0])
    else:
        union = set()
        common = set(per_teacher[0].tolist())
        for lst in per_teacher:
            ids = set(lst.tolist())
            union |= ids
            common &= ids
        merged = np.array(sorted(union - common), dtype=np.int64)
    return DnsResult(node=int(node), per_teacher=per_teacher, merged=merged, mean_distances=means)


def dns_mean_distance_matrix(embeddings_per_teacher, k_nn: int) -> np.ndarray:
    """Mean K-nearest distance per (node, teacher), used by the RL state encoding."""
    mats = [np.asarray(e, dtype=np.float64) for e in embeddings_per_teacher]
    n = mats[0].shape[0]
    out = np.zeros((n, len(mats)))
    for b, emb in enumerate(mats):
        sq = np.sum(emb ** 2, axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (emb @ emb.T), 0.0)
        d = np.sqrt(d2)
        np.fill_diagonal(d, np.inf)
        part = np.partition(d, k_nn - 1, axis=1)[:, :k_nn]
        out[:, b] = part.mean(axis=1)
    return out


def export_rank_csv(path, rank: PreferenceRank, selected: np.ndarray) -> None:
    """CSV export: node_id, delta_k, delta_v, selected (0/1)."""
    chosen = set(int(x) for x in selected)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "delta_k", "delta_v", "selected"])
        for node, dk, dv in zip(rank.order, rank.delta_k, rank.delta_v):
            writer.writerow([int(node), repr(float(dk)), repr(float(dv)), int(int(node) in chosen)])
