"""Three-term distillation: teacher bundles, masking, retraining, student fits.

The loss combines (a) soft cross-entropy toward one selected teacher's
probability row per node, (b) hard cross-entropy on the gold-labeled nodes,
and (c) a mean-entropy term that pushes student rows toward one-hot.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .graph import Split, TagGraph, subseed
from .models import ModelParams, TrainingDiverged, backward, forward, init_params, penultimate_embedding
from .training import AdamState, TrainConfig, adam_step, accuracy, train

STAGE_TEACHER = 19
STAGE_STUDENT = 23


@dataclass
class KdWeights:
    """Coefficients of the three loss terms."""

    alpha: float = 0.5
    beta: float = 1.0
    gamma: float = 0.1

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError(f"loss weights must be nonnegative: {self}")


@dataclass
class TeacherEnsemble:
    """B trained teachers with cached probability rows and embeddings."""

    kinds: list[str]
    params_list: list[ModelParams] | None
    probs: np.ndarray                    # (B, N, C)
    embeddings: list[np.ndarray]         # per teacher, (N, D_b)
    val_accs: list[float]

    @property
    def size(self) -> int:
        return self.probs.shape[0]

    @staticmethod
    def from_probabilities(probs, embeddings=None, kinds=None) -> "TeacherEnsemble":
        """Synthetic ensemble built from fixed probability rows (no trained params)."""
        probs = np.asarray(probs, dtype=np.float64)
        if embeddings is None:
            embeddings = [probs[b] for b in range(probs.shape[0])]
        if kinds is None:
            kinds = [f"fixed-{b}" for b in range(probs.shape[0])]
        return TeacherEnsemble(kinds=list(kinds), params_list=None, probs=probs,
                               embeddings=list(embeddings), val_accs=[float("nan")] * probs.shape[0])


def train_teacher_ensemble(kinds, graph: TagGraph, train_idx, train_labels, split: Split,
                           cfg: TrainConfig, seed: int) -> TeacherEnsemble:
    """Train one teacher per kind on (train_idx, train_labels) from fresh inits.

    Per-teacher seeds derive from (seed, teacher position), so retraining on
    the same index set reproduces the initial training exactly.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    params_list, probs, embeddings, val_accs = [], [], [], []
    fit_split = Split(train=train_idx, val=split.val, test=split.test)
    for b, kind in enumerate(kinds):
        t_cfg = TrainConfig(hidden_dim=cfg.hidden_dim, learning_rate=cfg.learning_rate,
                            weight_decay=cfg.weight_decay, max_steps=cfg.max_steps,
                            patience=cfg.patience, seed=subseed(seed, STAGE_TEACHER, b))
        params, history = train(kind, graph, fit_split, train_labels, t_cfg)
        params_list.append(params)
        probs.append(forward(kind, params, graph).probs)
        embeddings.append(penultimate_embedding(kind, params, graph))
        val_accs.append(history.best_val_acc)
    return TeacherEnsemble(kinds=list(kinds), params_list=params_list,
                           probs=np.stack(probs), embeddings=embeddings, val_accs=val_accs)


@dataclass
class ExpandedDataset:
    """Gold-labeled nodes plus annotator-labeled selected nodes."""

    gold_idx: np.ndarray
    gold_labels: np.ndarray
    annotated_idx: np.ndarray
    annotated_labels: np.ndarray

    def __post_init__(self) -> None:
        if np.intersect1d(self.gold_idx, self.annotated_idx).size:
            raise ValueError("gold and annotated index sets overlap")

    @property
    def size(self) -> int:
        return self.gold_idx.size + self.annotated_idx.size

    def all_indices(self) -> np.ndarray:
        return np.sort(np.concatenate([self.gold_idx, self.annotated_idx]))

    def all_labels(self) -> np.ndarray:
        """Labels aligned with all_indices()."""
        idx = np.concatenate([self.gold_idx, self.annotated_idx])
        lab = np.concatenate([self.gold_labels, self.annotated_labels])
        order = np.argsort(idx)
        return lab[order]


def expand_dataset(gold_idx, gold_labels, records) -> ExpandedDataset:
    """Build the expanded set from annotation records; failed records are dropped."""
    ok = [(r.node, r.category) for r in records if r.status == "ok"]
    ok.sort()
    ann_idx = np.array([n for n, _ in ok], dtype=np.int64)
    ann_lab = np.array([c for _, c in ok], dtype=np.int64)
    return ExpandedDataset(gold_idx=np.asarray(gold_idx, dtype=np.int64),
                           gold_labels=np.asarray(gold_labels, dtype=np.int64),
                           annotated_idx=ann_idx, annotated_labels=ann_lab)


def export_expanded_csv(path, expanded: ExpandedDataset) -> None:
    """CSV export: node_id, label, provenance in {gold, annotated}."""
    rows = [(int(i), int(l), "gold") for i, l in zip(expanded.gold_idx, expanded.gold_labels)]
    rows += [(int(i), int(l), "annotated") for i, l in zip(expanded.annotated_idx, expanded.annotated_labels)]
    rows.sort()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "label", "provenance"])
        writer.writerows(rows)


def one_hot_to_mask(one_hot: np.ndarray) -> np.ndarray:
    """Validate per-node one-hot teacher rows and return teacher indices."""
    one_hot = np.asarray(one_hot, dtype=np.float64)
    if np.any((one_hot != 0.0) & (one_hot != 1.0)) or np.any(one_hot.sum(axis=1) != 1.0):
        raise ValueError("mask rows must be exactly one-hot")
    return one_hot.argmax(axis=1).astype(np.int64)


def mask_to_one_hot(mask: np.ndarray, b: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.int64)
    if np.any((mask < 0) | (mask >= b)):
        raise ValueError(f"teacher index out of range [0, {b})")
    out = np.zeros((mask.size, b))
    out[np.arange(mask.size), mask] = 1.0
    return out


def assemble_teacher_targets(teachers, mask: np.ndarray) -> np.ndarray:
    """Row i of the result is the probability row of the teacher mask selects.

    `mask` is a per-node teacher index (a one-hot matrix is also accepted);
    index -1 marks out-of-scope nodes and yields a zero row.
    """
    probs = np.asarray(getattr(teachers, "probs", teachers), dtype=np.float64)
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = one_hot_to_mask(mask)
    mask = mask.astype(np.int64)
    b, n, c = probs.shape
    if mask.shape != (n,):
        raise ValueError(f"mask length {mask.shape} does not match {n} nodes")
    if np.any(mask >= b) or np.any(mask < -1):
        raise ValueError(f"teacher index out of range [0, {b})")
    targets = np.zeros((n, c))
    covered = mask >= 0
    targets[covered] = probs[mask[covered], np.flatnonzero(covered)]
    return targets


def kd_loss(student_probs: np.ndarray, targets: np.ndarray, gold_idx, gold_labels,
            weights: KdWeights, scope) -> tuple[float, np.ndarray]:
    """Three-term loss and its exact gradient w.r.t. the student logits.

    L = alpha * L_DL + beta * L_CE + gamma * L_E with
    L_DL = -(1/N') sum_scope targets . log(probs),
    L_CE = -(1/Q) sum_gold log(probs[gold, y]),
    L_E  =  (1/N') sum_scope H(probs), Shannon entropy in nats.
    """
    probs = np.asarray(student_probs, dtype=np.float64)
    scope = np.asarray(scope, dtype=np.int64)
    gold_idx = np.asarray(gold_idx, dtype=np.int64)
    gold_labels = np.asarray(gold_labels, dtype=np.int64)
    if scope.size == 0:
        raise ValueError("empty distillation scope")
    if weights.beta > 0 and gold_idx.size == 0:
        raise ValueError("beta > 0 requires a nonempty gold-labeled set")

    n_prime = scope.size
    p = probs[scope]
    z = np.asarray(targets, dtype=np.float64)[scope]
    log_p = np.log(p)
    l_dl = float(-np.sum(z * log_p) / n_prime)
    row_h = -np.sum(p * log_p, axis=1)
    l_e = float(np.mean(row_h))
    if gold_idx.size:
        l_ce = float(-np.mean(np.log(probs[gold_idx, gold_labels])))
    else:
        l_ce = 0.0
    loss = weights.alpha * l_dl + weights.beta * l_ce + weights.gamma * l_e

    d_logits = np.zeros_like(probs)
    # alpha term: softmax cross-entropy toward the target row.
    d_scope = (weights.alpha / n_prime) * (p * z.sum(axis=1, keepdims=True) - z)
    # gamma term: d H/d logit_c = -p_c (log p_c + H).
    d_scope += (weights.gamma / n_prime) * (-p * (log_p + row_h[:, None]))
    d_logits[scope] += d_scope
    if gold_idx.size and weights.beta > 0:
        rows = probs[gold_idx].copy()
        rows[np.arange(gold_idx.size), gold_labels] -= 1.0
        d_logits[gold_idx] += (weights.beta / gold_idx.size) * rows
    return loss, d_logits


def distillation_terms(student_probs: np.ndarray, targets: np.ndarray, scope) -> tuple[float, float]:
    """(L_DL, L_E) over a scope, without gradients; used by reward evaluation."""
    scope = np.asarray(scope, dtype=np.int64)
    p = np.asarray(student_probs, dtype=np.float64)[scope]
    z = np.asarray(targets, dtype=np.float64)[scope]
    log_p = np.log(p)
    return float(-np.sum(z * log_p) / scope.size), float(np.mean(-np.sum(p * log_p, axis=1)))


def gold_cross_entropy(student_probs: np.ndarray, gold_idx, gold_labels) -> float:
    gold_idx = np.asarray(gold_idx, dtype=np.int64)
    return float(-np.mean(np.log(student_probs[gold_idx, np.asarray(gold_labels, dtype=np.int64)])))


def retrain_teachers(teachers: TeacherEnsemble, graph: TagGraph, expanded: ExpandedDataset,
                     cfg: TrainConfig, split: Split, seed: int) -> TeacherEnsemble:
    """Retrain every teacher from a fresh init on the expanded hard labels."""
    if expanded.size == 0:
        raise ValueError("expanded dataset is empty")
    return train_teacher_ensemble(teachers.kinds, graph, expanded.all_indices(),
                                  expanded.all_labels(), split, cfg, seed)


def train_student(student_kind: str, graph: TagGraph, targets: np.ndarray,
                  expanded: ExpandedDataset, weights: KdWeights, epochs: int, *,
                  scope=None, params: ModelParams | None = None,
                  optimizer_state: AdamState | None = None, cfg: TrainConfig | None = None,
                  val_split: Split | None = None) -> ModelParams:
    """Run `epochs` full-graph Adam steps on the three-term loss.

    `scope` selects the nodes the soft and entropy terms average over
    (default: every node). Passing `params` and `optimizer_state` continues
    an existing fit in place, which is how the per-assignment 5-step updates
    chain inside the selection loop. With `val_split`, the returned params
    are the snapshot at the best validation accuracy instead of the last step.
    """
    cfg = cfg or TrainConfig()
    weights.validate()
    if params is None:
        params = init_params(student_kind, graph.feature_dim, cfg.hidden_dim, graph.c,
                             subseed(cfg.seed, STAGE_STUDENT))
    if scope is None:
        scope = np.arange(graph.n)
    if optimizer_state is None:
        optimizer_state = AdamState.for_params(params)

    best: ModelParams | None = None
    best_acc = -1.0
    best_step = 0
    val_labels = graph.labels[val_split.val] if val_split is not None else None
    for step in range(1, epochs + 1):
        result = forward(student_kind, params, graph)
        loss, d_logits = kd_loss(result.probs, targets, expanded.gold_idx,
                                 expanded.gold_labels, weights, scope)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"student loss became non-finite at step {step}")
        grads = backward(student_kind, params, graph, result.cache, d_logits)
        adam_step(params, grads, optimizer_state, cfg.learning_rate, cfg.weight_decay)
        if val_split is not None and len(val_split.val):
            val_acc = accuracy(student_kind, params, graph, val_split.val, val_labels)
            if val_acc > best_acc:
                best_acc, best_step, best = val_acc, step, params.copy()
            elif step - best_step >= cfg.patience:
                break
    if val_split is not None and best is not None:
        return best
    return params


def train_gated_student(student_kind: str, graph: TagGraph, teachers: TeacherEnsemble,
                        expanded: ExpandedDataset, weights: KdWeights, cfg: TrainConfig, *,
                        scope=None, val_split: Split | None = None) -> tuple[ModelParams, np.ndarray]:
    """Joint fit of the student and a per-node softmax gate over teachers.

    Gate logits G (N x B) mix teacher rows into soft targets through a row
    softmax; gradients reach G through the soft-target term, so the teacher
    weighting is learned end to end alongside the student. Returns the fitted
    student and the softmax gate weights (rows sum to 1).
    """
    cfg.validate()
    weights.validate()
    b, n, _ = teachers.probs.shape
    params = init_params(student_kind, graph.feature_dim, cfg.hidden_dim, graph.c,
                         subseed(cfg.seed, STAGE_STUDENT))
    gate = np.zeros((n, b))
    state = AdamState.for_params(params)
    gate_state = {"m": np.zeros_like(gate), "v": np.zeros_like(gate), "t": 0}
    if scope is None:
        scope = np.arange(n)
    scope = np.asarray(scope, dtype=np.int64)

    best: tuple[ModelParams, np.ndarray] | None = None
    best_acc = -1.0
    best_step = 0
    val_labels = graph.labels[val_split.val] if val_split is not None else None
    for step in range(1, cfg.max_steps + 1):
        g_exp = np.exp(gate - gate.max(axis=1, keepdims=True))
        g_soft = g_exp / g_exp.sum(axis=1, keepdims=True)           # (N, B)
        targets = np.einsum("nb,bnc->nc", g_soft, teachers.probs)

        result = forward(student_kind, params, graph)
        loss, d_logits = kd_loss(result.probs, targets, expanded.gold_idx,
                                 expanded.gold_labels, weights, scope)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"gated student loss became non-finite at step {step}")
        grads = backward(student_kind, params, graph, result.cache, d_logits)
        adam_step(params, grads, state, cfg.learning_rate, cfg.weight_decay)

        # Gate gradient: dL/d targets = -(alpha/N') log p on scope rows.
        d_targets = np.zeros_like(targets)
        d_targets[scope] = -(weights.alpha / scope.size) * np.log(result.probs[scope])
        d_gsoft = np.einsum("nc,bnc->nb", d_targets, teachers.probs)
        d_gate = g_soft * (d_gsoft - np.sum(g_soft * d_gsoft, axis=1, keepdims=True))
        gate_state["t"] += 1
        t = gate_state["t"]
        gate_state["m"] = 0.9 * gate_state["m"] + 0.1 * d_gate
        gate_state["v"] = 0.999 * gate_state["v"] + 0.001 * d_gate * d_gate
        mh = gate_state["m"] / (1 - 0.9 ** t)
        vh = gate_state["v"] / (1 - 0.999 ** t)
        gate -= cfg.learning_rate * mh / (np.sqrt(vh) + 1e-8)

        if val_split is not None and len(val_split.val):
            val_acc = accuracy(student_kind, params, graph, val_split.val, val_labels)
            if val_acc > best_acc:
                best_acc, best_step, best = val_acc, step, (params.copy(), gate.copy())
            elif step - best_step >= cfg.patience:
                break
    if val_split is not None and best is not None:
        params, gate = best
    g_exp = np.exp(gate - gate.max(axis=1, keepdims=True))
    return params, g_exp / g_exp.sum(axis=1, keepdims=True)
