"""Adam optimization and the supervised full-graph training loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Split, TagGraph
from .models import ForwardResult, ModelParams, TrainingDiverged, backward, forward, init_params

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Training knobs shared by teacher, student, and baseline fits."""

    hidden_dim: int = 128
    learning_rate: float = 1e-2
    weight_decay: float = 5e-4
    max_steps: int = 600
    patience: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.hidden_dim < 1 or self.learning_rate <= 0 or self.max_steps < 0:
            raise ValueError(f"invalid training config: hidden={self.hidden_dim}, "
                             f"lr={self.learning_rate}, max_steps={self.max_steps}")


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter tensor."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @staticmethod
    def for_params(params: ModelParams) -> "AdamState":
        return AdamState(step=0,
                         m={k: np.zeros_like(t) for k, t in params.tensors.items()},
                         v={k: np.zeros_like(t) for k, t in params.tensors.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float) -> None:
    """One in-place Adam update; weight decay folds into the gradient (L2 style)."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - ADAM_BETA1 ** t
    bias2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.tensors.items():
        g = grads[name] + weight_decay * p
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        p -= lr * (state.m[name] / bias1) / (np.sqrt(state.v[name] / bias2) + ADAM_EPS)


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    val_accs: list[float] = field(default_factory=list)
    best_step: int = 0
    best_val_acc: float = float("nan")


def cross_entropy_grad(result: ForwardResult, idx: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE over the index set and its gradient on the full logit matrix."""
    probs = result.probs
    k = len(idx)
    loss = float(-np.mean(np.log(probs[idx, labels])))
    d_logits = np.zeros_like(probs)
    rows = probs[idx].copy()
    rows[np.arange(k), labels] -= 1.0
    d_logits[idx] = rows / k
    return loss, d_logits


def accuracy(kind: str, params: ModelParams, graph: TagGraph, idx: np.ndarray,
             labels: np.ndarray) -> float:
    if len(idx) == 0:
        return float("nan")
    preds = forward(kind, params, graph).probs[idx].argmax(axis=1)
    return float(np.mean(preds == labels))


def train(kind: str, graph: TagGraph, split: Split, labels_for_train: np.ndarray,
          cfg: TrainConfig) -> tuple[ModelParams, TrainHistory]:
    """Full-graph Adam training on cross-entropy over the train indices.

    Validation accuracy (true labels) is measured after every step; the
    parameters at the best validation step are returned, and training stops
    early after `patience` steps without improvement. Deterministic per seed.
    """
    cfg.validate()
    if len(labels_for_train) != len(split.train):
        raise ValueError(f"{len(labels_for_train)} labels for {len(split.train)} train nodes")
    params = init_params(kind, graph.feature_dim, cfg.hidden_dim, graph.c, cfg.seed)
    if cfg.max_steps == 0:
        return params, TrainHistory()

    state = AdamState.for_params(params)
    history = TrainHistory()
    val_labels = graph.labels[split.val]
    best = params.copy()
    best_acc = -1.0
    best_step = 0
    for step in range(1, cfg.max_steps + 1):
        result = forward(kind, params, graph)
        loss, d_logits = cross_entropy_grad(result, split.train, labels_for_train)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"{kind} loss became non-finite at step {step}")
        grads = backward(kind, params, graph, result.cache, d_logits)
        adam_step(params, grads, state, cfg.learning_rate, cfg.weight_decay)

        val_acc = accuracy(kind, params, graph, split.val, val_labels)
        history.losses.append(loss)
        history.val_accs.append(val_acc)
        if len(split.val) and val_acc > best_acc:
            best_acc = val_acc
            best_step = step
            best = params.copy()
        if len(split.val) and step - best_step >= cfg.patience:
            break

    if len(split.val) == 0:          # nothing to select on: keep the final point
        best, best_acc, best_step = params, float("nan"), len(history.losses)
    history.best_step = best_step
    history.best_val_acc = best_acc
    return best, history
