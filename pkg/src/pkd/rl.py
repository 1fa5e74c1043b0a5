"""Per-node teacher assignment learned with clipped policy-gradient updates.

Each node is a single-step episode: the policy reads an encoded node state,
picks one teacher, the student takes a few distillation steps under the new
assignment, and the resulting reward updates policy and value heads once per
pass over the expanded set.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .annotate import split_title_abstract
from .distill import (ExpandedDataset, KdWeights, TeacherEnsemble, assemble_teacher_targets,
                      distillation_terms, gold_cross_entropy, train_student)
from .graph import Split, TagGraph, subseed
from .models import ForwardResult, ModelParams, forward, backward, init_params
from .selection import dns_mean_distance_matrix
from .training import AdamState, TrainConfig, accuracy

REWARD_MODES = ("as_eq4", "negated_losses")
STAGE_POLICY = 31
STAGE_VALUE = 37
STAGE_SHUFFLE = 41
STAGE_ACTION = 43
STAGE_NGS_STUDENT = 23

KIND_DISPLAY = {"gcn": "GCN", "gat1": "GAT1", "appnp": "APPNP", "h2gcn": "H2GCN", "mlp": "MLP"}


@dataclass
class RlConfig:
    """Knobs of the assignment loop (reward mixing, clipping, learning rates)."""

    eta: float = 0.3
    c1: float = 0.5
    c2: float = 0.01
    eps_clip: float = 0.2
    lr_policy: float = 1e-3
    lr_value: float = 1e-3
    epochs: int = 200
    reward_sign_mode: str = "negated_losses"
    policy_hidden: int = 64
    student_epochs: int = 5

    def validate(self) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if not 0.0 < self.eps_clip < 1.0:
            raise ValueError(f"eps_clip must lie in (0, 1), got {self.eps_clip}")
        if self.reward_sign_mode not in REWARD_MODES:
            raise ValueError(f"unknown reward_sign_mode {self.reward_sign_mode!r}")
        if min(self.lr_policy, self.lr_value) <= 0 or self.epochs < 0:
            raise ValueError("learning rates must be positive and epochs nonnegative")
        if self.policy_hidden < 1 or self.student_epochs < 1:
            raise ValueError("policy_hidden and student_epochs must be at least 1")


@dataclass
class StateContext:
    """Precomputed per-node blocks the state encoder concatenates."""

    features: np.ndarray      # (N, F)
    degree_norm: np.ndarray   # (N,)
    agreement: np.ndarray     # (N,)
    dns_mean: np.ndarray      # (N, B)
    probs_flat: np.ndarray    # (N, B*C)

    @property
    def dim(self) -> int:
        return (self.features.shape[1] + 2 + self.dns_mean.shape[1]
                + self.probs_flat.shape[1])


def build_state_context(graph: TagGraph, teachers: TeacherEnsemble,
                        expanded: ExpandedDataset, k_nn: int = 4) -> StateContext:
    """Assemble the frozen per-node attribute blocks for state encoding.

    The structure summary holds the degree (scaled by the maximum degree),
    the modal-label share among a node's expanded-labeled neighbors (0 when
    it has none), and the mean distance to each teacher's nearest embedding
    neighbors.
    """
    degrees = graph.degrees().astype(np.float64)
    max_deg = degrees.max() if degrees.size and degrees.max() > 0 else 1.0
    label_of = {int(i): int(l) for i, l in zip(expanded.all_indices(), expanded.all_labels())}
    agreement = np.zeros(graph.n)
    for node, nbrs in enumerate(graph.neighbor_lists()):
        labels = [label_of[j] for j in nbrs if j in label_of]
        if labels:
            agreement[node] = np.bincount(labels).max() / len(labels)
    b, n, c = teachers.probs.shape
    return StateContext(features=graph.features,
                        degree_norm=degrees / max_deg,
                        agreement=agreement,
                        dns_mean=dns_mean_distance_matrix(teachers.embeddings, k_nn),
                        probs_flat=teachers.probs.transpose(1, 0, 2).reshape(n, b * c))


def encode_states(ctx: StateContext, nodes) -> np.ndarray:
    """Stack the state vectors of `nodes` into a (len(nodes), dim) matrix."""
    nodes = np.asarray(nodes, dtype=np.int64)
    return np.concatenate([ctx.features[nodes],
                           ctx.degree_norm[nodes, None],
                           ctx.agreement[nodes, None],
                           ctx.dns_mean[nodes],
                           ctx.probs_flat[nodes]], axis=1)


def encode_state(node: int, graph: TagGraph, teachers: TeacherEnsemble,
                 expanded: ExpandedDataset, k_nn: int = 4) -> np.ndarray:
    """One node's state vector: [features | degree | agreement | distances | teacher rows]."""
    ctx = build_state_context(graph, teachers, expanded, k_nn)
    return encode_states(ctx, [node])[0]


def render_state_prompt(node: int, graph: TagGraph, teachers: TeacherEnsemble,
                        expanded: ExpandedDataset, neighbors=None) -> str:
    """Textual variant of the state for an external policy service.

    Lists the teacher names, then the node's content, its important
    neighbors' contents, and one logits line per teacher. Not consumed by
    the built-in numeric policy; documented as the integration seam.
    """
    names = [KIND_DISPLAY.get(k, k.upper()) for k in teachers.kinds]
    lines = [
        f"There are {len(names)} names of teacher networks: [{', '.join(names)}].",
        "We need to perform knowledge distillation for each node in this graph.",
        "You will serve as an assistant to help me to assign the best teacher network",
        "for the target node based on the following information.",
        "Respond in JSON with keys \"Reasoning\" and \"Teacher network\"; the teacher",
        f"network must belong to these teachers: [{', '.join(names)}].",
        "",
    ]
    title, abstract = split_title_abstract(graph.texts[node])
    lines.append(f"Semantic attributes: It is the content description of this target paper: "
                 f"{title}. {abstract}")
    if neighbors is None:
        neighbors = graph.neighbor_lists()[node]
    lines.append("Structure attributes: It has following important neighbors, which are "
                 "closely related to the target paper. Their content descriptions are:")
    for j in neighbors:
        n_title, n_abstract = split_title_abstract(graph.texts[int(j)])
        lines.append(f"- {n_title}. {n_abstract}")
    lines.append("Prediction attributes:")
    for name, rows in zip(names, teachers.probs):
        vec = ", ".join(f"{v:.4f}" for v in rows[node])
        lines.append(f"The {name}'s logits output of this target paper is [{vec}],")
    return "\n".join(lines)


@dataclass
class PolicyOutput:
    """Distribution over teachers plus the sampled (or argmax) choice."""

    probs: np.ndarray
    action: int
    logp: float


def policy_distribution(policy_params: ModelParams, states: np.ndarray) -> ForwardResult:
    return forward("mlp", policy_params, None, inputs=np.atleast_2d(states))


def policy_forward(policy_params: ModelParams, state: np.ndarray,
                   rng: np.random.Generator | None = None) -> PolicyOutput:
    """Evaluate the policy on one state; samples with `rng`, argmax without."""
    probs = policy_distribution(policy_params, state).probs[0]
    if rng is None:
        action = int(np.argmax(probs))
    else:
        action = int(rng.choice(probs.size, p=probs / probs.sum()))
    return PolicyOutput(probs=probs, action=action, logp=float(np.log(probs[action])))


def value_forward(value_params: ModelParams, states: np.ndarray) -> np.ndarray:
    """Scalar value estimates, one per state row."""
    result = forward("mlp", value_params, None, inputs=np.atleast_2d(states))
    return result.logits[:, 0]


@dataclass
class RewardParts:
    reward: float
    acc: float
    l_dl: float
    l_ce: float


def compute_reward(student_kind: str, student_params: ModelParams, graph: TagGraph,
                   expanded: ExpandedDataset, targets: np.ndarray, eta: float,
                   mode: str = "negated_losses") -> RewardParts:
    """Student-quality reward under the frozen student snapshot.

    The soft term averages over the annotated nodes (zero when there are
    none), the hard term over the gold nodes, and accuracy over the whole
    expanded set against its labels. Mode as_eq4 adds the soft loss;
    negated_losses subtracts it.
    """
    if expanded.size == 0:
        raise ValueError("empty expanded set")
    if mode not in REWARD_MODES:
        raise ValueError(f"unknown reward_sign_mode {mode!r}")
    result = forward(student_kind, student_params, graph)
    if expanded.annotated_idx.size:
        l_dl, _ = distillation_terms(result.probs, targets, expanded.annotated_idx)
    else:
        l_dl = 0.0
    l_ce = gold_cross_entropy(result.probs, expanded.gold_idx, expanded.gold_labels)
    all_idx = expanded.all_indices()
    acc = float(np.mean(result.probs[all_idx].argmax(axis=1) == expanded.all_labels()))
    signed = l_dl if mode == "as_eq4" else -l_dl
    reward = eta * (signed - l_ce) + (1.0 - eta) * acc
    return RewardParts(reward=reward, acc=acc, l_dl=l_dl, l_ce=l_ce)


def advantage(reward, value) -> np.ndarray:
    """Single-step advantage R - V(state)."""
    return np.asarray(reward, dtype=np.float64) - np.asarray(value, dtype=np.float64)


def standardize_advantages(adv: np.ndarray) -> np.ndarray:
    """Shift/scale to mean 0, std 1 for batches of at least 8; smaller pass through."""
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size >= 8:
        return (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv


def ppo_policy_loss(new_logp, old_logp, adv, eps_clip: float) -> float:
    """Clipped surrogate L_A = -mean(min(r*A, clip(r)*A)) with r the prob ratio."""
    ratio = np.exp(np.asarray(new_logp, dtype=np.float64) - np.asarray(old_logp, dtype=np.float64))
    if not np.all(np.isfinite(ratio)):
        raise ValueError("non-finite probability ratio")
    adv = np.asarray(adv, dtype=np.float64)
    clipped = np.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip)
    return float(-np.mean(np.minimum(ratio * adv, clipped * adv)))


def ppo_value_loss(values, targets) -> float:
    values = np.asarray(values, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    return float(np.mean((values - targets) ** 2))


def policy_entropy(probs: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of a batch of action distributions.

    Zero entries contribute zero (the p*log p limit), so exact one-hot rows
    are handled.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(np.mean(-np.sum(plogp, axis=1)))


@dataclass
class PpoTransition:
    """One node-level decision: state, chosen teacher, observed reward."""

    node: int
    state: np.ndarray
    action: int
    reward: float
    value: float
    old_logp: float
    prob: float
    entropy: float
    acc: float = 0.0
    l_dl: float = 0.0
    l_ce: float = 0.0

    def one_hot(self, b: int) -> np.ndarray:
        m = np.zeros(b)
        m[self.action] = 1.0
        return m


@dataclass
class PpoStats:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    objective: float


def ppo_update(policy_params: ModelParams, value_params: ModelParams,
               transitions: list[PpoTransition], cfg: RlConfig) -> PpoStats:
    """One plain gradient step each for policy and value heads.

    The policy step descends L_A - c2*H (the value term of the joint
    objective does not touch policy parameters); the value step descends the
    mean squared error toward the observed rewards. Per-sample clipped terms
    pass gradient only while the unclipped branch attains the minimum, so a
    sample with r outside the clip window and a favoring advantage
    contributes exactly zero.
    """
    if not transitions:
        raise ValueError("empty transition batch")
    cfg.validate()
    n = len(transitions)
    states = np.stack([t.state for t in transitions])
    actions = np.array([t.action for t in transitions], dtype=np.int64)
    rewards = np.array([t.reward for t in transitions])
    old_logp = np.array([t.old_logp for t in transitions])
    adv = standardize_advantages(advantage(rewards, np.array([t.value for t in transitions])))

    pol = forward("mlp", policy_params, None, inputs=states)
    probs = pol.probs
    log_probs = np.log(probs)
    new_logp = log_probs[np.arange(n), actions]
    ratio = np.exp(new_logp - old_logp)
    if not np.all(np.isfinite(ratio)):
        raise ValueError("non-finite probability ratio in update batch")
    clipped = np.clip(ratio, 1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip)
    unclipped_term = ratio * adv
    clipped_term = clipped * adv
    policy_loss = float(-np.mean(np.minimum(unclipped_term, clipped_term)))
    active = unclipped_term <= clipped_term

    d_logp = np.where(active, -adv * ratio, 0.0) / n
    d_logits = -d_logp[:, None] * probs
    d_logits[np.arange(n), actions] += d_logp
    row_h = -np.sum(probs * log_probs, axis=1)
    entropy = float(np.mean(row_h))
    if cfg.c2 != 0.0:
        d_logits += (cfg.c2 / n) * probs * (log_probs + row_h[:, None])
    grads = backward("mlp", policy_params, None, pol.cache, d_logits)
    for name, g in grads.items():
        policy_params.tensors[name] -= cfg.lr_policy * g

    val = forward("mlp", value_params, None, inputs=states)
    values = val.logits[:, 0]
    value_loss = float(np.mean((values - rewards) ** 2))
    d_val = (2.0 / n) * (values - rewards)
    v_grads = backward("mlp", value_params, None, val.cache, d_val[:, None])
    for name, g in v_grads.items():
        value_params.tensors[name] -= cfg.lr_value * g

    return PpoStats(policy_loss=policy_loss, value_loss=value_loss, entropy=entropy,
                    clip_fraction=float(np.mean(~active)),
                    objective=policy_loss + cfg.c1 * value_loss - cfg.c2 * entropy)


@dataclass
class NgsResult:
    """Final assignment, trained heads, trained student, and per-epoch stats."""

    mask: np.ndarray               # (N,) teacher index per node
    assignment_probs: np.ndarray   # (N,) policy probability of the chosen teacher
    policy_params: ModelParams
    value_params: ModelParams
    student_params: ModelParams
    epoch_stats: list[dict] = field(default_factory=list)


def run_ngs(student_kind: str, graph: TagGraph, teachers: TeacherEnsemble,
            expanded: ExpandedDataset, split: Split, rl_cfg: RlConfig,
            kd_weights: KdWeights, student_cfg: TrainConfig, seed: int,
            k_nn: int = 4, log_path=None) -> NgsResult:
    """Assignment loop: sample teachers per node, nudge the student, update the policy.

    Every epoch shuffles the expanded nodes; each visit samples a teacher for
    that node, runs `student_epochs` distillation steps scoped to the
    expanded set with the updated targets, and scores the frozen student for
    the reward. One policy/value update closes the epoch. Afterwards the
    argmax assignment over all nodes drives a full-length distillation run
    that continues the loop student, tracking the best validation snapshot.

    With a single teacher the loop is skipped entirely and the result equals
    a plain full-length student fit against that teacher.
    """
    rl_cfg.validate()
    kd_weights.validate()
    b = teachers.size
    ctx = build_state_context(graph, teachers, expanded, k_nn)
    policy_params = init_params("mlp", ctx.dim, rl_cfg.policy_hidden, b,
                                subseed(seed, STAGE_POLICY))
    value_params = init_params("mlp", ctx.dim, rl_cfg.policy_hidden, 1,
                               subseed(seed, STAGE_VALUE))

    if b == 1:
        mask = np.zeros(graph.n, dtype=np.int64)
        targets = assemble_teacher_targets(teachers, mask)
        student = train_student(student_kind, graph, targets, expanded, kd_weights,
                                student_cfg.max_steps, cfg=TrainConfig(
                                    hidden_dim=student_cfg.hidden_dim,
                                    learning_rate=student_cfg.learning_rate,
                                    weight_decay=student_cfg.weight_decay,
                                    max_steps=student_cfg.max_steps,
                                    patience=student_cfg.patience,
                                    seed=subseed(seed, STAGE_NGS_STUDENT)),
                                val_split=split)
        return NgsResult(mask=mask, assignment_probs=np.ones(graph.n),
                         policy_params=policy_params, value_params=value_params,
                         student_params=student)

    student_seed_cfg = TrainConfig(hidden_dim=student_cfg.hidden_dim,
                                   learning_rate=student_cfg.learning_rate,
                                   weight_decay=student_cfg.weight_decay,
                                   max_steps=student_cfg.max_steps,
                                   patience=student_cfg.patience,
                                   seed=subseed(seed, STAGE_NGS_STUDENT))
    student = init_params(student_kind, graph.feature_dim, student_cfg.hidden_dim,
                          graph.c, subseed(student_seed_cfg.seed, 23))
    adam = AdamState.for_params(student)

    all_nodes = np.arange(graph.n)
    states_all = encode_states(ctx, all_nodes)
    mask = policy_distribution(policy_params, states_all).probs.argmax(axis=1).astype(np.int64)
    targets = assemble_teacher_targets(teachers, mask)

    rng_shuffle = np.random.default_rng(subseed(seed, STAGE_SHUFFLE))
    rng_action = np.random.default_rng(subseed(seed, STAGE_ACTION))
    expanded_idx = expanded.all_indices()
    epoch_stats: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, rl_cfg.epochs + 1):
            order = rng_shuffle.permutation(expanded_idx)
            transitions: list[PpoTransition] = []
            for node in order:
                node = int(node)
                state = states_all[node]
                out = policy_forward(policy_params, state, rng=rng_action)
                v = float(value_forward(value_params, state)[0])
                mask[node] = out.action
                targets[node] = teachers.probs[out.action, node]
                train_student(student_kind, graph, targets, expanded, kd_weights,
                              rl_cfg.student_epochs, scope=expanded_idx, params=student,
                              optimizer_state=adam, cfg=student_seed_cfg)
                parts = compute_reward(student_kind, student, graph, expanded, targets,
                                       rl_cfg.eta, rl_cfg.reward_sign_mode)
                transitions.append(PpoTransition(
                    node=node, state=state, action=out.action, reward=parts.reward,
                    value=v, old_logp=out.logp, prob=float(out.probs[out.action]),
                    entropy=policy_entropy(out.probs), acc=parts.acc,
                    l_dl=parts.l_dl, l_ce=parts.l_ce))
            ppo_update(policy_params, value_params, transitions, rl_cfg)
            row = {"epoch": epoch,
                   "mean_reward": float(np.mean([t.reward for t in transitions])),
                   "acc": float(np.mean([t.acc for t in transitions])),
                   "l_dl": float(np.mean([t.l_dl for t in transitions])),
                   "l_ce": float(np.mean([t.l_ce for t in transitions])),
                   "policy_entropy": float(np.mean([t.entropy for t in transitions]))}
            epoch_stats.append(row)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
    finally:
        if log_fh:
            log_fh.close()

    final_probs = policy_distribution(policy_params, states_all).probs
    mask = final_probs.argmax(axis=1).astype(np.int64)
    targets = assemble_teacher_targets(teachers, mask)
    student = train_student(student_kind, graph, targets, expanded, kd_weights,
                            student_cfg.max_steps, params=student, optimizer_state=adam,
                            cfg=student_seed_cfg, val_split=split)
    return NgsResult(mask=mask, assignment_probs=final_probs[all_nodes, mask],
                     policy_params=policy_params, value_params=value_params,
                     student_params=student, epoch_stats=epoch_stats)


def export_assignment_csv(path, mask: np.ndarray, probs: np.ndarray) -> None:
    """CSV export: node_id, teacher_index, policy_prob."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "teacher_index", "policy_prob"])
        for i, (m, p) in enumerate(zip(mask, probs)):
            writer.writerow([i, int(m), repr(float(p))])


def sanity_ensemble(graph: TagGraph) -> TeacherEnsemble:
    """Two synthetic teachers: true one-hot rows versus uniform rows.

    Assigning the first teacher strictly improves both the soft loss and the
    accuracy term of the reward, so a working policy should converge on it.
    """
    onehot = np.zeros((graph.n, graph.c))
    onehot[np.arange(graph.n), graph.labels] = 1.0
    uniform = np.full((graph.n, graph.c), 1.0 / graph.c)
    return TeacherEnsemble.from_probabilities(np.stack([onehot, uniform]),
                                              kinds=["oracle", "uniform"])
