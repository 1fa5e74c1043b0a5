"""End-to-end run orchestration: staged artifacts, baselines, sweeps.

Every stage writes its artifact into the per-seed output directory, so any
later stage can be rerun from files alone. The one-shot path chains the
stages in memory and still writes everything.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotate import ExternalHttp, GroundTruthOracle, MajorityTeacherVote, render_classification_prompt
from .config import PipelineConfig
from .distill import (ExpandedDataset, TeacherEnsemble, assemble_teacher_targets, expand_dataset,
                      export_expanded_csv, mask_to_one_hot, retrain_teachers, train_gated_student,
                      train_student, train_teacher_ensemble)
from .graph import Split, TagGraph, generate_sbm, load_graph, save_graph, sbm_class_names, split_nodes, subseed
from .gta import generate_all, write_gta_jsonl
from .models import forward, load_params, penultimate_embedding, save_params
from .rl import NgsResult, export_assignment_csv, run_ngs
from .selection import PreferenceRank, Selection, dns_neighbors, export_rank_csv, preference_rank, select_nodes
from .training import TrainConfig, accuracy

BASELINE_KINDS = ("random_node_selection", "entropy_node_selection", "random_teacher",
                  "voting_teacher", "fixed_teacher", "end_to_end_gate")
STAGE_RANDOM_SELECT = 59
STAGE_RANDOM_TEACHER = 61
STAGE_STUDENT_SEED = 23


class StageError(RuntimeError):
    """Raised when a pipeline stage fails; carries the stage tag."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class SeedPaths:
    """File layout of one seed's artifacts."""

    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)

    @staticmethod
    def for_seed(out_dir, seed: int) -> "SeedPaths":
        return SeedPaths(Path(out_dir) / f"seed_{seed}")

    def ensure(self) -> "SeedPaths":
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    @property
    def graph(self) -> Path:
        return self.root / "graph.json"

    @property
    def split(self) -> Path:
        return self.root / "split.json"

    def teacher(self, b: int, kind: str, retrained: bool = False) -> Path:
        tag = "teacher_retrained" if retrained else "teacher"
        return self.root / f"{tag}_{b}_{kind}.json"

    @property
    def rank(self) -> Path:
        return self.root / "rank.csv"

    @property
    def annotations(self) -> Path:
        return self.root / "annotations.jsonl"

    @property
    def expanded(self) -> Path:
        return self.root / "expanded.csv"

    @property
    def assignment(self) -> Path:
        return self.root / "assignment.csv"

    @property
    def ngs_log(self) -> Path:
        return self.root / "ngs_log.jsonl"

    @property
    def student(self) -> Path:
        return self.root / "student.json"

    @property
    def evaluation(self) -> Path:
        return self.root / "eval.json"


def write_split(path, split: Split) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"train": [int(i) for i in split.train],
                   "val": [int(i) for i in split.val],
                   "test": [int(i) for i in split.test]}, fh)


def read_split(path) -> Split:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return Split(train=np.array(data["train"], dtype=np.int64),
                 val=np.array(data["val"], dtype=np.int64),
                 test=np.array(data["test"], dtype=np.int64))


def read_expanded_csv(path) -> ExpandedDataset:
    gold, annotated = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            entry = (int(row["node_id"]), int(row["label"]))
            (gold if row["provenance"] == "gold" else annotated).append(entry)
    return ExpandedDataset(
        gold_idx=np.array([n for n, _ in gold], dtype=np.int64),
        gold_labels=np.array([l for _, l in gold], dtype=np.int64),
        annotated_idx=np.array([n for n, _ in annotated], dtype=np.int64),
        annotated_labels=np.array([l for _, l in annotated], dtype=np.int64))


def read_assignment_csv(path) -> tuple[np.ndarray, np.ndarray]:
    nodes, masks, probs = [], [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            nodes.append(int(row["node_id"]))
            masks.append(int(row["teacher_index"]))
            probs.append(float(row["policy_prob"]))
    order = np.argsort(nodes)
    return np.array(masks, dtype=np.int64)[order], np.array(probs)[order]


def save_teachers(paths: SeedPaths, teachers: TeacherEnsemble, retrained: bool = False) -> None:
    for b, (kind, params) in enumerate(zip(teachers.kinds, teachers.params_list)):
        save_params(params, paths.teacher(b, kind, retrained))


def load_teachers(cfg: PipelineConfig, graph: TagGraph, paths: SeedPaths,
                  retrained: bool = False) -> TeacherEnsemble:
    """Rebuild an ensemble from checkpoints, recomputing probs and embeddings."""
    params_list, probs, embeddings = [], [], []
    for b, kind in enumerate(cfg.teacher_kinds):
        params = load_params(paths.teacher(b, kind, retrained))
        params_list.append(params)
        probs.append(forward(kind, params, graph).probs)
        embeddings.append(penultimate_embedding(kind, params, graph))
    return TeacherEnsemble(kinds=list(cfg.teacher_kinds), params_list=params_list,
                           probs=np.stack(probs), embeddings=embeddings,
                           val_accs=[float("nan")] * len(params_list))


def provide_graph(cfg: PipelineConfig) -> TagGraph:
    """Load the configured graph file, or generate the configured SBM."""
    if cfg.graph_path:
        return load_graph(cfg.graph_path)
    return generate_sbm(cfg.sbm)


def annotation_budget(cfg: PipelineConfig, graph: TagGraph, split: Split) -> int:
    """W = floor(ratio * N) - |gold|, floored at 0 and capped by the pool size."""
    want = int(np.floor(cfg.expansion_ratio * graph.n)) - len(split.train)
    return int(min(max(0, want), len(split.pool(graph.n))))


def rank_and_select(cfg: PipelineConfig, graph: TagGraph, teachers: TeacherEnsemble,
                    split: Split, seed: int, baseline: str | None = None
                    ) -> tuple[PreferenceRank, Selection]:
    """Preference ranking plus the budgeted pick, or a baseline's substitute pick."""
    pool = split.pool(graph.n)
    rank = preference_rank(teachers, pool)
    budget = annotation_budget(cfg, graph, split)
    if baseline == "random_node_selection":
        rng = np.random.default_rng(subseed(seed, STAGE_RANDOM_SELECT))
        nodes = np.sort(rng.choice(pool, size=budget, replace=False))
        selection = Selection(nodes=nodes, threshold=None)
    elif baseline == "entropy_node_selection":
        mean = teachers.probs.mean(axis=0)[pool]
        ent = -np.sum(mean * np.log(np.maximum(mean, 1e-12)), axis=1)
        order = np.lexsort((pool, -ent))
        selection = Selection(nodes=pool[order[:budget]], threshold=None)
    else:
        selection = select_nodes(rank, budget)
    return rank, selection


def build_annotator(cfg: PipelineConfig, graph: TagGraph, teachers: TeacherEnsemble, seed: int):
    a = cfg.annotator
    if a.kind == "ground_truth_oracle":
        return GroundTruthOracle(noise_rate=a.noise_rate, seed=seed)
    if a.kind == "majority_vote":
        return MajorityTeacherVote(teacher_probs=teachers.probs)
    return ExternalHttp(endpoint=a.endpoint, category_names=sbm_class_names(graph.c),
                        timeout=a.timeout, max_retries=a.max_retries)


def annotate_selection(cfg: PipelineConfig, graph: TagGraph, teachers: TeacherEnsemble,
                       selection: Selection, split: Split, seed: int,
                       paths: SeedPaths | None = None) -> ExpandedDataset:
    """Label the selected nodes and assemble the expanded dataset.

    Prompts are rendered (with the merged distance-selected neighbors as
    context) only for the external backend; the built-in backends ignore
    them. Records that fail to parse or time out are dropped.
    """
    backend = build_annotator(cfg, graph, teachers, seed)
    names = sbm_class_names(graph.c)
    records = []
    for node in selection.nodes:
        node = int(node)
        prompt = ""
        if cfg.annotator.kind == "external_http":
            dns = dns_neighbors(node, teachers.embeddings, cfg.k_nn)
            prompt = render_classification_prompt(graph, node, dns, names)
        records.append(backend.annotate(graph, node, prompt))
    expanded = expand_dataset(split.train, graph.labels[split.train], records)
    if paths is not None:
        with open(paths.annotations, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps({"node": rec.node, "category": rec.category,
                                     "status": rec.status}) + "\n")
        export_expanded_csv(paths.expanded, expanded)
    return expanded


def _student_cfg(cfg: PipelineConfig, seed: int) -> TrainConfig:
    t = cfg.training
    return TrainConfig(hidden_dim=t.hidden_dim, learning_rate=t.learning_rate,
                       weight_decay=t.weight_decay, max_steps=t.max_steps,
                       patience=t.patience, seed=subseed(seed, STAGE_STUDENT_SEED))


def assign_and_distill(cfg: PipelineConfig, graph: TagGraph, teachers: TeacherEnsemble,
                       expanded: ExpandedDataset, split: Split, seed: int,
                       baseline: str | None = None, teacher_index: int = 0,
                       paths: SeedPaths | None = None) -> tuple:
    """Teacher assignment plus the final student fit, per run kind.

    Returns (student_params, mask or None, assignment_probs or None,
    epoch_stats). The default path runs the policy loop; teacher-side
    baselines substitute their fixed or sampled assignment and train the
    student directly.
    """
    b = len(teachers.kinds)
    log_path = paths.ngs_log if paths is not None else None
    mask = probs = None
    epoch_stats: list[dict] = []

    if baseline in (None, "random_node_selection", "entropy_node_selection"):
        result: NgsResult = run_ngs(cfg.student_kind, graph, teachers, expanded, split,
                                    cfg.rl, cfg.weights, cfg.training, seed,
                                    k_nn=cfg.k_nn, log_path=log_path)
        student, mask, probs = result.student_params, result.mask, result.assignment_probs
        epoch_stats = result.epoch_stats
    elif baseline == "random_teacher":
        rng = np.random.default_rng(subseed(seed, STAGE_RANDOM_TEACHER))
        mask = rng.integers(b, size=graph.n).astype(np.int64)
        probs = np.full(graph.n, 1.0 / b)
        targets = assemble_teacher_targets(teachers, mask)
        student = train_student(cfg.student_kind, graph, targets, expanded, cfg.weights,
                                cfg.training.max_steps, cfg=_student_cfg(cfg, seed),
                                val_split=split)
    elif baseline == "fixed_teacher":
        if not 0 <= teacher_index < b:
            raise ValueError(f"fixed_teacher index {teacher_index} out of range [0, {b})")
        mask = np.full(graph.n, teacher_index, dtype=np.int64)
        probs = np.ones(graph.n)
        targets = assemble_teacher_targets(teachers, mask)
        student = train_student(cfg.student_kind, graph, targets, expanded, cfg.weights,
                                cfg.training.max_steps, cfg=_student_cfg(cfg, seed),
                                val_split=split)
    elif baseline == "voting_teacher":
        votes = teachers.probs.argmax(axis=2)                      # (B, N)
        modal = np.array([np.bincount(votes[:, i], minlength=graph.c).argmax()
                          for i in range(graph.n)], dtype=np.int64)
        targets = mask_to_one_hot(modal, graph.c)
        student = train_student(cfg.student_kind, graph, targets, expanded, cfg.weights,
                                cfg.training.max_steps, cfg=_student_cfg(cfg, seed),
                                val_split=split)
    elif baseline == "end_to_end_gate":
        student, gate = train_gated_student(cfg.student_kind, graph, teachers, expanded,
                                            cfg.weights, _student_cfg(cfg, seed),
                                            val_split=split)
        mask = gate.argmax(axis=1).astype(np.int64)
        probs = gate[np.arange(graph.n), mask]
    else:
        raise ValueError(f"unknown baseline kind {baseline!r}")

    if paths is not None:
        save_params(student, paths.student)
        if mask is not None:
            export_assignment_csv(paths.assignment, mask, probs)
    return student, mask, probs, epoch_stats


@dataclass
class SeedOutcome:
    """Everything one seed contributes to the report."""

    seed: int
    test_accuracy: float
    budget: int
    expanded_size: int
    annotated_count: int
    selection_threshold: float | None
    delta_k: np.ndarray
    assignment_hist: list[int] | None
    epoch_stats: list[dict] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)


def _staged(name: str, timings: dict, fn, *args, **kwargs):
    start = time.perf_counter()
    try:
        out = fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    timings[name] = timings.get(name, 0.0) + time.perf_counter() - start
    return out


def run_seed(cfg: PipelineConfig, graph: TagGraph, seed: int, out_dir,
             baseline: str | None = None, teacher_index: int = 0) -> SeedOutcome:
    """All stages for one seed, writing artifacts under out_dir/seed_<seed>."""
    timings: dict[str, float] = {}
    paths = SeedPaths.for_seed(out_dir, seed).ensure()
    _staged("generate", timings, save_graph, graph, paths.graph)

    def _split():
        split = split_nodes(graph, cfg.labels_per_class, cfg.val_frac, cfg.test_frac, seed)
        write_split(paths.split, split)
        return split
    split = _staged("split", timings, _split)

    def _teachers():
        ens = train_teacher_ensemble(cfg.teacher_kinds, graph, split.train,
                                     graph.labels[split.train], split, cfg.training, seed)
        save_teachers(paths, ens)
        return ens
    teachers = _staged("train_teachers", timings, _teachers)

    def _rank():
        rank, selection = rank_and_select(cfg, graph, teachers, split, seed, baseline)
        export_rank_csv(paths.rank, rank, selection.nodes)
        return rank, selection
    rank, selection = _staged("rank", timings, _rank)

    expanded = _staged("annotate", timings, annotate_selection,
                       cfg, graph, teachers, selection, split, seed, paths)

    def _retrain():
        ens = retrain_teachers(teachers, graph, expanded, cfg.training, split, seed)
        save_teachers(paths, ens, retrained=True)
        return ens
    teachers2 = _staged("retrain", timings, _retrain)

    student, mask, _, epoch_stats = _staged("assign", timings, assign_and_distill,
                                            cfg, graph, teachers2, expanded, split, seed,
                                            baseline, teacher_index, paths)

    def _evaluate():
        acc = accuracy(cfg.student_kind, student, graph, split.test, graph.labels[split.test])
        with open(paths.evaluation, "w", encoding="utf-8") as fh:
            json.dump({"seed": seed, "test_accuracy": acc}, fh)
        return acc
    test_acc = _staged("evaluate", timings, _evaluate)

    hist = None
    if mask is not None:
        hist = [int(c) for c in np.bincount(mask, minlength=len(cfg.teacher_kinds))]
    return SeedOutcome(seed=seed, test_accuracy=float(test_acc),
                       budget=annotation_budget(cfg, graph, split),
                       expanded_size=int(expanded.size),
                       annotated_count=int(expanded.annotated_idx.size),
                       selection_threshold=selection.threshold,
                       delta_k=rank.delta_k, assignment_hist=hist,
                       epoch_stats=epoch_stats, timings=timings)


def run_pipeline(cfg: PipelineConfig, baseline: str | None = None,
                 teacher_index: int = 0, write_figures: bool = True):
    """Full multi-seed run; writes report.json, summary.csv, timings, figures."""
    from . import report as report_mod

    cfg.validate()
    if baseline is not None and baseline not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {baseline!r}, expected one of {BASELINE_KINDS}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = provide_graph(cfg)
    outcomes = [run_seed(cfg, graph, seed, out_dir, baseline, teacher_index)
                for seed in cfg.seeds]
    kind_tag = "pipeline" if baseline is None else (
        f"baseline:{baseline}:{teacher_index}" if baseline == "fixed_teacher"
        else f"baseline:{baseline}")
    report = report_mod.build_report(cfg, kind_tag, outcomes)
    report_mod.write_report_files(out_dir, report, outcomes, write_figures=write_figures)
    return report


def run_ratio_sweep(cfg: PipelineConfig, ratios, write_figures: bool = True) -> list[tuple[float, float]]:
    """run_pipeline once per expansion ratio with shared seeds; emits sweep.csv."""
    from . import report as report_mod

    ratios = [float(r) for r in ratios]
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ValueError(f"ratios must lie in (0, 1], got {r}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in ratios:
        sub = dataclasses.replace(cfg, expansion_ratio=r,
                                  out_dir=str(out_dir / f"ratio_{r:g}"))
        report = run_pipeline(sub, write_figures=write_figures)
        rows.append((r, report.mean_accuracy))
    with open(out_dir / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", "mean_accuracy"])
        for r, acc in rows:
            writer.writerow([repr(r), repr(acc)])
    if write_figures:
        report_mod.fig_sweep(out_dir, rows)
    return rows


def emit_gta(graph: TagGraph, out_path, seed: int, t: int = 2, walk_len: int = 12) -> dict[str, int]:
    """All four instruction generators; returns per-task record counts."""
    records = generate_all(graph, seed, walk_len=walk_len, t=t)
    write_gta_jsonl(out_path, records)
    counts: dict[str, int] = {}
    for rec in records:
        counts[rec.task] = counts.get(rec.task, 0) + 1
    return counts
