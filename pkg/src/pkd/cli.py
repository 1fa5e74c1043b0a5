"""Command-line entry point: staged subcommands plus the one-shot pipeline."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import DEFAULT_SWEEP_RATIOS, PipelineConfig, load_config
from .distill import assemble_teacher_targets, train_student, train_teacher_ensemble
from .graph import homophily_ratio, load_graph, save_graph, split_nodes
from .models import load_params, save_params
from .pipeline import (SeedPaths, StageError, _student_cfg, annotate_selection,
                       annotation_budget, emit_gta, load_teachers, provide_graph,
                       rank_and_select, read_assignment_csv, read_expanded_csv, read_split,
                       run_pipeline, run_ratio_sweep, save_teachers, write_split)
from .rl import export_assignment_csv, run_ngs
from .selection import Selection, export_rank_csv
from .training import accuracy


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _resolve(args) -> tuple[PipelineConfig, int, SeedPaths]:
    cfg = load_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    paths = SeedPaths.for_seed(cfg.out_dir, seed).ensure()
    return cfg, seed, paths


def _ensure_graph(cfg: PipelineConfig, paths: SeedPaths):
    if paths.graph.exists():
        return load_graph(paths.graph)
    graph = provide_graph(cfg)
    save_graph(graph, paths.graph)
    return graph


def _ensure_split(cfg: PipelineConfig, graph, seed: int, paths: SeedPaths):
    if paths.split.exists():
        return read_split(paths.split)
    split = split_nodes(graph, cfg.labels_per_class, cfg.val_frac, cfg.test_frac, seed)
    write_split(paths.split, split)
    return split


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    graph = _stage("generate", provide_graph, cfg)
    save_graph(graph, out / "graph.json")
    print(f"graph.json: {graph.n} nodes, {graph.edge_count} edges, "
          f"{graph.c} classes, homophily {homophily_ratio(graph):.3f}")
    return 0


def cmd_train_teachers(args) -> int:
    cfg, seed, paths = _resolve(args)
    graph = _stage("generate", _ensure_graph, cfg, paths)
    split = _stage("split", _ensure_split, cfg, graph, seed, paths)

    def work():
        ens = train_teacher_ensemble(cfg.teacher_kinds, graph, split.train,
                                     graph.labels[split.train], split, cfg.training, seed)
        save_teachers(paths, ens)
        return ens
    teachers = _stage("train_teachers", work)
    for kind, acc in zip(teachers.kinds, teachers.val_accs):
        print(f"teacher {kind}: val accuracy {acc:.3f}")
    return 0


def cmd_rank(args) -> int:
    cfg, seed, paths = _resolve(args)
    graph = _stage("generate", _ensure_graph, cfg, paths)
    split = _stage("split", _ensure_split, cfg, graph, seed, paths)
    teachers = _stage("rank", load_teachers, cfg, graph, paths)

    def work():
        rank, selection = rank_and_select(cfg, graph, teachers, split, seed)
        export_rank_csv(paths.rank, rank, selection.nodes)
        return rank, selection
    rank, selection = _stage("rank", work)
    print(f"rank.csv: {len(rank.order)} pool nodes, budget "
          f"{annotation_budget(cfg, graph, split)}, selected {len(selection.nodes)}")
    return 0


def _read_selection(paths: SeedPaths) -> Selection:
    import csv as _csv
    nodes = []
    with open(paths.rank, "r", encoding="utf-8", newline="") as fh:
        for row in _csv.DictReader(fh):
            if row["selected"] == "1":
                nodes.append(int(row["node_id"]))
    return Selection(nodes=np.array(nodes, dtype=np.int64), threshold=None)


def cmd_annotate(args) -> int:
    cfg, seed, paths = _resolve(args)
    graph = _stage("generate", _ensure_graph, cfg, paths)
    split = _stage("split", _ensure_split, cfg, graph, seed, paths)
    teachers = _stage("annotate", load_teachers, cfg, graph, paths)
    selection = _stage("annotate", _read_selection, paths)
    expanded = _stage("annotate", annotate_selection, cfg, graph, teachers, selection,
                      split, seed, paths)
    print(f"expanded.csv: {expanded.gold_idx.size} gold + "
          f"{expanded.annotated_idx.size} annotated nodes")
    return 0


def cmd_retrain(args) -> int:
    cfg, seed, paths = _resolve(args)
    graph = _stage("generate", _ensure_graph, cfg, paths)
    split = _stage("split", _ensure_split, cfg, graph, seed, paths)
    expanded = _stage("retrain", read_expanded_csv, paths.expanded)

    def work():
        ens = train_teacher_ensemble(cfg.teacher_kinds, graph, expanded.all_indices(),
                                     expanded.all_labels(), split, cfg.training, seed)
        save_teachers(paths, ens, retrained=True)
        return ens
    teachers = _stage("retrain", work)
    for kind, acc in zip(teachers.kinds, teachers.val_accs):
        print(f"retrained teacher {kind}: val accuracy {acc:.3f}")
    return 0


def cmd_assign(args) -> int:
    cfg, seed, paths = _resolve(args)
    graph = _stage("generate", _ensure_graph, cfg, paths)
    split = _stage("split", _ensure_split, cfg, graph, seed, paths)
    teachers = _stage("assign", load_teachers, cfg, graph, paths, True)
    expanded = _stage("assign", read_expanded_csv, paths.expanded)

    def work():
        result = run_ngs(cfg.student_kind, graph, teachers, expanded, split, cfg.rl,
                         cfg.weights, cfg.training, seed, k_nn=cfg.k_nn,
                         log_path=paths.ngs_log)
        export_assignment_csv(paths.assignment, result.mask, result.assignment_probs)
        save_params(result.student_params, paths.student)
        return result
    result = _stage("assign", work)
    hist = np.bincount(result.mask, minlength=len(cfg.teacher_kinds))
    pairs = ", ".join(f"{k}={c}" for k, c in zip(cfg.teacher_kinds, hist))
    print(f"assignment.csv: {pairs}")
    return 0


def cmd_distill(args) -> int:
    cfg, seed, paths = _resolve(args)
    graph = _stage("generate", _ensure_graph, cfg, paths)
    split = _stage("split", _ensure_split, cfg, graph, seed, paths)
    teachers = _stage("distill", load_teachers, cfg, graph, paths, True)
    expanded = _stage("distill", read_expanded_csv, paths.expanded)
    mask, _ = _stage("distill", read_assignment_csv, paths.assignment)

    def work():
        targets = assemble_teacher_targets(teachers, mask)
        student = train_student(cfg.student_kind, graph, targets, expanded, cfg.weights,
                                cfg.training.max_steps, cfg=_student_cfg(cfg, seed),
                                val_split=split)
        save_params(student, paths.student)
        return student
    student = _stage("distill", work)
    val_acc = accuracy(cfg.student_kind, student, graph, split.val, graph.labels[split.val])
    print(f"student.json: val accuracy {val_acc:.3f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, seed, paths = _resolve(args)
    graph = _stage("generate", _ensure_graph, cfg, paths)
    split = _stage("split", _ensure_split, cfg, graph, seed, paths)

    def work():
        import json as _json
        student = load_params(paths.student)
        acc = accuracy(cfg.student_kind, student, graph, split.test, graph.labels[split.test])
        with open(paths.evaluation, "w", encoding="utf-8") as fh:
            _json.dump({"seed": seed, "test_accuracy": acc}, fh)
        return acc
    acc = _stage("evaluate", work)
    print(f"test accuracy (seed {seed}): {acc:.4f}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seeds = [args.seed]
    report = run_pipeline(cfg)
    print(f"pipeline: mean test accuracy {report.mean_accuracy:.4f} "
          f"+/- {report.std_accuracy:.4f} over {len(report.accuracies)} seeds")
    print(f"report: {Path(cfg.out_dir) / 'report.json'}")
    return 0


def cmd_baseline(args) -> int:
    cfg = load_config(args.config)
    kind = args.kind
    teacher_index = args.teacher_index
    if ":" in kind:
        kind, _, idx = kind.partition(":")
        teacher_index = int(idx)
    out = args.out or str(Path(cfg.out_dir) / (
        f"baseline_{kind}_{teacher_index}" if kind == "fixed_teacher" else f"baseline_{kind}"))
    cfg.out_dir = out
    if args.seed is not None:
        cfg.seeds = [args.seed]
    report = run_pipeline(cfg, baseline=kind, teacher_index=teacher_index)
    print(f"baseline {kind}: mean test accuracy {report.mean_accuracy:.4f} "
          f"+/- {report.std_accuracy:.4f} over {len(report.accuracies)} seeds")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seeds = [args.seed]
    ratios = [float(r) for r in args.ratios.split(",")] if args.ratios else DEFAULT_SWEEP_RATIOS
    rows = run_ratio_sweep(cfg, ratios)
    for ratio, acc in rows:
        print(f"ratio {ratio:.2f}: mean accuracy {acc:.4f}")
    print(f"sweep table: {Path(cfg.out_dir) / 'sweep.csv'}")
    return 0


def cmd_gta(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    graph_file = out / "graph.json"
    if graph_file.exists():
        graph = load_graph(graph_file)
    else:
        graph = _stage("generate", provide_graph, cfg)
        save_graph(graph, graph_file)
    counts = _stage("gta", emit_gta, graph, out / "gta.jsonl", seed,
                    args.t, args.walk_len)
    for task in ("connectivity", "degree", "cycle", "textgen"):
        print(f"{task}: {counts.get(task, 0)} records")
    print(f"instructions: {out / 'gta.jsonl'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pkd",
        description="Preference-driven distillation pipeline for text-attributed graphs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="seed (default: first configured)")
        p.add_argument("--out", default=None, help="output directory override")
        p.set_defaults(handler=handler)
        return p

    add("generate", cmd_generate, "generate or load the graph and write graph.json")
    add("train-teachers", cmd_train_teachers, "train the teacher ensemble on the gold labels")
    add("rank", cmd_rank, "rank the pool by teacher disagreement and select the budget")
    add("annotate", cmd_annotate, "label the selected nodes and build the expanded set")
    add("retrain", cmd_retrain, "retrain the teachers on the expanded set")
    add("assign", cmd_assign, "run the assignment loop and train the student")
    add("distill", cmd_distill, "train a student from a stored assignment")
    add("evaluate", cmd_evaluate, "score the stored student on the test split")
    add("pipeline", cmd_pipeline, "run every stage for all configured seeds")

    p = add("baseline", cmd_baseline, "run a comparison variant end to end")
    p.add_argument("--kind", required=True,
                   help="random_node_selection | entropy_node_selection | random_teacher | "
                        "voting_teacher | fixed_teacher[:b] | end_to_end_gate")
    p.add_argument("--teacher-index", type=int, default=0,
                   help="teacher index for fixed_teacher")

    p = add("sweep", cmd_sweep, "run the pipeline across expansion ratios")
    p.add_argument("--ratios", default=None,
                   help="comma-separated ratios (default 0.1,0.2,0.3,0.4,0.48)")

    p = add("gta", cmd_gta, "emit the four instruction datasets as JSONL")
    p.add_argument("--t", type=int, default=2, help="distance threshold for text generation")
    p.add_argument("--walk-len", type=int, default=12, help="random-walk length for cycles")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except StageError as err:
        print(f"pkd: {err}", file=sys.stderr)
        return 1
    except Exception as err:
        print(f"pkd: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
