"""Run reports: deterministic JSON, summary CSV, timing sidecar, figures.

report.json is byte-stable for a given (config, seeds) run: keys are sorted
and wall-clock timings live in a separate timings.json so repeated runs
serialize identically.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

import numpy as np  # noqa: E402

from .config import PipelineConfig  # noqa: E402


@dataclass
class RunReport:
    """Aggregated multi-seed result."""

    kind: str
    config: dict
    seeds: list[dict]
    accuracies: list[float]
    mean_accuracy: float
    std_accuracy: float

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "config": self.config, "seeds": self.seeds,
                "accuracies": self.accuracies, "mean_accuracy": self.mean_accuracy,
                "std_accuracy": self.std_accuracy}


def _seed_entry(outcome) -> dict:
    dk = np.asarray(outcome.delta_k, dtype=np.float64)
    selection = {
        "threshold": None if outcome.selection_threshold is None else float(outcome.selection_threshold),
        "delta_k": {
            "min": float(dk.min()) if dk.size else None,
            "max": float(dk.max()) if dk.size else None,
            "mean": float(dk.mean()) if dk.size else None,
            "median": float(np.median(dk)) if dk.size else None,
        },
    }
    return {"seed": int(outcome.seed),
            "test_accuracy": float(outcome.test_accuracy),
            "budget": int(outcome.budget),
            "expanded_size": int(outcome.expanded_size),
            "annotated_count": int(outcome.annotated_count),
            "selection": selection,
            "assignment_histogram": outcome.assignment_hist}


def build_report(cfg: PipelineConfig, kind: str, outcomes) -> RunReport:
    accs = [float(o.test_accuracy) for o in outcomes]
    return RunReport(kind=kind, config=cfg.to_dict(),
                     seeds=[_seed_entry(o) for o in outcomes],
                     accuracies=accs,
                     mean_accuracy=float(np.mean(accs)),
                     std_accuracy=float(np.std(accs)))


def write_report_files(out_dir, report: RunReport, outcomes, write_figures: bool = True) -> None:
    """report.json + summary.csv + timings.json (+ figures) under out_dir."""
    out_dir = Path(out_dir)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")

    with open(out_dir / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "accuracy"])
        for entry in report.seeds:
            writer.writerow([entry["seed"], repr(entry["test_accuracy"])])

    stages: dict[str, float] = {}
    for outcome in outcomes:
        for name, secs in outcome.timings.items():
            stages[name] = stages.get(name, 0.0) + secs
    with open(out_dir / "timings.json", "w", encoding="utf-8") as fh:
        json.dump({"stages": stages, "total": sum(stages.values())}, fh, indent=2, sort_keys=True)

    if write_figures:
        fig_rank_hist(out_dir, outcomes)
        fig_training_curves(out_dir, outcomes)
        fig_assignments(out_dir, report, outcomes)
        fig_accuracy(out_dir, report)


def fig_rank_hist(out_dir, outcomes) -> None:
    """Distribution of pool delta_k values for the first seed, with threshold."""
    first = outcomes[0]
    dk = np.asarray(first.delta_k, dtype=np.float64)
    if not dk.size:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(dk, bins=30, color="steelblue", edgecolor="white")
    if first.selection_threshold is not None:
        ax.axvline(first.selection_threshold, color="firebrick", linestyle="--",
                   label=f"selection threshold ({first.selection_threshold:.3f})")
        ax.legend()
    ax.set_xlabel("delta_k (pairwise symmetric KL)")
    ax.set_ylabel("pool nodes")
    ax.set_title(f"Preference rank distribution (seed {first.seed})")
    fig.tight_layout()
    fig.savefig(Path(out_dir) / "rank_hist.png", dpi=150)
    plt.close(fig)


def fig_training_curves(out_dir, outcomes) -> None:
    """Mean reward and expanded-set accuracy over agent epochs, one line per seed."""
    if not any(o.epoch_stats for o in outcomes):
        return
    fig, (ax_r, ax_a) = plt.subplots(1, 2, figsize=(10, 4))
    for outcome in outcomes:
        if not outcome.epoch_stats:
            continue
        epochs = [row["epoch"] for row in outcome.epoch_stats]
        ax_r.plot(epochs, [row["mean_reward"] for row in outcome.epoch_stats],
                  alpha=0.8, label=f"seed {outcome.seed}")
        ax_a.plot(epochs, [row["acc"] for row in outcome.epoch_stats], alpha=0.8)
    ax_r.set_xlabel("agent epoch")
    ax_r.set_ylabel("mean reward")
    ax_r.set_title("Assignment-loop reward")
    ax_r.legend(fontsize=8)
    ax_a.set_xlabel("agent epoch")
    ax_a.set_ylabel("expanded-set accuracy")
    ax_a.set_title("Student accuracy during the loop")
    fig.tight_layout()
    fig.savefig(Path(out_dir) / "ngs_training.png", dpi=150)
    plt.close(fig)


def fig_assignments(out_dir, report: RunReport, outcomes) -> None:
    """Summed per-teacher assignment counts across seeds."""
    hists = [o.assignment_hist for o in outcomes if o.assignment_hist is not None]
    if not hists:
        return
    total = np.sum(np.array(hists), axis=0)
    kinds = report.config.get("teacher_kinds", [str(i) for i in range(len(total))])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(total)), total, color="darkseagreen", edgecolor="black")
    ax.set_xticks(range(len(total)))
    ax.set_xticklabels(kinds[:len(total)])
    ax.set_xlabel("teacher")
    ax.set_ylabel("assigned nodes (all seeds)")
    ax.set_title("Final teacher assignments")
    fig.tight_layout()
    fig.savefig(Path(out_dir) / "assignments.png", dpi=150)
    plt.close(fig)


def fig_accuracy(out_dir, report: RunReport) -> None:
    """Per-seed test accuracy bars with the mean marked."""
    seeds = [entry["seed"] for entry in report.seeds]
    accs = report.accuracies
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(accs)), accs, color="slategray", edgecolor="black")
    ax.axhline(report.mean_accuracy, color="firebrick", linestyle="--",
               label=f"mean {report.mean_accuracy:.3f}")
    ax.set_xticks(range(len(accs)))
    ax.set_xticklabels([str(s) for s in seeds])
    ax.set_xlabel("seed")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.set_title("Test accuracy per seed")
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(out_dir) / "accuracy.png", dpi=150)
    plt.close(fig)


def fig_sweep(out_dir, rows) -> None:
    """Expansion-ratio sweep: mean accuracy versus ratio."""
    if not rows:
        return
    ratios = [r for r, _ in rows]
    means = [m for _, m in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ratios, means, marker="o", color="steelblue")
    ax.set_xlabel("expansion ratio")
    ax.set_ylabel("mean test accuracy")
    ax.set_title("Annotation-ratio sweep")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(Path(out_dir) / "sweep.png", dpi=150)
    plt.close(fig)
