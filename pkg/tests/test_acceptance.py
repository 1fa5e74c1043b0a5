"""Acceptance checklist: nine criteria, one verdict line printed per test.

Run with `pytest tests/test_acceptance.py -v -s` to see the PASS/FAIL lines
as they complete. The first four criteria and the instruction-data check are
quick; the pipeline experiments (AC-5 through AC-9) share memoized multi-seed
runs and together take a few minutes of CPU time.
"""

import dataclasses
import json
import math
import shutil
import time

import numpy as np
import pytest

import oracles
from pkd.config import AnnotatorConfig, PipelineConfig
from pkd.distill import ExpandedDataset, KdWeights, kd_loss
from pkd.graph import (SbmConfig, generate_sbm, homophily_ratio, split_nodes,
                       subseed)
from pkd.gta import gen_connectivity, gen_cycle, gen_degree, gen_textgen
from pkd.models import forward, load_params
from pkd.pipeline import run_pipeline
from pkd.rl import RlConfig, ppo_policy_loss, ppo_update, run_ngs, sanity_ensemble
from pkd.selection import k_uncertainty, node_uncertainty
from pkd.training import TrainConfig
from test_gradients import TOL, random_instance, rebuild
from test_gta import graph_from_edges
from test_rl import clip_case_transition


def verdict(tag: str, ok: bool, detail: str) -> None:
    print(f"{tag} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"{tag}: {detail}"


# ---------------------------------------------------------------------------
# AC-1: ensemble disagreement dominates B times the mean-divergence score.

def test_ac1_disagreement_bound():
    rng = np.random.default_rng(11)
    start = time.time()
    worst = np.inf
    for trial in range(10_000):
        b = (2, 3, 4, 8)[trial % 4]
        c = int(rng.integers(2, 11))
        if trial % 3 == 0:
            rows = rng.dirichlet(np.full(c, 0.3), size=b)
            rows = np.clip(rows, 1e-9, None)
            rows /= rows.sum(axis=1, keepdims=True)
        else:
            rows = oracles.random_prob_rows(rng, b, c)
        worst = min(worst, k_uncertainty(rows) - b * node_uncertainty(rows))
    elapsed = time.time() - start
    ok = worst >= -1e-9 and elapsed < 5.0
    verdict("AC-1", ok,
            f"min(k_uncertainty - B*node_uncertainty) = {worst:.3e} over 10000 ensembles "
            f"(B in 2/3/4/8, C in 2..10) in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# AC-2: analytic gradients match central finite differences everywhere.

def test_ac2_gradient_correctness():
    from pkd.models import backward, softmax
    from pkd.training import cross_entropy_grad

    rng = np.random.default_rng(5)
    start = time.time()
    worst = 0.0
    for kind in ("gcn", "gat1", "appnp", "h2gcn", "mlp"):
        for _ in range(25):
            g, params, idx, labels = random_instance(rng, kind)
            out = forward(kind, params, g)
            _, d_logits = cross_entropy_grad(out, idx, labels)
            analytic = backward(kind, params, g, out.cache, d_logits)

            def model_loss(tensors):
                res = forward(kind, rebuild(kind, params.dims, tensors), g)
                return float(-np.mean(np.log(res.probs[idx, labels])))

            numeric = oracles.central_difference(model_loss, params.tensors)
            worst = max(worst, oracles.max_relative_error(analytic, numeric))

    for _ in range(25):
        n, c = 10, 4
        logits = rng.normal(size=(n, c)) * 2.0
        targets = oracles.random_prob_rows(rng, n, c)
        scope = np.sort(rng.choice(n, size=6, replace=False))
        gold = scope[:2]
        gold_labels = rng.integers(c, size=2)
        weights = KdWeights(alpha=0.7, beta=1.3, gamma=0.25)

        _, analytic = kd_loss(softmax(logits), targets, gold, gold_labels,
                              weights, scope)

        def distill_loss(tensors):
            return kd_loss(softmax(tensors["z"]), targets, gold, gold_labels,
                           weights, scope)[0]

        numeric = oracles.central_difference(distill_loss, {"z": logits})
        worst = max(worst, oracles.max_relative_error({"z": analytic}, numeric))
    elapsed = time.time() - start
    ok = worst <= TOL and elapsed < 60.0
    verdict("AC-2", ok,
            f"max relative error {worst:.2e} (tol {TOL:.0e}) over 25 trials x "
            f"5 model kinds + 25 distillation-loss trials in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# AC-3: samples outside the clip window pass exactly zero policy gradient.

def test_ac3_clip_dead_zone():
    loss_high = ppo_policy_loss(new_logp=math.log(1.5), old_logp=0.0, adv=1.0,
                                eps_clip=0.2)
    loss_low = ppo_policy_loss(new_logp=math.log(0.5), old_logp=0.0, adv=-1.0,
                               eps_clip=0.2)
    arithmetic_ok = loss_high == -1.2 and loss_low == 0.8

    rng = np.random.default_rng(3)
    state = rng.normal(size=6)
    cfg = RlConfig(lr_policy=0.7, lr_value=1e-9, c2=0.0, eps_clip=0.2, epochs=1)
    frozen = True
    for seed, ratio_shift, reward_gap in ((0, 1.5, 1.0), (1, 0.5, -1.0)):
        from pkd.models import init_params
        policy = init_params("mlp", 6, 4, 3, seed=seed)
        value = init_params("mlp", 6, 4, 1, seed=seed + 10)
        before = {k: v.copy() for k, v in policy.tensors.items()}
        stats = ppo_update(policy, value,
                           [clip_case_transition(policy, value, state,
                                                 ratio_shift, reward_gap)], cfg)
        frozen &= stats.clip_fraction == 1.0
        frozen &= all(np.array_equal(policy.tensors[k], before[k]) for k in before)
    ok = arithmetic_ok and frozen
    verdict("AC-3", ok,
            f"clipped-term losses {loss_high} / {loss_low} (hand values -1.2 / 0.8); "
            f"policy tensors bit-identical through both out-of-window updates: {frozen}")


# ---------------------------------------------------------------------------
# AC-4: sanity environment, oracle teacher versus uniform teacher.

def test_ac4_sanity_environment():
    start = time.time()
    fractions = []
    for run_seed in range(5):
        sbm = SbmConfig(node_count=60, class_count=3, feature_dim=8, p_in=0.25,
                        p_out=0.04, separation=2.0, noise_scale=0.8, seed=11)
        graph = generate_sbm(sbm)
        split = split_nodes(graph, labels_per_class=2, val_frac=0.2, test_frac=0.2,
                            seed=subseed(run_seed, 17))
        rng = np.random.default_rng(subseed(run_seed, 59))
        extra = np.sort(rng.choice(split.pool(graph.n), size=22, replace=False))
        expanded = ExpandedDataset(gold_idx=split.train,
                                   gold_labels=graph.labels[split.train],
                                   annotated_idx=extra,
                                   annotated_labels=graph.labels[extra])
        rl_cfg = RlConfig(epochs=50, lr_policy=0.2, lr_value=0.2, c2=0.01,
                          policy_hidden=16, student_epochs=5)
        result = run_ngs("gcn", graph, sanity_ensemble(graph), expanded, split,
                         rl_cfg, KdWeights(), TrainConfig(hidden_dim=16, max_steps=120,
                                                          patience=120), seed=run_seed)
        exp_idx = expanded.all_indices()
        fractions.append(float(np.mean(result.mask[exp_idx] == 0)))
    mean_frac = float(np.mean(fractions))
    elapsed = time.time() - start
    ok = mean_frac >= 0.9 and elapsed < 180.0
    verdict("AC-4", ok,
            f"oracle-teacher fraction {mean_frac:.3f} (need >= 0.9) after 50 epochs, "
            f"per-seed {[round(f, 2) for f in fractions]}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# Shared experiment scale for the pipeline criteria. The weight and reward
# constants stay at their library defaults; the scale knobs (hidden width,
# step counts, loop length) are sized so five-seed comparisons finish in
# minutes while the teachers stay in their generalizing regime.

HOM_SBM = dict(p_in=0.05, p_out=0.003, separation=0.8, noise_scale=2.0)
HET_SBM = dict(p_in=0.032, p_out=0.032, separation=2.2, noise_scale=1.0)
SCALE = dict(hidden_dim=8, learning_rate=1e-2, weight_decay=5e-4,
             max_steps=120, patience=40)
LOOP = dict(eta=0.3, c1=0.5, c2=0.01, eps_clip=0.2, lr_value=0.1,
            policy_hidden=32, student_epochs=5)
SLACK = 1e-9


def experiment_config(out_dir, homophilous=True, **overrides):
    """Five-seed experiment at desk scale.

    The two settings mirror the method's own architecture split: homophilous
    graphs distill the smoothing committee into a GCN student, while the
    heterophilous setting uses the ego-feature-capable kinds and an H2GCN
    student. Weight and reward constants are the library defaults; scale
    knobs are sized for minutes of CPU.
    """
    if homophilous:
        sbm = SbmConfig(node_count=300, class_count=5, feature_dim=32, seed=7,
                        **HOM_SBM)
        arch = dict(rl=RlConfig(lr_policy=0.02, epochs=60, **LOOP))
    else:
        sbm = SbmConfig(node_count=300, class_count=5, feature_dim=32, seed=7,
                        **HET_SBM)
        arch = dict(teacher_kinds=["h2gcn", "mlp", "gat1", "appnp"],
                    student_kind="h2gcn",
                    rl=RlConfig(lr_policy=0.04, epochs=150, **LOOP))
    base = dict(
        sbm=sbm,
        labels_per_class=3,
        val_frac=0.12,
        test_frac=0.2,
        expansion_ratio=0.48,
        annotator=AnnotatorConfig(kind="ground_truth_oracle", noise_rate=0.1),
        weights=KdWeights(alpha=0.5, beta=1.0, gamma=0.1),
        training=TrainConfig(**SCALE),
        k_nn=4,
        seeds=[0, 1, 2, 3, 4],
        out_dir=str(out_dir),
        **arch,
    )
    base.update(overrides)
    return PipelineConfig(**base)


def run_comparison(root, homophilous):
    """The pipeline plus every teacher-side baseline it must beat."""
    start = time.time()
    results = {"pkd": run_pipeline(experiment_config(root / "pkd", homophilous),
                                   write_figures=False)}
    for kind in ("random_node_selection", "voting_teacher"):
        cfg = experiment_config(root / kind, homophilous)
        results[kind] = run_pipeline(cfg, baseline=kind, write_figures=False)
    for b in range(4):
        cfg = experiment_config(root / f"fixed_{b}", homophilous)
        results[f"fixed_{b}"] = run_pipeline(cfg, baseline="fixed_teacher",
                                             teacher_index=b, write_figures=False)
    return results, time.time() - start


@pytest.fixture(scope="session")
def hom_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("hom")
    results, elapsed = run_comparison(root, homophilous=True)
    return {"results": results, "elapsed": elapsed, "root": root}


@pytest.fixture(scope="session")
def het_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("het")
    results, elapsed = run_comparison(root, homophilous=False)
    return {"results": results, "elapsed": elapsed, "root": root}


def margins(results):
    pkd = results["pkd"].mean_accuracy
    best_fixed = max(results[f"fixed_{b}"].mean_accuracy for b in range(4))
    return {
        "random": pkd - results["random_node_selection"].mean_accuracy,
        "fixed": pkd - best_fixed,
        "voting": pkd - results["voting_teacher"].mean_accuracy,
    }


# ---------------------------------------------------------------------------
# AC-5: the pipeline beats node-selection and teacher-side baselines.

def test_ac5_pipeline_beats_baselines(hom_runs, het_runs):
    ok = True
    details = []
    for name, bundle in (("homophilous", hom_runs), ("heterophilous", het_runs)):
        m = margins(bundle["results"])
        ok &= (m["random"] >= 0.02 - SLACK and m["fixed"] >= 0.02 - SLACK
               and m["voting"] >= 0.01 - SLACK and bundle["elapsed"] < 600.0)
        details.append(
            f"{name}: vs random {100 * m['random']:+.2f} (need >= 2), "
            f"vs best fixed {100 * m['fixed']:+.2f} (need >= 2), "
            f"vs voting {100 * m['voting']:+.2f} (need >= 1), "
            f"{bundle['elapsed']:.0f}s")
    verdict("AC-5", ok, "; ".join(details))


# ---------------------------------------------------------------------------
# AC-6: accuracy does not degrade as the annotation ratio grows.

def test_ac6_ratio_trend(hom_runs, tmp_path_factory):
    start = time.time()
    root = tmp_path_factory.mktemp("sweep")
    rows = []
    for ratio in (0.1, 0.2, 0.3, 0.4):
        cfg = experiment_config(root / f"ratio_{ratio:g}", homophilous=True,
                                expansion_ratio=ratio)
        rows.append((ratio, run_pipeline(cfg, write_figures=False).mean_accuracy))
    rows.append((0.48, hom_runs["results"]["pkd"].mean_accuracy))
    elapsed = time.time() - start
    accs = [acc for _, acc in rows]
    drops = [accs[i] - accs[i + 1] for i in range(len(accs) - 1)
             if accs[i + 1] < accs[i]]
    ok = (len(drops) == 0 or (len(drops) == 1 and drops[0] <= 0.01 + 1e-12))
    ok &= elapsed < 1800.0
    table = ", ".join(f"{r:g}: {a:.3f}" for r, a in rows)
    verdict("AC-6", ok,
            f"mean accuracy by ratio [{table}]; inversions {len(drops)} "
            f"(allowed one of <= 1 point); {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# AC-8: the entropy term sharpens student predictions.

def test_ac8_entropy_term_sharpens(hom_runs, tmp_path_factory):
    gamma0_dir = tmp_path_factory.mktemp("gamma0")
    cfg0 = experiment_config(gamma0_dir, homophilous=True,
                             weights=KdWeights(alpha=0.5, beta=1.0, gamma=0.0))
    run_pipeline(cfg0, write_figures=False)

    graph_cfg = experiment_config(gamma0_dir, homophilous=True)
    from pkd.pipeline import provide_graph
    graph = provide_graph(graph_cfg)

    def mean_entropy(run_dir, seed):
        params = load_params(f"{run_dir}/seed_{seed}/student.json")
        probs = forward(graph_cfg.student_kind, params, graph).probs
        return float(np.mean(-np.sum(probs * np.log(probs), axis=1)))

    pkd_dir = hom_runs["root"] / "pkd"
    lower = []
    pairs = []
    for seed in graph_cfg.seeds:
        h_gamma = mean_entropy(pkd_dir, seed)
        h_zero = mean_entropy(gamma0_dir, seed)
        lower.append(h_gamma < h_zero)
        pairs.append(f"{h_gamma:.3f}<{h_zero:.3f}" if h_gamma < h_zero
                     else f"{h_gamma:.3f}>={h_zero:.3f}")
    count = sum(lower)
    verdict("AC-8", count >= 4,
            f"gamma=0.1 run has strictly lower mean prediction entropy on "
            f"{count}/5 seeds (need >= 4): {', '.join(pairs)}")


# ---------------------------------------------------------------------------
# AC-9: identical config and seeds produce a byte-identical report.

def test_ac9_determinism(hom_runs):
    pkd_dir = hom_runs["root"] / "pkd"
    report_path = pkd_dir / "report.json"
    first = report_path.read_bytes()
    cfg = experiment_config(pkd_dir, homophilous=True)
    run_pipeline(cfg, write_figures=False)
    second = report_path.read_bytes()
    verdict("AC-9", first == second,
            f"two executions wrote identical {len(first)}-byte reports: "
            f"{first == second}")


# ---------------------------------------------------------------------------
# AC-7: instruction generators agree with brute-force oracles.

def test_ac7_instruction_data_correct():
    rng = np.random.default_rng(23)
    start = time.time()
    records_checked = 0
    for trial in range(100):
        n = int(rng.integers(6, 26))
        edges = oracles.random_graph(rng, n, float(rng.uniform(0.15, 0.5)))
        g = graph_from_edges(edges, n)

        conn = gen_connectivity(g, seed=trial)
        assert len(conn) == n * (n - 1) // 6
        for rec in conn:
            i, j = rec.nodes
            assert rec.answer == oracles.has_edge(edges, i, j)
        records_checked += len(conn)

        deg = gen_degree(g, seed=trial)
        degrees = [oracles.degree_count(edges, v, n) for v in range(n)]
        groups = {}
        for v, d in enumerate(degrees):
            groups.setdefault(d, []).append(v)
        per_group = {}
        for rec in deg:
            assert rec.answer == degrees[rec.nodes[0]]
            per_group[rec.answer] = per_group.get(rec.answer, 0) + 1
        assert per_group == {d: math.ceil(len(m) / 3) for d, m in groups.items()}
        records_checked += len(deg)

        walks = gen_cycle(g, seed=trial, num_walks=max(1, n // 3), walk_len=12)
        for rec in walks:
            assert len(rec.nodes) > 10
            assert rec.answer == oracles.sequence_has_cycle(rec.nodes, edges)
        records_checked += len(walks)

        text = gen_textgen(g, seed=trial, t=2)
        assert len(text) <= n // 3
        for rec in text:
            path = rec.nodes
            source, target = path[0], path[-1]
            dist = oracles.bfs_distances(n, edges, source)
            beyond = [v for v in range(n) if dist[v] > 2]
            assert beyond, "record emitted for a source with no node past the threshold"
            best = min(dist[v] for v in beyond)
            assert dist[target] == best
            assert target == min(v for v in beyond if dist[v] == best)
            assert len(path) == dist[target] + 1
            for a, b in zip(path, path[1:]):
                assert oracles.has_edge(edges, a, b)
            assert rec.answer == g.texts[target]
        records_checked += len(text)
    elapsed = time.time() - start
    ok = elapsed < 60.0
    verdict("AC-7", ok,
            f"{records_checked} records across 100 random graphs per task match "
            f"the brute-force oracles; sampling caps exact; {elapsed:.1f}s")
