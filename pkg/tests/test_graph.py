import json
import math

import numpy as np
import pytest

import oracles
from pkd.graph import (SbmConfig, Split, build_graph, generate_sbm, homophily_ratio, load_graph,
                       normalized_adjacency, save_graph, sbm_class_names, split_nodes, subseed)


def small_graph(edges, labels, n=None):
    labels = np.asarray(labels)
    n = n if n is not None else len(labels)
    features = np.zeros((n, 4))
    features[:, 0] = np.arange(n)
    return build_graph(edges, features, labels)


def test_subseed_is_deterministic_and_tag_sensitive():
    assert subseed(7, 1, 2) == subseed(7, 1, 2)
    assert subseed(7, 1, 2) != subseed(7, 2, 1)
    assert subseed(7, 1) != subseed(8, 1)


def test_build_graph_canonicalizes_and_dedupes_edges():
    g = small_graph([(2, 0), (0, 2), (1, 2)], [0, 0, 1])
    assert g.edges.tolist() == [[0, 2], [1, 2]]
    assert g.edge_count == 2
    assert g.degrees().tolist() == [1, 1, 2]


def test_build_graph_rejects_self_loops_and_bad_indices():
    with pytest.raises(ValueError):
        small_graph([(0, 0)], [0, 1])
    with pytest.raises(ValueError):
        small_graph([(0, 5)], [0, 1])


def test_neighbor_lists_sorted():
    g = small_graph([(0, 3), (0, 1), (2, 0)], [0, 1, 0, 1])
    assert g.neighbor_lists()[0].tolist() == [1, 2, 3]
    assert g.neighbor_lists()[1].tolist() == [0]


def test_normalized_adjacency_single_edge_is_all_half():
    g = small_graph([(0, 1)], [0, 1])
    a_hat = normalized_adjacency(g)
    assert np.allclose(a_hat, 0.5)


def test_normalized_adjacency_isolated_node_is_identity_row():
    g = build_graph([], np.zeros((1, 3)), [0], class_count=2)
    assert normalized_adjacency(g).tolist() == [[1.0]]


def test_homophily_path_graph():
    g = small_graph([(0, 1), (1, 2)], [0, 0, 1])
    assert homophily_ratio(g) == 0.5
    assert homophily_ratio(g) == oracles.homophily_by_hand(g.edges, g.labels)


def test_homophily_matches_oracle_on_random_graphs():
    rng = np.random.default_rng(3)
    for _ in range(10):
        n = int(rng.integers(5, 20))
        edges = oracles.random_graph(rng, n, 0.4)
        if not edges:
            continue
        labels = rng.integers(3, size=n)
        g = build_graph(edges, rng.normal(size=(n, 3)), labels, class_count=3)
        assert math.isclose(homophily_ratio(g), oracles.homophily_by_hand(edges, labels))


def test_sbm_determinism_and_shapes():
    cfg = SbmConfig(node_count=80, class_count=4, p_in=0.2, p_out=0.02, feature_dim=6, seed=11)
    g1, g2 = generate_sbm(cfg), generate_sbm(cfg)
    assert g1.n == 80 and g1.c == 4 and g1.feature_dim == 6
    assert np.array_equal(g1.edges, g2.edges)
    assert np.array_equal(g1.features, g2.features)
    assert np.array_equal(g1.labels, g2.labels)
    assert g1.texts == g2.texts
    assert len(g1.texts) == 80
    names = sbm_class_names(4)
    assert all(any(name in t for name in names) for t in g1.texts)


def test_sbm_equal_probabilities_give_chance_homophily():
    # p_in == p_out wires edges independently of labels, so the same-label
    # edge fraction concentrates near 1/C.
    vals = []
    for seed in range(20):
        cfg = SbmConfig(node_count=500, class_count=5, p_in=0.03, p_out=0.03,
                        feature_dim=6, seed=seed)
        vals.append(homophily_ratio(generate_sbm(cfg)))
    assert abs(float(np.mean(vals)) - 0.2) < 0.05


def test_sbm_homophilous_when_p_in_dominates():
    cfg = SbmConfig(node_count=300, class_count=5, p_in=0.12, p_out=0.008, feature_dim=6, seed=0)
    assert homophily_ratio(generate_sbm(cfg)) > 0.6


def test_split_nodes_stratified_and_disjoint():
    cfg = SbmConfig(node_count=100, class_count=4, p_in=0.1, p_out=0.02, feature_dim=4, seed=2)
    g = generate_sbm(cfg)
    split = split_nodes(g, labels_per_class=3, val_frac=0.2, test_frac=0.3, seed=0)
    assert len(split.train) == 12
    for c in range(4):
        assert int(np.sum(g.labels[split.train] == c)) == 3
    assert len(split.val) == 20 and len(split.test) == 30
    all_idx = np.concatenate([split.train, split.val, split.test])
    assert len(np.unique(all_idx)) == len(all_idx)
    pool = split.pool(g.n)
    assert len(pool) == g.n - len(all_idx)
    assert not np.intersect1d(pool, all_idx).size


def test_split_nodes_deterministic_per_seed():
    g = generate_sbm(SbmConfig(node_count=60, class_count=3, p_in=0.2, p_out=0.05,
                               feature_dim=4, seed=4))
    a = split_nodes(g, 2, 0.2, 0.2, seed=9)
    b = split_nodes(g, 2, 0.2, 0.2, seed=9)
    c = split_nodes(g, 2, 0.2, 0.2, seed=10)
    assert np.array_equal(a.train, b.train)
    assert np.array_equal(a.val, b.val)
    assert not (np.array_equal(a.val, c.val) and np.array_equal(a.train, c.train))


def test_graph_round_trip(tmp_path):
    g = generate_sbm(SbmConfig(node_count=30, class_count=3, p_in=0.3, p_out=0.05,
                               feature_dim=5, seed=1))
    path = tmp_path / "g.json"
    save_graph(g, path)
    back = load_graph(path)
    assert back.n == g.n and back.c == g.c
    assert np.array_equal(back.edges, g.edges)
    assert np.array_equal(back.features, g.features)
    assert np.array_equal(back.labels, g.labels)
    assert back.texts == g.texts


def test_load_graph_rejects_unknown_keys(tmp_path):
    g = generate_sbm(SbmConfig(node_count=10, class_count=2, p_in=0.3, p_out=0.1,
                               feature_dim=3, seed=1))
    path = tmp_path / "g.json"
    save_graph(g, path)
    data = json.loads(path.read_text())
    data["extra"] = 1
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError):
        load_graph(path)


def test_load_graph_rejects_wrong_node_count(tmp_path):
    g = generate_sbm(SbmConfig(node_count=10, class_count=2, p_in=0.3, p_out=0.1,
                               feature_dim=3, seed=1))
    path = tmp_path / "g.json"
    save_graph(g, path)
    data = json.loads(path.read_text())
    data["n"] = 11
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError):
        load_graph(path)


def test_split_fraction_validation():
    g = generate_sbm(SbmConfig(node_count=20, class_count=2, p_in=0.3, p_out=0.1,
                               feature_dim=3, seed=1))
    with pytest.raises(ValueError):
        split_nodes(g, 2, 0.6, 0.5, seed=0)
