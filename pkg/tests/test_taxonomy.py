import itertools
from collections import Counter

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpn.memory import PrototypeMemory
from gpn.taxonomy import (
    CategoryGraph,
    GraphError,
    attach_test_classes,
    build_pathway,
    format_graph,
    maximum_spanning_forest,
    parse_graph,
    read_graph,
    sample_random,
    sample_snowball,
    write_graph,
)


def random_dag(rng, n, p=0.35):
    """Arcs only go from lower to higher ids, so the result is acyclic."""
    arcs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return CategoryGraph(range(n), arcs)


def chain(n):
    return CategoryGraph(range(n), [(i, i + 1) for i in range(n - 1)])


def memory_with(protos):
    mem = PrototypeMemory()
    for y, v in protos.items():
        mem.put(y, v, 0)
    return mem


# ---------------------------------------------------------------------------
# structure and file format

def test_cycle_is_rejected():
    with pytest.raises(GraphError):
        CategoryGraph(arcs=[(0, 1), (1, 2), (2, 0)])


def test_neighbors_are_parents_and_children():
    g = CategoryGraph(arcs=[(0, 1), (0, 2), (1, 3), (2, 3)])
    assert g.neighbors[3] == (1, 2)
    assert g.neighbors[1] == (0, 3)
    assert g.parents[3] == (1, 2) and g.children[0] == (1, 2)


def test_graph_file_round_trip(tmp_path):
    text = "# a comment\n0 1\n\n0 2   # trailing\nnode 7\n2 3\n"
    g = parse_graph(text)
    assert g.nodes == (0, 1, 2, 3, 7)
    assert g.arcs == ((0, 1), (0, 2), (2, 3))
    write_graph(tmp_path / "g.edges", g)
    assert read_graph(tmp_path / "g.edges") == g
    assert format_graph(g) == format_graph(read_graph(tmp_path / "g.edges"))


def test_graph_file_bad_line():
    with pytest.raises(GraphError):
        parse_graph("0 1 2\n")


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_generated_dags_topologically_sort(n, seed):
    g = random_dag(np.random.default_rng(seed), n)
    order = g.topological_order()
    pos = {y: i for i, y in enumerate(order)}
    assert sorted(order) == list(g.nodes)
    assert all(pos[p] < pos[c] for p, c in g.arcs)


# ---------------------------------------------------------------------------
# hop distance

def test_hop_distance_identity_and_chain():
    g = chain(3)
    assert g.hop_distance(1, 1) == 0
    assert g.hop_distance(0, 2) == 2
    assert g.hop_distance(2, 0) == 2


def test_hop_distance_unreachable_and_unknown():
    g = CategoryGraph([0, 1, 2], [(0, 1)])
    assert g.hop_distance(0, 2) is None
    with pytest.raises(GraphError):
        g.hop_distance(0, 99)


def test_hop_distance_matches_networkx_bfs():
    rng = np.random.default_rng(5)
    for _ in range(20):
        g = random_dag(rng, 10, p=0.2)
        ref = nx.Graph()
        ref.add_nodes_from(g.nodes)
        ref.add_edges_from(g.arcs)
        lengths = dict(nx.all_pairs_shortest_path_length(ref))
        for a in g.nodes:
            for b in g.nodes:
                assert g.hop_distance(a, b) == lengths[a].get(b)


# ---------------------------------------------------------------------------
# sampling

def test_random_sampling_exhausts_and_is_deterministic():
    g = chain(6)
    full = sample_random(g, 6, np.random.default_rng(0))
    assert sorted(full) == list(g.nodes)
    a = sample_random(g, 3, np.random.default_rng(42))
    b = sample_random(g, 3, np.random.default_rng(42))
    assert a == b and len(set(a)) == 3
    with pytest.raises(ValueError):
        sample_random(g, 7, np.random.default_rng(0))


def test_random_sampling_is_uniform():
    g = CategoryGraph(range(4))
    rng = np.random.default_rng(0)
    counts = Counter(sample_random(g, 1, rng)[0] for _ in range(10_000))
    for y in range(4):
        assert abs(counts[y] / 10_000 - 0.25) < 0.02


def test_random_sampling_respects_eligible():
    g = chain(6)
    rng = np.random.default_rng(1)
    for _ in range(50):
        assert set(sample_random(g, 2, rng, eligible=[1, 3, 5])) <= {1, 3, 5}


def test_snowball_singleton():
    picks, fb = sample_snowball(chain(5), 1, 1, np.random.default_rng(3))
    assert len(picks) == 1 and fb == [False]


def test_snowball_on_chain_yields_contiguous_segments():
    g = chain(6)
    outcomes = set()
    for seed in range(400):
        picks, fb = sample_snowball(g, 3, 1, np.random.default_rng(seed))
        assert not any(fb)
        outcomes.add(tuple(sorted(picks)))
    segments = {tuple(range(i, i + 3)) for i in range(4)}
    assert outcomes == segments


def test_snowball_hop_audit_on_random_dags():
    rng = np.random.default_rng(11)
    for _ in range(50):
        g = random_dag(rng, 15, p=0.12)
        k_n = int(rng.integers(1, 3))
        picks, fb = sample_snowball(g, 5, k_n, rng)
        assert len(set(picks)) == 5
        for i in range(1, 5):
            if fb[i]:
                continue
            d = [g.hop_distance(picks[i], p) for p in picks[:i]]
            assert min(x for x in d if x is not None) <= k_n


def test_snowball_falls_back_when_frontier_empty():
    g = CategoryGraph(range(4), [(0, 1)])
    picks, fb = sample_snowball(g, 4, 1, np.random.default_rng(0))
    assert sorted(picks) == [0, 1, 2, 3]
    assert any(fb)


def test_snowball_argument_errors():
    g = chain(3)
    with pytest.raises(ValueError):
        sample_snowball(g, 4, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_snowball(g, 2, 0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# pathways

def brute_force_max_forest(nodes, weighted):
    """Best total weight over every spanning forest of the graph."""
    n_comp = nx.number_connected_components(_nx(nodes, weighted))
    need = len(nodes) - n_comp
    best = None
    for subset in itertools.combinations(weighted, need):
        h = _nx(nodes, subset)
        if nx.is_forest(h) and nx.number_connected_components(h) == n_comp:
            w = sum(e[2] for e in subset)
            best = w if best is None else max(best, w)
    return 0.0 if best is None else best


def _nx(nodes, edges):
    h = nx.Graph()
    h.add_nodes_from(nodes)
    h.add_edges_from((a, b) for a, b, *_ in edges)
    return h


def test_single_isolated_task_class_is_a_singleton_tree():
    g = CategoryGraph([0, 1], [])
    pw = build_pathway(g, [0], 2, PrototypeMemory(), {0: np.ones(3)})
    assert pw.members == (0,) and pw.edges == ()


def test_triangle_keeps_two_heaviest_edges():
    forest = maximum_spanning_forest([0, 1, 2], [(0, 1, 0.9), (0, 2, 0.5), (1, 2, 0.2)])
    assert sorted(w for *_, w in forest) == [0.5, 0.9]


def test_mst_tie_break_is_deterministic():
    forest = maximum_spanning_forest([0, 1, 2], [(1, 2, 0.5), (0, 2, 0.5), (0, 1, 0.5)])
    assert forest == [(0, 1, 0.5), (0, 2, 0.5)]


def test_pathway_total_weight_matches_exhaustive_enumeration():
    rng = np.random.default_rng(2024)
    for _ in range(40):
        n = int(rng.integers(2, 8))
        g = random_dag(rng, n, p=0.5)
        protos = {y: rng.normal(size=4) for y in g.nodes}
        task = sorted(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist())
        pw = build_pathway(g, task, n, memory_with(protos))
        comp = set()
        ref = _nx(g.nodes, g.arcs)
        for y in task:
            comp |= nx.node_connected_component(ref, y)
        weighted = [(p, c, float(protos[p] @ protos[c] / np.linalg.norm(protos[p]) / np.linalg.norm(protos[c])))
                    for p, c in g.arcs if p in comp and c in comp]
        assert set(pw.members) == comp
        assert pw.total_weight() == pytest.approx(brute_force_max_forest(sorted(comp), weighted), abs=1e-12)
        assert nx.is_forest(_nx(pw.members, pw.edges))
        assert pw.n_components() == nx.number_connected_components(_nx(sorted(comp), weighted))


def test_pathway_respects_hop_radius_and_memory():
    g = chain(6)
    protos = {y: np.array([1.0, 0.1 * y]) for y in range(6) if y != 4}
    pw = build_pathway(g, [2], 2, memory_with(protos))
    assert pw.members == (0, 1, 2, 3)
    # 4 has no memory prototype, so 5 is unreachable through it
    pw = build_pathway(g, [3], 3, memory_with(protos))
    assert pw.members == (0, 1, 2, 3)


def test_pathway_uses_task_protos_for_classes_outside_memory():
    g = CategoryGraph(arcs=[(0, 1), (0, 2), (1, 2)])
    mem = memory_with({0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0])})
    pw = build_pathway(g, [2], 1, mem, {2: np.array([1.0, 0.05])})
    # 2 is near 0, far from 1: the (0,2) edge must be kept
    assert (0, 2) in {(p, c) for p, c, _ in pw.edges}
    assert all(p < c for p, c, _ in pw.edges)


def test_pathway_without_mst_keeps_all_induced_arcs():
    g = CategoryGraph(arcs=[(0, 1), (0, 2), (1, 2)])
    mem = memory_with({y: np.random.default_rng(y).normal(size=3) for y in range(3)})
    assert len(build_pathway(g, [0], 2, mem, use_mst=False).edges) == 3
    assert len(build_pathway(g, [0], 2, mem).edges) == 2


# ---------------------------------------------------------------------------
# attaching unseen classes

def test_attach_single_training_class():
    g = CategoryGraph([0])
    g2 = attach_test_classes(g, {9: np.array([1.0, 2.0])}, {0: np.array([-1.0, 0.5])}, 1)
    assert (9, 0) in g2.arcs and g.nodes == (0,)


def test_attach_picks_identical_prototype():
    rng = np.random.default_rng(0)
    train = {y: rng.normal(size=5) for y in range(8)}
    g = CategoryGraph(range(8), [(0, y) for y in range(1, 8)])
    g2 = attach_test_classes(g, {20: train[5].copy()}, train, 1)
    assert g2.children[20] == (5,)


def test_attach_matches_full_sort_oracle():
    rng = np.random.default_rng(3)
    train = {y: rng.normal(size=6) for y in range(10)}
    g = CategoryGraph(range(10), [(0, y) for y in range(1, 10)])
    tests = {100 + i: rng.normal(size=6) for i in range(5)}
    g2 = attach_test_classes(g, tests, train, 2)
    for t, v in tests.items():
        sims = sorted(((-float(v @ train[y]) / np.linalg.norm(v) / np.linalg.norm(train[y]), y) for y in train))
        assert set(g2.children[t]) == {sims[0][1], sims[1][1]}
        assert g2.parents[t] == ()
    # training adjacency untouched, exactly k_c arcs per test class
    for y in range(10):
        assert set(g2.parents[y]) - set(tests) == set(g.parents[y])
        assert g2.children[y] == g.children[y]
    assert len(g2.arcs) == len(g.arcs) + 2 * len(tests)


def test_attach_errors():
    g = CategoryGraph([0, 1])
    with pytest.raises(GraphError):
        attach_test_classes(g, {5: np.ones(2)}, {}, 1)
    with pytest.raises(GraphError):
        attach_test_classes(g, {1: np.ones(2)}, {0: np.ones(2)}, 1)
