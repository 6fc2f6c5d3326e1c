"""Synthetic hierarchical few-shot benchmarks.

A random rooted DAG stands in for the WordNet hierarchy. Every node gets a
latent centre that drifts away from its parent's; leaves emit Gaussian
samples around their centre and an internal class reuses samples of its
descendant leaves. Train/test splits are drawn so that each test class sits
at a controlled hop distance from the nearest training class.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kvconfig import dump_kv, load_dataclass
from .taxonomy import CategoryGraph, read_graph, write_graph

REGIMES = ("close", "far")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchSpec:
    depth: int = 6
    branching: tuple[float, float] = (1.8, 2.9)
    feature_dim: int = 20
    leaf_cluster_spread: float = 1.0
    class_drift: float = 4.0
    drift_decay: float = 0.4
    samples_per_class: int = 100
    close_dist_range: tuple[int, int] = (1, 4)
    far_dist_range: tuple[int, int] = (5, 10)
    n_train_classes: int = 80
    n_test_classes: int = 15
    extra_parent_prob: float = 0.0
    max_attempts: int = 200
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "branching", tuple(float(b) for b in self.branching))
        object.__setattr__(self, "close_dist_range", tuple(int(b) for b in self.close_dist_range))
        object.__setattr__(self, "far_dist_range", tuple(int(b) for b in self.far_dist_range))
        self.validate(min_depth=1)

    def validate(self, min_depth: int = 3) -> None:
        """Full benchmarks need depth >= 3; a bare taxonomy only needs a root."""
        if self.depth < min_depth:
            raise ValueError(f"depth must be >= {min_depth} (got {self.depth})")
        lo, hi = self.branching
        if not 1.0 <= lo <= hi:
            raise ValueError(f"branching range must satisfy 1 <= lo <= hi, got {self.branching}")
        for name in ("close_dist_range", "far_dist_range"):
            a, b = getattr(self, name)
            if not 1 <= a <= b:
                raise ValueError(f"{name} must be a non-empty range of positive hops, got {(a, b)}")
        if self.feature_dim < 1 or self.samples_per_class < 1:
            raise ValueError("feature_dim and samples_per_class must be >= 1")
        if self.leaf_cluster_spread < 0 or self.class_drift < 0:
            raise ValueError("spreads must be non-negative")
        if not 0.0 < self.drift_decay <= 1.0:
            raise ValueError("drift_decay must lie in (0, 1]")
        if self.n_train_classes < 1 or self.n_test_classes < 1:
            raise ValueError("need at least one training and one test class")
        if not 0.0 <= self.extra_parent_prob <= 1.0:
            raise ValueError("extra_parent_prob must lie in [0, 1]")


@dataclass
class SyntheticBenchmark:
    graph: CategoryGraph
    pools: dict[int, np.ndarray]
    train: tuple[int, ...]
    test: dict[str, tuple[int, ...]]
    spec: BenchSpec | None = None
    depth_of: dict[int, int] = field(default_factory=dict)

    def split(self, regime: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
        regime = regime.lower()
        if regime not in self.test:
            raise KeyError(f"benchmark has no {regime!r} split")
        return self.train, self.test[regime]


# ---------------------------------------------------------------------------
# generation

def _stochastic_round(x: float, rng: np.random.Generator) -> int:
    base = int(np.floor(x))
    return base + int(rng.random() < x - base)


def gen_taxonomy(spec: BenchSpec, rng: np.random.Generator) -> tuple[CategoryGraph, dict[int, int]]:
    """Level-by-level random DAG; returns the graph and each node's level.

    Child counts are ``Uniform(lo, hi)`` rounded stochastically, so every
    internal node has at least one child and all leaves sit on the last level.
    """
    lo, hi = spec.branching
    level = [0]
    depth_of = {0: 0}
    arcs: list[tuple[int, int]] = []
    next_id = 1
    for d in range(1, spec.depth):
        new_level = []
        for parent in level:
            for _ in range(_stochastic_round(rng.uniform(lo, hi), rng)):
                arcs.append((parent, next_id))
                depth_of[next_id] = d
                new_level.append(next_id)
                next_id += 1
        if spec.extra_parent_prob > 0 and len(level) > 1:
            for child in new_level:
                if rng.random() < spec.extra_parent_prob:
                    others = [p for p in level if (p, child) not in arcs]
                    if others:
                        arcs.append((others[int(rng.integers(len(others)))], child))
        level = new_level
    return CategoryGraph(range(next_id), arcs), depth_of


def gen_features(graph: CategoryGraph, spec: BenchSpec,
                 rng: np.random.Generator) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Latent centres and per-class sample pools.

    Returns ``(centres, pools)``. Internal-class pools are uniform draws from
    the union of their descendant leaves' samples.
    """
    d = spec.feature_dim
    centres: dict[int, np.ndarray] = {}
    level: dict[int, int] = {}
    for y in graph.topological_order():
        parents = graph.parents[y]
        if not parents:
            level[y], centres[y] = 0, np.zeros(d)
            continue
        level[y] = 1 + max(level[p] for p in parents)
        sigma = spec.class_drift * spec.drift_decay ** (level[y] - 1)
        base = np.mean([centres[p] for p in parents], axis=0)
        centres[y] = base + rng.normal(0.0, sigma, size=d)
    pools: dict[int, np.ndarray] = {}
    leaves = graph.leaves()
    for y in leaves:
        pools[y] = centres[y] + rng.normal(0.0, spec.leaf_cluster_spread, size=(spec.samples_per_class, d))
    for y in graph.nodes:
        if y in pools:
            continue
        desc = sorted(z for z in graph.descendants(y) if z in pools and not graph.children[z])
        bank = np.concatenate([pools[z] for z in desc], axis=0)
        pick = rng.choice(len(bank), size=spec.samples_per_class, replace=len(bank) < spec.samples_per_class)
        pools[y] = bank[np.sort(pick)]
    return centres, pools


def min_distances(graph: CategoryGraph, train) -> dict[int, int]:
    """Hop distance from every reachable node to its nearest training class."""
    return graph.distances_from(sorted(train))


def _ancestors(graph: CategoryGraph, y: int) -> set[int]:
    seen: set[int] = set()
    stack = list(graph.parents[y])
    while stack:
        z = stack.pop()
        if z not in seen:
            seen.add(z)
            stack.extend(graph.parents[z])
    return seen


def _candidates(graph: CategoryGraph, train, lo: int, hi: int) -> list[int]:
    dist = min_distances(graph, train)
    tr = set(train)
    return [y for y in graph.nodes if y not in tr and y in dist and lo <= dist[y] <= hi]


def split_training(graph: CategoryGraph, spec: BenchSpec, rng: np.random.Generator) -> tuple[int, ...]:
    """Training classes leaving room for both regimes' test classes.

    Each attempt withholds one region (a node's subtree plus its ancestors)
    from training so that far test classes can exist, then samples the
    training set uniformly from the rest.
    """
    anchors = [y for y in graph.nodes if graph.parents[y] and graph.children[y]]
    if not anchors:
        raise GenerationError("graph too shallow to hold out a region")
    for _ in range(spec.max_attempts):
        anchor = anchors[int(rng.integers(len(anchors)))]
        blocked = {anchor} | graph.descendants(anchor) | _ancestors(graph, anchor)
        open_nodes = [y for y in graph.nodes if y not in blocked]
        if len(open_nodes) < spec.n_train_classes:
            continue
        pick = rng.choice(len(open_nodes), size=spec.n_train_classes, replace=False)
        train = tuple(sorted(open_nodes[i] for i in pick))
        if (len(_candidates(graph, train, *spec.close_dist_range)) >= spec.n_test_classes
                and len(_candidates(graph, train, *spec.far_dist_range)) >= spec.n_test_classes):
            return train
    raise GenerationError(
        f"no training split admits {spec.n_test_classes} test classes per regime after "
        f"{spec.max_attempts} attempts; lower n_train_classes/n_test_classes or deepen the graph"
    )


def split_classes(graph: CategoryGraph, spec: BenchSpec, regime: str, rng: np.random.Generator,
                  train: tuple[int, ...] | None = None) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(train, test) for one regime; test classes obey the regime's distance range."""
    regime = regime.lower()
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    lo, hi = spec.close_dist_range if regime == "close" else spec.far_dist_range
    attempts = 0
    while True:
        tr = train if train is not None else split_training(graph, spec, rng)
        cands = _candidates(graph, tr, lo, hi)
        if len(cands) >= spec.n_test_classes:
            pick = rng.choice(len(cands), size=spec.n_test_classes, replace=False)
            return tuple(tr), tuple(sorted(cands[i] for i in pick))
        attempts += 1
        if train is not None or attempts >= spec.max_attempts:
            raise GenerationError(
                f"{regime}: only {len(cands)} classes at distance {lo}..{hi} from the training "
                f"set, need {spec.n_test_classes}; adjust the benchmark settings"
            )


def generate(spec: BenchSpec) -> SyntheticBenchmark:
    """Graph, pools and both regimes' splits; one seed fixes everything."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    g_rng, f_rng, t_rng, c_rng, r_rng = (np.random.default_rng(s) for s in root.spawn(5))
    graph, depth_of = gen_taxonomy(spec, g_rng)
    _, pools = gen_features(graph, spec, f_rng)
    train = split_training(graph, spec, t_rng)
    _, close = split_classes(graph, spec, "close", c_rng, train)
    _, far = split_classes(graph, spec, "far", r_rng, train)
    return SyntheticBenchmark(graph, pools, train, {"close": close, "far": far}, spec, depth_of)


# ---------------------------------------------------------------------------
# directory layout

def save_benchmark(bench: SyntheticBenchmark, out: str | os.PathLike) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_graph(out / "taxonomy.edges", bench.graph)
    with open(out / "features.csv", "w", encoding="utf-8", newline="\n") as fh:
        dim = next(iter(bench.pools.values())).shape[1]
        fh.write("class_id,sample_index," + ",".join(f"f{i}" for i in range(dim)) + "\n")
        for y in sorted(bench.pools):
            for i, row in enumerate(bench.pools[y]):
                fh.write(f"{y},{i}," + ",".join(repr(float(v)) for v in row) + "\n")
    for regime, test in bench.test.items():
        with open(out / f"split_{regime}.txt", "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(f"train {y}\n" for y in bench.train)
            fh.writelines(f"test {y}\n" for y in test)
    if bench.spec is not None:
        with open(out / "spec.txt", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(dump_kv(bench.spec))


def _read_split(path: Path) -> tuple[tuple[int, ...], tuple[int, ...]]:
    train, test = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            kind, _, ident = line.partition(" ")
            if kind == "train":
                train.append(int(ident))
            elif kind == "test":
                test.append(int(ident))
            else:
                raise ValueError(f"{path}:{lineno}: expected 'train <id>' or 'test <id>'")
    return tuple(train), tuple(test)


def load_benchmark(path: str | os.PathLike) -> SyntheticBenchmark:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"benchmark directory {path} does not exist")
    graph = read_graph(path / "taxonomy.edges")
    raw = np.loadtxt(path / "features.csv", delimiter=",", skiprows=1, ndmin=2)
    pools: dict[int, np.ndarray] = {}
    ids = raw[:, 0].astype(np.int64)
    for y in np.unique(ids):
        rows = raw[ids == y]
        rows = rows[np.argsort(rows[:, 1], kind="stable")]
        pools[int(y)] = rows[:, 2:].copy()
    train = None
    test: dict[str, tuple[int, ...]] = {}
    for regime in REGIMES:
        f = path / f"split_{regime}.txt"
        if f.exists():
            tr, te = _read_split(f)
            if train is not None and tr != train:
                raise ValueError("regime splits disagree on the training classes")
            train = tr
            test[regime] = te
    if train is None:
        raise FileNotFoundError(f"no split_<regime>.txt in {path}")
    spec = load_dataclass(BenchSpec, path / "spec.txt") if (path / "spec.txt").exists() else None
    return SyntheticBenchmark(graph, pools, train, test, spec)
