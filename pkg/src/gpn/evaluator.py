"""Test-time application of a trained GPN and accuracy reporting."""

from __future__ import annotations

import concurrent.futures
import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tape
from .memory import PrototypeMemory
from .taxonomy import CategoryGraph, attach_test_classes, sample_random, sample_snowball
from .trainer import FewShotTask, GPNModel, draw_task, eligible_classes, task_forward

MODES = ("GPN+", "GPN", "ProtoNet")
_MODE_ALIASES = {"gpn+": "GPN+", "gpnplus": "GPN+", "gpn": "GPN", "protonet": "ProtoNet",
                 "protonet-baseline": "ProtoNet", "baseline": "ProtoNet"}


class EvalConfigError(ValueError):
    pass


def canonical_mode(mode: str) -> str:
    m = _MODE_ALIASES.get(mode.lower(), mode)
    if m not in MODES:
        raise EvalConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    return m


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "GPN+"
    n_tasks: int = 600
    n_way: int = 5
    k_shot: int = 1
    query_per_class: int = 15
    sampling: str = "random"
    k_n: int = 5
    k_c: int = 2
    lambda_eval: float = 0.0
    use_mst: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        if self.sampling not in ("random", "snowball"):
            raise EvalConfigError("sampling must be 'random' or 'snowball'")
        if not 0.0 <= self.lambda_eval <= 1.0:
            raise EvalConfigError("lambda_eval must lie in [0, 1]")
        if self.n_tasks < 1 or self.n_way < 2 or self.k_shot < 1 or self.query_per_class < 1:
            raise EvalConfigError("n_tasks >= 1, n_way >= 2, k_shot >= 1, query_per_class >= 1")
        if self.k_c < 1:
            raise EvalConfigError("k_c must be >= 1")


@dataclass
class EvalReport:
    accuracies: list[float]
    mean: float
    ci95: float
    mode: str
    config: dict
    max_posterior_error: float = 0.0
    task_classes: list[list[int]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        c = self.config
        rows = [
            ("mode", self.mode),
            ("tasks", str(len(self.accuracies))),
            ("setting", f"{c['n_way']}-way {c['k_shot']}-shot, {c['sampling']} sampling"),
            ("accuracy", f"{100 * self.mean:.2f} +- {100 * self.ci95:.2f} %"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "accuracy", "classes"])
            for i, acc in enumerate(self.accuracies):
                classes = self.task_classes[i] if i < len(self.task_classes) else []
                w.writerow([i, repr(acc), " ".join(map(str, classes))])


def classify(query: np.ndarray, prototypes: Mapping[int, np.ndarray]) -> tuple[list[int], np.ndarray]:
    """Soft nearest-prototype posterior.

    Returns the class order (ascending id) and the posterior, one row per
    query. ``np.argmax`` on a row picks the smallest id among ties.
    """
    if len(prototypes) < 2:
        raise ValueError("classification needs at least two prototypes")
    ids = sorted(prototypes)
    protos = np.stack([np.asarray(prototypes[y], dtype=np.float64) for y in ids])
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    diff = q[:, None, :] - protos[None, :, :]
    logits = -(diff * diff).sum(axis=2)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    post = e / e.sum(axis=1, keepdims=True)
    return ids, post if np.ndim(query) > 1 else post[0]


def ci95(accs: Sequence[float]) -> float:
    n = len(accs)
    if n < 2:
        return 0.0
    return 1.96 * float(np.std(accs, ddof=1)) / math.sqrt(n)


def _eval_task(i: int, model: GPNModel, memory: PrototypeMemory, graph: CategoryGraph,
               base_graph: CategoryGraph, pools, test_ids: list[int], cfg: EvalConfig):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 97, i]))
    if cfg.sampling == "snowball":
        classes, _ = sample_snowball(graph, cfg.n_way, cfg.k_n, rng, test_ids)
    else:
        classes = sample_random(graph, cfg.n_way, rng, test_ids)
    task = draw_task(classes, pools, cfg.k_shot, cfg.query_per_class, rng, cfg.sampling)
    tape = Tape()
    if cfg.mode == "ProtoNet":
        res = task_forward(tape, model, graph, task, memory, 1.0, propagate=False)
    else:
        g = graph
        if cfg.mode == "GPN":
            p0 = _support_means(model, task)
            g = attach_test_classes(base_graph, dict(zip(task.classes, p0)), memory.as_dict(), cfg.k_c)
        res = task_forward(tape, model, g, task, memory, cfg.lambda_eval, cfg.use_mst)
    protos = dict(zip(task.classes, res.prototypes.value))
    ids, post = classify(res.query_emb.value, protos)
    truth = np.searchsorted(ids, np.repeat(task.classes, task.query_x.shape[1]))
    acc = float(np.mean(np.argmax(post, axis=1) == truth))
    err = float(np.max(np.abs(post.sum(axis=1) - 1.0)))
    return acc, err, [int(y) for y in task.classes]


def _support_means(model: GPNModel, task: FewShotTask) -> np.ndarray:
    n, k, dim = task.support_x.shape
    emb = model.embed_array(task.support_x.reshape(n * k, dim)).reshape(n, k, -1)
    return emb.mean(axis=1)


def evaluate(model: GPNModel, memory: PrototypeMemory, graph: CategoryGraph,
             pools: Mapping[int, np.ndarray], train_classes: Sequence[int],
             test_classes: Sequence[int], cfg: EvalConfig, threads: int | None = None) -> EvalReport:
    """Accuracy over ``cfg.n_tasks`` test tasks drawn from ``test_classes``.

    ``graph`` is the full taxonomy. GPN+ uses it as is; GPN first drops every
    test class and reattaches each task's classes by prototype similarity.
    """
    overlap = sorted(set(train_classes) & set(test_classes))
    if overlap:
        raise EvalConfigError(f"train and test classes overlap: {overlap[:10]}")
    leaked = [y for y in test_classes if memory.has(y)]
    if leaked:
        raise EvalConfigError(f"memory holds test classes {leaked[:10]}")
    test_ids = eligible_classes(pools, test_classes, cfg.k_shot + cfg.query_per_class)
    if len(test_ids) < cfg.n_way:
        raise EvalConfigError(f"only {len(test_ids)} test classes have enough samples for {cfg.n_way}-way tasks")
    if cfg.mode == "GPN" and len(memory) < cfg.k_c:
        raise EvalConfigError("GPN mode needs at least k_c training prototypes in memory")
    base_graph = graph.without(test_classes) if cfg.mode == "GPN" else graph
    if cfg.mode == "GPN+":
        missing = [y for y in test_ids if y not in graph]
        if missing:
            raise EvalConfigError(f"GPN+ needs test classes in the graph; missing {missing[:10]}")

    def run(i):
        return _eval_task(i, model, memory, graph, base_graph, pools, test_ids, cfg)

    if threads is None:
        threads = int(os.environ.get("GPN_THREADS", os.cpu_count() or 1))
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(cfg.n_tasks)))
    else:
        results = [run(i) for i in range(cfg.n_tasks)]
    accs = [r[0] for r in results]
    return EvalReport(
        accuracies=accs,
        mean=float(np.mean(accs)),
        ci95=ci95(accs),
        mode=cfg.mode,
        config=asdict(cfg),
        max_posterior_error=max(r[1] for r in results),
        task_classes=[r[2] for r in results],
    )
