"""Episodic GPN training loop with the auxiliary-task curriculum."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericDomainError, ParameterStore, Tape, Var
from .encoder import EncoderConfig, aux_loss, embed, embed_array, init_aux_head, init_encoder
from .kvconfig import dump_kv, load_dataclass
from .memory import PrototypeMemory
from .propagation import (
    PropagationConfig,
    assemble_state,
    bind_heads,
    canonical_variant,
    class_means,
    init_propagation,
    run_propagation,
    task_prototypes,
)
from .taxonomy import CategoryGraph, PropagationPathway, build_pathway, sample_random, sample_snowball

log = logging.getLogger(__name__)

SAMPLING_MIXES = ("SR-S", "S-S", "R-S")
AUX_MODES = ("anneal", "off", "always")


@dataclass(frozen=True)
class TrainConfig:
    tau_total: int = 20000
    m: int = 3
    n_way: int = 5
    k_shot: int = 1
    query_per_class: int = 15
    k_n: int = 5
    sampling_mix: str = "SR-S"
    snowball_share: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 1e-5
    lr_decay_factor: float = 0.9
    lr_decay_interval: int = 1000
    lr_decay_start: int = 2000
    aux_batch: int = 128
    aux_mode: str = "anneal"
    use_mst: bool = True
    memory_cap: int = 64
    memory_strict: bool = False
    hidden_dims: tuple[int, ...] = ()
    embed_dim: int = 32
    t_steps: int = 2
    heads: int = 5
    gamma: float = 10.0
    variant: str = "N->C"
    attention: str = "multiplicative"
    normalize_attention: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.tau_total < 1:
            raise ValueError("tau_total must be >= 1")
        if self.n_way < 2:
            raise ValueError("n_way must be >= 2")
        if self.k_shot < 1 or self.query_per_class < 1:
            raise ValueError("k_shot and query_per_class must be >= 1")
        if self.m < 1 or self.k_n < 1 or self.aux_batch < 1:
            raise ValueError("m, k_n and aux_batch must be >= 1")
        if self.sampling_mix not in SAMPLING_MIXES:
            raise ValueError(f"sampling_mix must be one of {SAMPLING_MIXES}")
        if self.aux_mode not in AUX_MODES:
            raise ValueError(f"aux_mode must be one of {AUX_MODES}")
        if not 0.0 <= self.snowball_share <= 1.0:
            raise ValueError("snowball_share must lie in [0, 1]")
        if self.lr_decay_interval < 1:
            raise ValueError("lr_decay_interval must be >= 1")
        self.propagation  # validates the propagation fields

    @property
    def propagation(self) -> PropagationConfig:
        return PropagationConfig(
            t_steps=self.t_steps, heads=self.heads, gamma=self.gamma, lam=0.0,
            variant=self.variant, attention=self.attention,
            normalize_attention=self.normalize_attention,
        )

    def encoder(self, input_dim: int) -> EncoderConfig:
        return EncoderConfig(input_dim, self.hidden_dims, self.embed_dim)


def load_config(path: str | os.PathLike, **overrides) -> TrainConfig:
    return load_dataclass(TrainConfig, path, **overrides)


# ---------------------------------------------------------------------------
# schedules

def curriculum_aux_prob(tau: float, tau_total: float) -> float:
    """Probability of an auxiliary supervised step at episode ``tau``."""
    return 0.9 ** (20.0 * tau / tau_total)


def lambda_schedule(tau: float, tau_total: float) -> float:
    return 1.0 - tau / tau_total


def lr_at(cfg: TrainConfig, tau: int) -> float:
    k = max(0, tau - cfg.lr_decay_start) // cfg.lr_decay_interval
    return cfg.lr * cfg.lr_decay_factor ** k


# ---------------------------------------------------------------------------
# model bundle

@dataclass
class GPNModel:
    store: ParameterStore
    encoder: EncoderConfig
    propagation: PropagationConfig
    train_classes: tuple[int, ...]

    def embed_array(self, x) -> np.ndarray:
        return embed_array(self.store, self.encoder, x)


def init_model(cfg: TrainConfig, input_dim: int, train_classes: Sequence[int],
               seed: int | None = None) -> GPNModel:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed if seed is None else seed, 11]))
    enc = cfg.encoder(input_dim)
    store = ParameterStore()
    init_encoder(store, enc, rng)
    init_propagation(store, cfg.propagation, enc.embed_dim, rng)
    init_aux_head(store, enc.embed_dim, len(train_classes), rng)
    return GPNModel(store, enc, cfg.propagation, tuple(sorted(train_classes)))


# ---------------------------------------------------------------------------
# tasks

@dataclass
class FewShotTask:
    classes: list[int]
    support_x: np.ndarray
    query_x: np.ndarray
    support_idx: np.ndarray
    query_idx: np.ndarray
    sampler: str = "random"
    fallback: bool = False

    @property
    def n_way(self) -> int:
        return len(self.classes)

    @property
    def query_labels(self) -> np.ndarray:
        q = self.query_x.shape[1]
        return np.repeat(np.arange(len(self.classes)), q)


def eligible_classes(pools: Mapping[int, np.ndarray], classes: Iterable[int], need: int) -> list[int]:
    return sorted(y for y in classes if y in pools and len(pools[y]) >= need)


def draw_task(classes: Sequence[int], pools: Mapping[int, np.ndarray], k_shot: int,
              query_per_class: int, rng: np.random.Generator, sampler: str = "random",
              fallback: bool = False) -> FewShotTask:
    """Support and query rows drawn without replacement per class."""
    s_idx, q_idx, s_x, q_x = [], [], [], []
    for y in classes:
        pool = pools[y]
        pick = rng.choice(len(pool), size=k_shot + query_per_class, replace=False)
        s_idx.append(pick[:k_shot])
        q_idx.append(pick[k_shot:])
        s_x.append(pool[pick[:k_shot]])
        q_x.append(pool[pick[k_shot:]])
    return FewShotTask(list(classes), np.stack(s_x), np.stack(q_x), np.stack(s_idx), np.stack(q_idx),
                       sampler, fallback)


def sample_task(g: CategoryGraph, pools: Mapping[int, np.ndarray], cfg: TrainConfig,
                rng: np.random.Generator, classes: Iterable[int] | None = None) -> FewShotTask:
    """One training task; classes without K+Q samples are not eligible."""
    pool_ids = eligible_classes(pools, pools if classes is None else classes,
                                cfg.k_shot + cfg.query_per_class)
    mix = cfg.sampling_mix
    if mix == "SR-S":
        use_snowball = rng.random() < cfg.snowball_share
    else:
        use_snowball = mix == "S-S"
    if use_snowball:
        picks, fb = sample_snowball(g, cfg.n_way, cfg.k_n, rng, pool_ids)
        return draw_task(picks, pools, cfg.k_shot, cfg.query_per_class, rng, "snowball", any(fb))
    picks = sample_random(g, cfg.n_way, rng, pool_ids)
    return draw_task(picks, pools, cfg.k_shot, cfg.query_per_class, rng, "random")


# ---------------------------------------------------------------------------
# episode

@dataclass
class EpisodeResult:
    loss: Var
    pathway: PropagationPathway
    prototypes: Var
    query_emb: Var


def task_forward(tape: Tape, model: GPNModel, g: CategoryGraph, task: FewShotTask,
                 memory: PrototypeMemory, lam: float, use_mst: bool = True,
                 propagate: bool = True) -> EpisodeResult:
    """Prototypes and query loss for one task (lines 10-16 of the training loop)."""
    n, k, dim = task.support_x.shape
    q = task.query_x.shape[1]
    x = np.concatenate([task.support_x.reshape(n * k, dim), task.query_x.reshape(n * q, dim)])
    emb = embed(tape, model.store, model.encoder, x)
    groups = [list(range(i * k, (i + 1) * k)) for i in range(n)]
    p0 = class_means(emb, groups)
    query = ad.take_rows(emb, np.arange(n * k, n * k + n * q))
    protos = {y: p0.value[i] for i, y in enumerate(task.classes)}
    if propagate and lam < 1.0 and model.propagation.t_steps > 0:
        pathway = build_pathway(g, task.classes, model.propagation.t_steps, memory, protos, use_mst)
        state = assemble_state(tape, pathway, task.classes, p0, memory)
        heads = bind_heads(tape, model.store, model.propagation)
        run_propagation(state, pathway, model.propagation, heads, lam)
        final = task_prototypes(state, task.classes)
    else:
        pathway = PropagationPathway(tuple(sorted(task.classes)), (), tuple(task.classes))
        final = p0
    logits = ad.mul(ad.sqdist_matrix(query, final), -1.0)
    loss = ad.cross_entropy(logits, task.query_labels)
    return EpisodeResult(loss, pathway, final, query)


def episode_loss(task: FewShotTask, g: CategoryGraph, model: GPNModel, memory: PrototypeMemory,
                 lam: float, use_mst: bool = True, tape: Tape | None = None) -> Var:
    """Mean negative log posterior of the task's queries."""
    tape = tape or Tape()
    return task_forward(tape, model, g, task, memory, lam, use_mst).loss


# ---------------------------------------------------------------------------
# training

class TrainingAborted(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainResult:
    model: GPNModel
    memory: PrototypeMemory
    log: list[dict]
    config: TrainConfig


def _aux_pool(pools: Mapping[int, np.ndarray], train_classes: Sequence[int]):
    xs, ys = [], []
    for label, y in enumerate(train_classes):
        xs.append(pools[y])
        ys.append(np.full(len(pools[y]), label))
    return np.concatenate(xs), np.concatenate(ys)


def train(g: CategoryGraph, pools: Mapping[int, np.ndarray], cfg: TrainConfig,
          train_classes: Sequence[int] | None = None,
          on_episode: Callable[[dict], None] | None = None) -> TrainResult:
    """Run ``tau_total`` episodes; returns parameters, memory and the per-episode log."""
    train_classes = tuple(sorted(pools if train_classes is None else train_classes))
    missing = [y for y in train_classes if y not in pools or y not in g]
    if missing:
        raise ValueError(f"training classes without data or graph node: {missing[:10]}")
    need = cfg.k_shot + cfg.query_per_class
    if len(eligible_classes(pools, train_classes, need)) < cfg.n_way:
        raise ValueError(f"fewer than {cfg.n_way} training classes have {need} samples")
    dim = next(iter(pools.values())).shape[1]
    model = init_model(cfg, dim, train_classes)
    memory = PrototypeMemory(allowed=train_classes)
    train_pools = {y: pools[y] for y in train_classes}
    aux_x, aux_y = _aux_pool(pools, train_classes)

    streams = np.random.SeedSequence([cfg.seed, 23]).spawn(4)
    alpha_rng, task_rng, aux_rng, mem_rng = (np.random.default_rng(s) for s in streams)
    seen: set[int] = set()
    records: list[dict] = []

    def embed_fn(x):
        return model.embed_array(x)

    for tau in range(1, cfg.tau_total + 1):
        if tau % cfg.m == 0:
            refresh_ids = sorted(seen) if cfg.memory_strict else None
            memory.refresh(embed_fn, train_pools, tau, mem_rng, cfg.memory_cap, refresh_ids)
        alpha = alpha_rng.random()
        if cfg.aux_mode == "always":
            p_aux = 1.0
        elif cfg.aux_mode == "off":
            p_aux = 0.0
        else:
            p_aux = curriculum_aux_prob(tau, cfg.tau_total)
        lam = lambda_schedule(tau, cfg.tau_total)
        lr = lr_at(cfg, tau)
        model.store.zero_grad()
        tape = Tape()
        task = None
        try:
            if alpha < p_aux:
                branch = "aux"
                pick = aux_rng.choice(len(aux_x), size=min(cfg.aux_batch, len(aux_x)), replace=False)
                loss = aux_loss(tape, model.store, model.encoder, aux_x[pick], aux_y[pick])
            else:
                branch = "episode"
                task = sample_task(g, train_pools, cfg, task_rng)
                seen.update(task.classes)
                loss = task_forward(tape, model, g, task, memory, lam, cfg.use_mst).loss
            loss_value = float(loss.value)
            if not math.isfinite(loss_value):
                raise NumericDomainError(f"non-finite loss {loss_value}")
            tape.backward(loss)
        except NumericDomainError as exc:
            dump = {
                "episode": tau, "branch": "aux" if task is None else "episode", "lambda": lam,
                "lr": lr, "error": str(exc),
                "task_classes": None if task is None else list(task.classes),
                "support_idx": None if task is None else task.support_idx.tolist(),
                "query_idx": None if task is None else task.query_idx.tolist(),
                "memory_classes": memory.classes(),
            }
            raise TrainingAborted(f"numeric failure at episode {tau}: {exc}", dump) from exc
        ad.adam_step(model.store, lr, weight_decay=cfg.weight_decay)
        rec = {
            "episode": tau,
            "branch": branch,
            "loss": loss_value,
            "lambda": lam,
            "lr": lr,
            "task_classes": [] if task is None else [int(y) for y in task.classes],
        }
        if task is not None:
            rec["sampler"] = task.sampler
            rec["fallback"] = task.fallback
        records.append(rec)
        if on_episode is not None:
            on_episode(rec)
    return TrainResult(model, memory, records, cfg)


def write_log(records: Iterable[dict], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def save_config(cfg: TrainConfig, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_kv(cfg))
