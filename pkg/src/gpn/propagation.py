"""Gated multi-head prototype propagation over a pathway.

All classes on the pathway are updated at once from the previous step's
matrix, so there is no per-class iteration order to depend on. Members are
always laid out in ascending class id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericDomainError, ParameterStore, Tape, Var
from .taxonomy import PropagationPathway

VARIANTS = ("N->C", "F->C", "C->C", "B->P", "M->P")
ATTENTIONS = ("multiplicative", "additive")

_VARIANT_ALIASES = {
    "NC": "N->C", "N→C": "N->C",
    "FC": "F->C", "F→C": "F->C",
    "CC": "C->C", "C→C": "C->C",
    "BP": "B->P", "B→P": "B->P",
    "MP": "M->P", "M→P": "M->P",
}


def canonical_variant(name: str) -> str:
    name = _VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ValueError(f"unknown propagation variant {name!r}; expected one of {VARIANTS}")
    return name


@dataclass(frozen=True)
class PropagationConfig:
    t_steps: int = 2
    heads: int = 5
    gamma: float = 10.0
    lam: float = 0.0
    variant: str = "N->C"
    attention: str = "multiplicative"
    normalize_attention: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.t_steps < 0:
            raise ValueError("t_steps must be >= 0")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.attention not in ATTENTIONS:
            raise ValueError(f"attention must be one of {ATTENTIONS}")


@dataclass
class HeadParams:
    h1: Var
    h2: Var
    w: Var | None = None


def init_propagation(store: ParameterStore, cfg: PropagationConfig, embed_dim: int,
                     rng: np.random.Generator) -> None:
    """Heads start near the identity so early attention is plain cosine."""
    d = embed_dim
    bound = 0.5 / np.sqrt(d)
    for i in range(cfg.heads):
        store.add(f"prop/h1/{i}", np.eye(d) + rng.uniform(-bound, bound, size=(d, d)))
        store.add(f"prop/h2/{i}", np.eye(d) + rng.uniform(-bound, bound, size=(d, d)))
        if cfg.attention == "additive":
            store.add(f"prop/w/{i}", rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=d))


def bind_heads(tape: Tape, store: ParameterStore, cfg: PropagationConfig) -> list[HeadParams]:
    heads = []
    for i in range(cfg.heads):
        w = tape.param(store, f"prop/w/{i}") if cfg.attention == "additive" else None
        heads.append(HeadParams(tape.param(store, f"prop/h1/{i}"), tape.param(store, f"prop/h2/{i}"), w))
    return heads


# ---------------------------------------------------------------------------
# building blocks

def init_prototype(support: Var) -> Var:
    """Mean of a class's K support embeddings (rows)."""
    if support.value.ndim != 2 or support.value.shape[0] == 0:
        raise ValueError("init_prototype needs a non-empty (K, d) matrix")
    return ad.mean(support, axis=0)


def class_means(embeddings: Var, groups: Sequence[Sequence[int]]) -> Var:
    """Row ``i`` is the mean of ``embeddings[groups[i]]``."""
    n = embeddings.value.shape[0]
    avg = np.zeros((len(groups), n))
    for i, rows in enumerate(groups):
        if len(rows) == 0:
            raise ValueError(f"class {i} has no support samples")
        avg[i, list(rows)] = 1.0 / len(rows)
    if all(len(r) == 1 for r in groups):
        return ad.take_rows(embeddings, [r[0] for r in groups])
    return ad.matmul(avg, embeddings)


def attention_scores(head: HeadParams, p: Var, q: Var, attention: str = "multiplicative") -> Var:
    """``out[i, j] = a(p[i], q[j])``: cosine of ``h1(p_i)`` and ``h2(q_j)``, or
    ``w . tanh(h1 p_i + h2 q_j)`` for the additive form."""
    h1 = ad.linear(p, head.h1)
    h2 = ad.linear(q, head.h2)
    if attention == "additive":
        return ad.additive_scores(h1, h2, head.w)
    return ad.cosine_matrix(h1, h2)


def attention_weight(head: HeadParams, p: Var, q: Var) -> Var:
    """Scalar a(p, q) for two single vectors."""
    return ad.cosine(ad.linear(p, head.h1), ad.linear(q, head.h2))


def aggregate_neighbors(weights: Var, protos: Var, mask: np.ndarray) -> Var:
    """Row ``y`` of the result is ``sum_z mask[y, z] * weights[y, z] * protos[z]``."""
    return ad.matmul(ad.mul(weights, np.asarray(mask, dtype=np.float64)), protos)


def gate_mix(p0: Var, self_msg: Var, nbr_msg: Var, gamma: float) -> tuple[Var, Var]:
    """Row-wise gate between the self message and the neighbour message.

    ``g = exp(gamma*c_self) / (exp(gamma*c_self) + exp(gamma*c_nbr))`` with
    cosines taken against ``p0``; written as a sigmoid of the difference.
    """
    c_self = ad.cosine_rows(p0, self_msg)
    c_nbr = ad.cosine_rows(p0, nbr_msg)
    g = ad.sigmoid(ad.mul(ad.sub(c_self, c_nbr), float(gamma)))
    mixed = ad.add(ad.scale_rows(self_msg, g), ad.scale_rows(nbr_msg, ad.sub(1.0, g)))
    return mixed, g


def _average_heads(outs: list[Var]) -> Var:
    # anchored at the first head so identical heads reproduce it bit-exactly
    if len(outs) == 1:
        return outs[0]
    base = outs[0]
    acc = ad.sub(outs[1], base)
    for o in outs[2:]:
        acc = ad.add(acc, ad.sub(o, base))
    return ad.add(base, ad.mul(acc, 1.0 / len(outs)))


# ---------------------------------------------------------------------------
# pathway-level propagation

@dataclass
class PrototypeState:
    members: tuple[int, ...]
    p0: Var
    steps: list[Var] = field(default_factory=list)
    final: Var | None = None

    def index(self) -> dict[int, int]:
        return {y: i for i, y in enumerate(self.members)}

    @property
    def current(self) -> Var:
        return self.steps[-1] if self.steps else self.p0


def sender_mask(pathway: PropagationPathway, members: Sequence[int], direction: str) -> np.ndarray:
    """``mask[i, j]`` is 1 when ``members[j]`` sends to ``members[i]``.

    ``direction`` is ``"all"`` (neighbours), ``"parents"`` or ``"children"``.
    """
    pos = {y: i for i, y in enumerate(members)}
    mask = np.zeros((len(members), len(members)))
    for p, c, _ in pathway.edges:
        if direction in ("all", "parents"):
            mask[pos[c], pos[p]] = 1.0
        if direction in ("all", "children"):
            mask[pos[p], pos[c]] = 1.0
    return mask


def propagate_step(state: PrototypeState, mask: np.ndarray, cfg: PropagationConfig,
                   heads: Sequence[HeadParams]) -> Var:
    """One simultaneous update of every member; returns the step-(t+1) matrix."""
    p_t = state.current
    has = np.flatnonzero(mask.any(axis=1))
    if has.size == 0:
        return p_t
    none = np.flatnonzero(~mask.any(axis=1))
    order = np.concatenate([has, none])
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    p0_rows = ad.take_rows(state.p0, has)
    self_rows = ad.take_rows(p_t, has)
    rest = ad.take_rows(p_t, none) if none.size else None
    outs = []
    for head in heads:
        scores = attention_scores(head, p_t, p_t, cfg.attention)
        if cfg.normalize_attention:
            weights = ad.masked_softmax(scores, mask)
        else:
            weights = scores
        nbr = ad.take_rows(aggregate_neighbors(weights, p_t, mask), has)
        mixed, _ = gate_mix(p0_rows, self_rows, nbr, cfg.gamma)
        full = ad.concat_rows([mixed, rest]) if rest is not None else mixed
        outs.append(ad.take_rows(full, inverse))
    return _average_heads(outs)


def schedule(cfg: PropagationConfig) -> list[str]:
    """Sender direction for each propagation step of the configured variant."""
    t = cfg.t_steps
    if cfg.variant == "N->C":
        return ["all"] * t
    if cfg.variant == "F->C":
        return ["parents"] * t
    if cfg.variant == "C->C":
        return ["children"] * t
    if cfg.variant == "B->P":
        return ["parents"] * t + ["children"] * t
    return ["parents", "children"] * t


def run_propagation(state: PrototypeState, pathway: PropagationPathway, cfg: PropagationConfig,
                    heads: Sequence[HeadParams], lam: float | None = None) -> PrototypeState:
    """Propagate per the variant's schedule, then mix ``lam*P0 + (1-lam)*P_T``."""
    lam = cfg.lam if lam is None else float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    steps = schedule(cfg)
    if lam == 1.0 or not steps:
        state.final = state.p0
        return state
    masks = {d: sender_mask(pathway, state.members, d) for d in set(steps)}
    for d in steps:
        state.steps.append(propagate_step(state, masks[d], cfg, heads))
    if lam == 0.0:
        state.final = state.current
    else:
        state.final = ad.add(ad.mul(state.p0, lam), ad.mul(state.current, 1.0 - lam))
    if not np.all(np.isfinite(state.final.value)):
        raise NumericDomainError("propagation produced non-finite prototypes")
    return state


def assemble_state(tape: Tape, pathway: PropagationPathway, task_classes: Sequence[int],
                   task_p0: Var, memory) -> PrototypeState:
    """Initial prototypes for every pathway member.

    Task classes take their support means (differentiable); the rest are
    memory prototypes entering as constants.
    """
    members = pathway.members
    task_pos = {y: i for i, y in enumerate(task_classes)}
    extra = [y for y in members if y not in task_pos]
    rows = []
    for y in extra:
        vec = memory.fetch(y)
        if vec is None:
            raise KeyError(f"pathway member {y} has neither support data nor memory")
        rows.append(vec)
    stacked = task_p0
    if extra:
        stacked = ad.concat_rows([task_p0, tape.const(np.stack(rows))])
    slot = {y: i for i, y in enumerate(task_classes)}
    slot.update({y: len(task_classes) + j for j, y in enumerate(extra)})
    p0 = ad.take_rows(stacked, [slot[y] for y in members])
    return PrototypeState(tuple(members), p0)


def task_prototypes(state: PrototypeState, task_classes: Sequence[int]) -> Var:
    idx = state.index()
    return ad.take_rows(state.final, [idx[y] for y in task_classes])
