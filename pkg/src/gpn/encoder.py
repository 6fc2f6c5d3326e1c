"""MLP representation model and the auxiliary linear classifier head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tape, Var


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    nonlinearity: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all encoder dims must be >= 1, got {dims}")
        if self.nonlinearity != "relu":
            raise ValueError(f"unsupported nonlinearity {self.nonlinearity!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim)
        return list(zip(dims[:-1], dims[1:]))


def _uniform_fan_in(rng: np.random.Generator, fan_out: int, fan_in: int):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)), rng.uniform(-bound, bound, size=fan_out)


def init_encoder(store: ParameterStore, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    for i, (d_in, d_out) in enumerate(cfg.layer_dims):
        w, b = _uniform_fan_in(rng, d_out, d_in)
        store.add(f"enc/w{i}", w)
        store.add(f"enc/b{i}", b)


def init_aux_head(store: ParameterStore, embed_dim: int, n_classes: int,
                  rng: np.random.Generator) -> None:
    w, b = _uniform_fan_in(rng, n_classes, embed_dim)
    store.add("fc/w", w)
    store.add("fc/b", b)


def _check_input(x: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.input_dim or x.ndim not in (1, 2):
        raise ValueError(f"expected input of width {cfg.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("encoder input contains NaN or Inf")
    return x


def embed(tape: Tape, store: ParameterStore, cfg: EncoderConfig, x) -> Var:
    """Differentiable forward pass for a sample or a batch of rows."""
    h = tape.const(_check_input(x, cfg))
    n_layers = len(cfg.layer_dims)
    for i in range(n_layers):
        h = ad.linear(h, tape.param(store, f"enc/w{i}"), tape.param(store, f"enc/b{i}"))
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def embed_array(store: ParameterStore, cfg: EncoderConfig, x) -> np.ndarray:
    """Forward pass without recording; used by memory refresh and evaluation."""
    h = _check_input(x, cfg)
    n_layers = len(cfg.layer_dims)
    for i in range(n_layers):
        h = h @ store[f"enc/w{i}"].T + store[f"enc/b{i}"]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def aux_loss(tape: Tape, store: ParameterStore, cfg: EncoderConfig, x, labels) -> Var:
    """Mean softmax cross-entropy of the linear head over a labelled batch."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size == 0:
        raise ValueError("aux_loss needs a non-empty batch")
    n_classes = store["fc/w"].shape[0]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"aux labels must lie in [0, {n_classes})")
    z = embed(tape, store, cfg, np.atleast_2d(x))
    logits = ad.linear(z, tape.param(store, "fc/w"), tape.param(store, "fc/b"))
    return ad.cross_entropy(logits, labels)
