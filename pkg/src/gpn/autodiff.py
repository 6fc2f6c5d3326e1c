"""Dense float64 tensors with a reverse-mode tape.

Only the operations GPN needs are provided. Every op records a closure that
maps the output gradient to input gradients; ``Tape.backward`` replays them in
reverse creation order and accumulates into the owning ``ParameterStore``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class NumericDomainError(ArithmeticError):
    """An operation left its numeric domain (zero-norm cosine, non-finite value)."""


class TapeStateError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "tape", "parents", "vjp", "grad", "slot")

    def __init__(self, value: np.ndarray, tape: "Tape", parents=(), vjp=None, slot=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.slot = slot

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"


class ParameterStore:
    """Named parameter slots with gradient buffers and Adam moments."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.trainable: dict[str, bool] = {}
        self.touched: dict[str, bool] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.adam_t: dict[str, int] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter slot {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.trainable[name] = trainable
        self.touched[name] = False
        self.adam_m[name] = np.zeros_like(arr)
        self.adam_v[name] = np.zeros_like(arr)
        self.adam_t[name] = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for name, g in self.grads.items():
            g.fill(0.0)
            self.touched[name] = False

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name in self.values:
            out.add(name, self.values[name].copy(), self.trainable[name])
            out.grads[name] = self.grads[name].copy()
            out.touched[name] = self.touched[name]
            out.adam_m[name] = self.adam_m[name].copy()
            out.adam_v[name] = self.adam_v[name].copy()
            out.adam_t[name] = self.adam_t[name]
        return out


def adam_step(
    store: ParameterStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update over every trainable slot the last backward reached.

    Weight decay enters as ``weight_decay * theta`` added to the gradient
    (classic L2 Adam). Slots the tape never touched keep their values and
    moments, so a branch that skips a parameter group leaves it intact.
    """
    for name, theta in store.values.items():
        if not (store.trainable[name] and store.touched[name]):
            continue
        g = store.grads[name]
        if weight_decay:
            g = g + weight_decay * theta
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        store.adam_t[name] += 1
        t = store.adam_t[name]
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Tape:
    """Records ops in execution order; single use."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.consumed = False
        self._params: dict[str, Var] = {}
        self._store: ParameterStore | None = None

    def _record(self, value, parents, vjp) -> Var:
        if self.consumed:
            raise TapeStateError("tape already consumed by backward()")
        v = Var(value, self, parents, vjp)
        self.nodes.append(v)
        return v

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self)

    def param(self, store: ParameterStore, name: str) -> Var:
        if self._store is None:
            self._store = store
        elif self._store is not store:
            raise TapeStateError("a tape binds parameters from one store only")
        v = self._params.get(name)
        if v is None:
            v = Var(store.values[name], self, slot=name)
            self._params[name] = v
        return v

    def backward(self, loss: Var) -> None:
        if self.consumed:
            raise TapeStateError("backward() called twice on the same tape")
        if loss.tape is not self:
            raise TapeStateError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        self.consumed = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or node.vjp is None:
                continue
            grads = node.vjp(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not isinstance(parent, Var):
                    continue
                if parent.vjp is None and parent.slot is None:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
        if self._store is not None:
            for name, v in self._params.items():
                if v.grad is not None and self._store.trainable[name]:
                    self._store.grads[name] += v.grad
                    self._store.touched[name] = True
        self.nodes = []


# ---------------------------------------------------------------------------
# helpers

def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _is_scalar(a: np.ndarray) -> bool:
    return a.ndim == 0


def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unscalar(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    if _is_scalar(like) and g.ndim:
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_same(av, bv, "add")
    return _tape_of(a, b)._record(
        av + bv, (a, b), lambda g: (_unscalar(g, av), _unscalar(g, bv))
    )


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_same(av, bv, "sub")
    return _tape_of(a, b)._record(
        av - bv, (a, b), lambda g: (_unscalar(g, av), _unscalar(-g, bv))
    )


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_same(av, bv, "mul")
    return _tape_of(a, b)._record(
        av * bv, (a, b), lambda g: (_unscalar(g * bv, av), _unscalar(g * av, bv))
    )


def relu(x: Var) -> Var:
    mask = x.value > 0
    return x.tape._record(x.value * mask, (x,), lambda g: (g * mask,))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return x.tape._record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Var) -> Var:
    y = 1.0 / (1.0 + np.exp(-x.value))
    return x.tape._record(y, (x,), lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")

    def vjp(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _tape_of(a, b)._record(av @ bv, (a, b), vjp)


def transpose(x: Var) -> Var:
    if x.value.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return x.tape._record(x.value.T, (x,), lambda g: (g.T,))


def linear(x, w, b=None) -> Var:
    """``x @ w.T + b`` for a row vector or a batch of rows; ``w`` is (out, in)."""
    xv, wv = _val(x), _val(w)
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1] or xv.ndim not in (1, 2):
        raise ValueError(f"linear: x {xv.shape} incompatible with W {wv.shape}")
    out = xv @ wv.T
    if b is not None:
        bv = _val(b)
        if bv.shape != (wv.shape[0],):
            raise ValueError(f"linear: bias {bv.shape} != ({wv.shape[0]},)")
        out = out + bv

    def vjp(g):
        if xv.ndim == 1:
            gw = np.outer(g, xv)
            gb = g
        else:
            gw = g.T @ xv
            gb = g.sum(axis=0)
        gx = g @ wv
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _tape_of(x, w, b)._record(out, parents, vjp)


# ---------------------------------------------------------------------------
# reductions and reshaping

def total(x: Var) -> Var:
    shape = x.value.shape
    return x.tape._record(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Var, axis: int | None = None) -> Var:
    v = x.value
    if axis is None:
        n = v.size
        if n == 0:
            raise ValueError("mean of empty tensor")
        return x.tape._record(
            np.asarray(v.mean()), (x,), lambda g: (np.full(v.shape, g / n),)
        )
    if axis != 0 or v.ndim != 2:
        raise ValueError("mean supports axis=None or axis=0 on a matrix")
    n = v.shape[0]
    if n == 0:
        raise ValueError("mean of zero rows")
    return x.tape._record(
        v.mean(axis=0), (x,), lambda g: (np.broadcast_to(g / n, v.shape).copy(),)
    )


def take_rows(x: Var, idx) -> Var:
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return x.tape._record(x.value[idx], (x,), vjp)


def concat_rows(parts: Sequence) -> Var:
    vals = [_val(p) for p in parts]
    if not vals:
        raise ValueError("concat_rows of nothing")
    widths = {v.shape[1:] for v in vals}
    if len(widths) != 1:
        raise ValueError(f"concat_rows: mismatched trailing shapes {widths}")
    sizes = np.cumsum([v.shape[0] for v in vals])[:-1]
    return _tape_of(*parts)._record(
        np.concatenate(vals, axis=0), tuple(parts), lambda g: tuple(np.split(g, sizes, axis=0))
    )


def scale_rows(x: Var, s) -> Var:
    """Multiply row i of ``x`` by ``s[i]``."""
    xv, sv = _val(x), _val(s)
    if xv.ndim != 2 or sv.shape != (xv.shape[0],):
        raise ValueError(f"scale_rows: {xv.shape} vs {sv.shape}")
    return _tape_of(x, s)._record(
        xv * sv[:, None], (x, s), lambda g: (g * sv[:, None], (g * xv).sum(axis=1))
    )


# ---------------------------------------------------------------------------
# norms, similarities and distances

def _norms(v: np.ndarray, what: str) -> np.ndarray:
    n = np.sqrt((v * v).sum(axis=-1))
    if np.any(n == 0.0):
        raise NumericDomainError(f"{what}: zero-norm vector")
    return n


def normalize_rows(x: Var) -> Var:
    v = x.value
    n = _norms(v, "normalize_rows")
    u = v / n[..., None]

    def vjp(g):
        return ((g - u * (g * u).sum(axis=-1, keepdims=True)) / n[..., None],)

    return x.tape._record(u, (x,), vjp)


def row_dot(a, b) -> Var:
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape or av.ndim != 2:
        raise ValueError(f"row_dot: {av.shape} vs {bv.shape}")
    return _tape_of(a, b)._record(
        (av * bv).sum(axis=1), (a, b), lambda g: (g[:, None] * bv, g[:, None] * av)
    )


def cosine_rows(a, b) -> Var:
    """Row-wise cosine similarity of two equally shaped matrices."""
    return row_dot(normalize_rows(a), normalize_rows(b))


def cosine(p, q) -> Var:
    pv, qv = _val(p), _val(q)
    if pv.shape != qv.shape or pv.ndim != 1:
        raise ValueError(f"cosine: {pv.shape} vs {qv.shape}")
    np_, nq = _norms(pv, "cosine"), _norms(qv, "cosine")
    c = float(pv @ qv) / (np_ * nq)

    def vjp(g):
        gp = g * (qv / (np_ * nq) - c * pv / (np_ * np_))
        gq = g * (pv / (np_ * nq) - c * qv / (nq * nq))
        return gp, gq

    return _tape_of(p, q)._record(np.asarray(c), (p, q), vjp)


def cosine_matrix(a, b) -> Var:
    """``out[i, j] = cos(a[i], b[j])``."""
    return matmul(normalize_rows(a), transpose(normalize_rows(b)))


def sqdist(p, q) -> Var:
    pv, qv = _val(p), _val(q)
    if pv.shape != qv.shape:
        raise ValueError(f"sqdist: {pv.shape} vs {qv.shape}")
    d = pv - qv
    return _tape_of(p, q)._record(np.asarray((d * d).sum()), (p, q), lambda g: (2 * g * d, -2 * g * d))


def sqdist_matrix(a, b) -> Var:
    """``out[i, j] = ||a[i] - b[j]||^2`` computed from explicit differences."""
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ValueError(f"sqdist_matrix: {av.shape} vs {bv.shape}")
    diff = av[:, None, :] - bv[None, :, :]
    out = (diff * diff).sum(axis=2)

    def vjp(g):
        w = 2.0 * g[:, :, None] * diff
        return w.sum(axis=1), -w.sum(axis=0)

    return _tape_of(a, b)._record(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# softmax family

def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(v: Var, gamma: float = 1.0) -> Var:
    """Softmax of ``gamma * v`` along the last axis."""
    s = _softmax_np(gamma * v.value)

    def vjp(g):
        return (gamma * s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return v.tape._record(s, (v,), vjp)


def masked_softmax(v: Var, mask: np.ndarray) -> Var:
    """Row softmax restricted to ``mask``; rows with an empty mask give zeros."""
    mask = np.asarray(mask, dtype=bool)
    z = np.where(mask, v.value, -np.inf)
    rowmax = np.where(mask.any(axis=-1, keepdims=True), z.max(axis=-1, keepdims=True), 0.0)
    e = np.where(mask, np.exp(z - rowmax), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    s = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return v.tape._record(s, (v,), vjp)


def log_softmax(v: Var) -> Var:
    z = v.value - v.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return v.tape._record(out, (v,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Var, labels) -> Var:
    """Mean of ``-log softmax(logits)[i, labels[i]]`` over rows."""
    labels = np.asarray(labels, dtype=np.intp)
    lv = logits.value
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ValueError(f"cross_entropy: logits {lv.shape}, labels {labels.shape}")
    if lv.shape[0] == 0:
        raise ValueError("cross_entropy of an empty batch")
    if labels.min() < 0 or labels.max() >= lv.shape[1]:
        raise ValueError("cross_entropy: label out of range")
    n = lv.shape[0]
    rows = np.arange(n)
    z = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float((lse - z[rows, labels]).mean())
    probs = np.exp(z - lse[:, None])

    def vjp(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return logits.tape._record(np.asarray(loss), (logits,), vjp)


def additive_scores(h1: Var, h2: Var, w: Var) -> Var:
    """``out[i, j] = w . tanh(h1[i] + h2[j])``."""
    a, b, wv = h1.value, h2.value, w.value
    t = np.tanh(a[:, None, :] + b[None, :, :])
    out = t @ wv

    def vjp(g):
        dt = g[:, :, None] * wv[None, None, :] * (1.0 - t * t)
        return dt.sum(axis=1), dt.sum(axis=0), np.einsum("ij,ijk->k", g, t)

    return h1.tape._record(out, (h1, h2, w), vjp)


def check_finite(x: Var, what: str) -> Var:
    if not np.all(np.isfinite(x.value)):
        raise NumericDomainError(f"{what}: non-finite value")
    return x


__all__ = [
    "NumericDomainError",
    "TapeStateError",
    "Var",
    "Tape",
    "ParameterStore",
    "adam_step",
    "add",
    "sub",
    "mul",
    "relu",
    "tanh",
    "sigmoid",
    "matmul",
    "transpose",
    "linear",
    "total",
    "mean",
    "take_rows",
    "concat_rows",
    "scale_rows",
    "normalize_rows",
    "row_dot",
    "cosine_rows",
    "cosine",
    "cosine_matrix",
    "sqdist",
    "sqdist_matrix",
    "softmax",
    "masked_softmax",
    "log_softmax",
    "cross_entropy",
    "additive_scores",
    "check_finite",
]
