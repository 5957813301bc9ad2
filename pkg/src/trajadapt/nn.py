"""Neural primitives with hand-written reverse-mode gradients.

A :class:`Tape` records every primitive applied during a forward pass so the
exact gradients can be pulled back afterwards, either for a scalar loss or
for each output coordinate separately (seed gradients may carry one extra
leading axis, which turns a single backward sweep into a stacked Jacobian).
The tape only supports the primitives the trajectory network needs; it is
not a general autodiff system.

Fast inference paths (no recording) live next to the taped ones and are
tested for equivalence against them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .linalg import DimensionError

Activation = str  # "linear" | "relu" | "tanh"

_ACTIVATIONS = ("linear", "relu", "tanh")


class LayerId(str, Enum):
    """The seven adaptable weight matrices (biases are never adapted)."""

    ENC_IH = "enc_ih"
    ENC_HH = "enc_hh"
    DEC_IH = "dec_ih"
    DEC_HH = "dec_hh"
    FC1 = "fc1"
    FC2 = "fc2"
    FC3 = "fc3"


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class GruCellParams:
    """GRU cell weights with gate blocks ordered [reset; update; new]."""

    w_ih: np.ndarray  # (3h, in)
    w_hh: np.ndarray  # (3h, h)
    b_ih: np.ndarray  # (3h,)
    b_hh: np.ndarray  # (3h,)
    hidden_size: int

    def __post_init__(self):
        h = self.hidden_size
        if self.w_ih.shape[0] != 3 * h or self.w_hh.shape != (3 * h, h):
            raise DimensionError(
                f"GRU weight shapes {self.w_ih.shape}/{self.w_hh.shape} "
                f"inconsistent with hidden size {h}"
            )
        if self.b_ih.shape != (3 * h,) or self.b_hh.shape != (3 * h,):
            raise DimensionError("GRU bias shapes inconsistent with hidden size")

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]


@dataclass
class DenseParams:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    def __post_init__(self):
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise DimensionError(
                f"dense shapes {self.w.shape}/{self.b.shape} are inconsistent"
            )


def init_gru(input_size: int, hidden_size: int, rng: np.random.Generator) -> GruCellParams:
    """Uniform(-k, k) weights with k = 1/sqrt(fan_in); zero biases."""
    k_in = 1.0 / np.sqrt(input_size)
    k_h = 1.0 / np.sqrt(hidden_size)
    return GruCellParams(
        w_ih=rng.uniform(-k_in, k_in, size=(3 * hidden_size, input_size)),
        w_hh=rng.uniform(-k_h, k_h, size=(3 * hidden_size, hidden_size)),
        b_ih=np.zeros(3 * hidden_size),
        b_hh=np.zeros(3 * hidden_size),
        hidden_size=hidden_size,
    )


def init_dense(input_size: int, output_size: int, rng: np.random.Generator) -> DenseParams:
    k = 1.0 / np.sqrt(input_size)
    return DenseParams(
        w=rng.uniform(-k, k, size=(output_size, input_size)),
        b=np.zeros(output_size),
    )


# ---------------------------------------------------------------------------
# recording tape
# ---------------------------------------------------------------------------


class UntracedValueError(KeyError):
    """A gradient was requested for a value this tape never recorded."""


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Records primitives of one forward pass for reverse-mode gradients."""

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self._names: dict[str, int] = {}

    def leaf(self, value, name: str | None = None) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if name is not None:
            if name in self._names:
                raise ValueError(f"duplicate leaf name {name!r}")
            self._names[name] = len(self._vjps)
        return self._push(value, (), None)

    def _push(self, value: np.ndarray, parents: tuple[Var, ...], vjp) -> Var:
        for p in parents:
            if p.tape is not self:
                raise UntracedValueError("operands recorded on different tapes")
        index = len(self._vjps)
        self._parents.append(tuple(p.index for p in parents))
        self._vjps.append(vjp)
        self._shapes.append(value.shape)
        return Var(value, self, index)

    def backward(self, seeds: dict[Var, np.ndarray]) -> dict[str, np.ndarray]:
        """Pull seed gradients back to the named leaves.

        Seed arrays must end with the seeded variable's shape; any extra
        leading axes are carried through unchanged, so an (s, *shape) seed
        yields (s, *leaf_shape) gradients (one Jacobian row per slot).
        Leaves the seeds never reach get zero gradients.
        """
        grads: dict[int, np.ndarray] = {}
        highest = -1
        for var, g in seeds.items():
            if not isinstance(var, Var) or var.tape is not self:
                raise UntracedValueError("seed value was not recorded on this tape")
            g = np.asarray(g, dtype=np.float64)
            if g.shape[g.ndim - var.value.ndim:] != var.value.shape:
                raise DimensionError(
                    f"seed shape {g.shape} does not end with {var.value.shape}"
                )
            grads[var.index] = grads[var.index] + g if var.index in grads else g
            highest = max(highest, var.index)

        for index in range(highest, -1, -1):
            if index not in grads or self._vjps[index] is None:
                continue
            gout = grads.pop(index)
            for pidx, g in zip(self._parents[index], self._vjps[index](gout)):
                if g is None:
                    continue
                grads[pidx] = grads[pidx] + g if pidx in grads else g

        out = {}
        for name, index in self._names.items():
            out[name] = grads.get(index, np.zeros(self._shapes[index]))
        return out


# ---------------------------------------------------------------------------
# taped primitives
#
# Forward values are either plain vectors (n,) or batched rows (B, n).
# VJP closures accept upstream gradients that may carry extra leading axes
# (Jacobian seeding) when the forward pass was unbatched.
# ---------------------------------------------------------------------------


def affine(w: Var, x: Var, b: Var) -> Var:
    """y = x @ w^T + b with w (out, in), x (..., in), b (out,)."""
    wv, xv, bv = w.value, x.value, b.value
    if xv.shape[-1] != wv.shape[1]:
        raise DimensionError(f"affine input {xv.shape} does not match weight {wv.shape}")
    value = xv @ wv.T + bv
    batched = xv.ndim == 2

    def vjp(g):
        if batched:
            # Forward batch axis is summed into the parameter gradients.
            return (g.T @ xv, g @ wv, g.sum(axis=0))
        return (g[..., :, None] * xv, g @ wv, g)

    return x.tape._push(value, (w, x, b), vjp)


def _unary(x: Var, value: np.ndarray, dlocal: np.ndarray) -> Var:
    return x.tape._push(value, (x,), lambda g: (g * dlocal,))


def sigmoid(x: Var) -> Var:
    y = 1.0 / (1.0 + np.exp(-x.value))
    return _unary(x, y, y * (1.0 - y))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return _unary(x, y, 1.0 - y * y)


def relu(x: Var) -> Var:
    mask = (x.value > 0).astype(np.float64)
    return _unary(x, x.value * mask, mask)


def scale(x: Var, c: float) -> Var:
    return _unary(x, x.value * c, c)


def one_minus(x: Var) -> Var:
    return x.tape._push(1.0 - x.value, (x,), lambda g: (-g,))


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"add shapes differ: {a.value.shape} vs {b.value.shape}")
    return a.tape._push(a.value + b.value, (a, b), lambda g: (g, g))


def mul(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"mul shapes differ: {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return a.tape._push(av * bv, (a, b), lambda g: (g * bv, g * av))


def concat(a: Var, b: Var) -> Var:
    na = a.value.shape[-1]
    value = np.concatenate([a.value, b.value], axis=-1)
    return a.tape._push(value, (a, b), lambda g: (g[..., :na], g[..., na:]))


def narrow(x: Var, start: int, stop: int) -> Var:
    n = x.value.shape[-1]

    def vjp(g):
        full = np.zeros(g.shape[:-1] + (n,))
        full[..., start:stop] = g
        return (full,)

    return x.tape._push(np.ascontiguousarray(x.value[..., start:stop]), (x,), vjp)


def take_step(x: Var, t: int) -> Var:
    """Select row t along the second-to-last axis of a (.., T, n) value."""
    rows = x.value.shape[-2]

    def vjp(g):
        full = np.zeros(g.shape[:-1] + (rows, g.shape[-1]))
        full[..., t, :] = g
        return (full,)

    return x.tape._push(np.ascontiguousarray(x.value[..., t, :]), (x,), vjp)


@dataclass
class GruCellVars:
    """One GRU cell's parameters wrapped as tape leaves."""

    w_ih: Var
    w_hh: Var
    b_ih: Var
    b_hh: Var
    hidden_size: int

    @classmethod
    def wrap(cls, tape: Tape, p: GruCellParams, prefix: str) -> "GruCellVars":
        return cls(
            w_ih=tape.leaf(p.w_ih, f"{prefix}.w_ih"),
            w_hh=tape.leaf(p.w_hh, f"{prefix}.w_hh"),
            b_ih=tape.leaf(p.b_ih, f"{prefix}.b_ih"),
            b_hh=tape.leaf(p.b_hh, f"{prefix}.b_hh"),
            hidden_size=p.hidden_size,
        )


def gru_cell(p: GruCellVars, x: Var, h: Var) -> Var:
    """One taped GRU step; gate blocks ordered [reset; update; new].

    r = sigmoid(W_r x + U_r h + b_r)
    z = sigmoid(W_z x + U_z h + b_z)
    n = tanh(W_n x + b_in + r * (U_n h + b_hn))
    h' = (1 - z) * n + z * h
    """
    hs = p.hidden_size
    gi = affine(p.w_ih, x, p.b_ih)
    gh = affine(p.w_hh, h, p.b_hh)
    r = sigmoid(add(narrow(gi, 0, hs), narrow(gh, 0, hs)))
    z = sigmoid(add(narrow(gi, hs, 2 * hs), narrow(gh, hs, 2 * hs)))
    n = tanh(add(narrow(gi, 2 * hs, 3 * hs), mul(r, narrow(gh, 2 * hs, 3 * hs))))
    return add(mul(one_minus(z), n), mul(z, h))


@dataclass
class DenseVars:
    w: Var
    b: Var

    @classmethod
    def wrap(cls, tape: Tape, p: DenseParams, prefix: str) -> "DenseVars":
        return cls(w=tape.leaf(p.w, f"{prefix}.w"), b=tape.leaf(p.b, f"{prefix}.b"))


def dense(p: DenseVars, x: Var, activation: Activation) -> Var:
    y = affine(p.w, x, p.b)
    if activation == "linear":
        return y
    if activation == "tanh":
        return tanh(y)
    if activation == "relu":
        return relu(y)
    raise ValueError(f"unknown activation {activation!r}; expected one of {_ACTIVATIONS}")


# ---------------------------------------------------------------------------
# fast (untaped) forward paths
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def gru_step(p: GruCellParams, x, h) -> np.ndarray:
    """One GRU step without recording; accepts (n,) or batched (B, n) rows."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if x.shape[-1] != p.input_size or h.shape[-1] != p.hidden_size:
        raise DimensionError(
            f"gru_step got x {x.shape}, h {h.shape} for cell "
            f"(in={p.input_size}, hidden={p.hidden_size})"
        )
    hs = p.hidden_size
    gi = x @ p.w_ih.T + p.b_ih
    gh = h @ p.w_hh.T + p.b_hh
    r = _sigmoid(gi[..., :hs] + gh[..., :hs])
    z = _sigmoid(gi[..., hs:2 * hs] + gh[..., hs:2 * hs])
    n = np.tanh(gi[..., 2 * hs:] + r * gh[..., 2 * hs:])
    return (1.0 - z) * n + z * h


def dense_forward(p: DenseParams, x, activation: Activation = "linear") -> np.ndarray:
    """Dense layer without recording; accepts (n,) or batched (B, n) rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.w.shape[1]:
        raise DimensionError(f"dense input {x.shape} does not match weight {p.w.shape}")
    y = x @ p.w.T + p.b
    if activation == "linear":
        return y
    if activation == "tanh":
        return np.tanh(y)
    if activation == "relu":
        return np.maximum(y, 0.0)
    raise ValueError(f"unknown activation {activation!r}; expected one of {_ACTIVATIONS}")


# ---------------------------------------------------------------------------
# Adam with gradient clipping
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> dict[str, np.ndarray]:
    """One Adam update with bias correction; returns the new parameter dict."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        out[name] = p - state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads, total
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}, total
