"""Tape-based reverse-mode differentiation over numpy arrays.

Only the handful of primitives the attention layers and the encoder need are
supported.  Every primitive records a vector-Jacobian product closure on the
tape; ``backward`` replays them in reverse recording order.

    tape = Tape()
    w = tape.param("w", np.ones(3))
    loss = sum_all(w * w)
    grads = backward(tape, loss)   # {"w": array([2., 2., 2.])}
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import tensor_core as tc


class TapeError(RuntimeError):
    pass


class ContractError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "tape", "id", "requires_grad")

    def __init__(self, value, tape: "Tape", vid: int, requires_grad: bool):
        self.value = value
        self.tape = tape
        self.id = vid
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(self.tape, other)))

    def __rsub__(self, other):
        return add(_lift(self.tape, other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape})"


@dataclass
class _Node:
    out: int
    parents: tuple
    vjp: Callable


class Tape:
    """Append-only record of primitive applications plus a parameter registry."""

    def __init__(self, grad: bool = True):
        self.grad = grad
        self.nodes: list[_Node] = []
        self.params: dict[str, Var] = {}
        self._next = 0

    def _new(self, value, requires_grad):
        v = Var(np.asarray(value, dtype=np.float64), self, self._next, requires_grad)
        self._next += 1
        return v

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise TapeError(f"parameter {name!r} registered twice")
        v = self._new(np.array(value, dtype=np.float64), self.grad)
        self.params[name] = v
        return v

    def const(self, value) -> Var:
        return self._new(value, False)

    def record(self, value, parents, vjp) -> Var:
        needs = any(p.requires_grad for p in parents)
        out = self._new(value, needs)
        if needs:
            self.nodes.append(_Node(out.id, tuple(parents), vjp))
        return out

    def clear(self) -> None:
        """Drop recorded nodes and parameters (they form reference cycles with their Vars)."""
        self.nodes.clear()
        self.params.clear()


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise TapeError("operands recorded on different tapes")
        return x
    return tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TapeError("at least one operand must be a Var")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise TapeError("loss was not recorded on this tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        if node.out > loss.id:
            continue
        g = grads.pop(node.out, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return {
        name: np.array(grads.get(v.id, np.zeros_like(v.value)), dtype=np.float64).reshape(v.value.shape)
        for name, v in tape.params.items()
    }


# -- primitives ---------------------------------------------------------------

def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.value.shape, b.value.shape
    return tape.record(a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return tape.record(av @ bv, (a, b), vjp)


def affine(x: Var, w: Var, b: Var | None = None) -> Var:
    """``x @ w + b`` over the last axis of ``x``."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def reshape(x: Var, shape) -> Var:
    old = x.value.shape
    return x.tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Var, axes) -> Var:
    inv = np.argsort(axes)
    return x.tape.record(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def dim_rows(x: Var, d: tc.Dim) -> Var:
    """Differentiable :func:`tensor_core.reshape_for_dim`."""
    d = tc.Dim.parse(d)
    shape = x.value.shape
    return x.tape.record(tc.reshape_for_dim(x.value, d), (x,),
                         lambda g: (tc.unreshape_for_dim(g, d, shape),))


def dim_unrows(x: Var, d: tc.Dim, shape) -> Var:
    d = tc.Dim.parse(d)
    return x.tape.record(tc.unreshape_for_dim(x.value, d, shape), (x,),
                         lambda g: (tc.reshape_for_dim(g, d),))


def mode_apply(a: Var, v: Var, d: tc.Dim) -> Var:
    d = tc.Dim.parse(d)
    axis = int(d)
    av, vv = a.value, v.value

    def vjp(g):
        gv = tc.mode_apply(av.T, g, d)
        others = [i for i in range(g.ndim) if i != axis]
        ga = np.tensordot(g, vv, axes=(others, others))
        return ga, gv

    return a.tape.record(tc.mode_apply(av, vv, d), (a, v), vjp)


def softmax_rows(s: Var) -> Var:
    y = tc.softmax_rows(s.value)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return s.tape.record(y, (s,), vjp)


def scaled_scores(q: Var, k: Var) -> Var:
    qv, kv = q.value, k.value
    scale = 1.0 / np.sqrt(qv.shape[1])
    out = tc.scaled_scores(qv, kv)
    return q.tape.record(out, (q, k), lambda g: ((g @ kv) * scale, (g.T @ qv) * scale))


def relu(x: Var) -> Var:
    on = x.value > 0
    return x.tape.record(np.where(on, x.value, 0.0), (x,), lambda g: (g * on,))


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gamma.value
    n = xv.shape[-1]

    def vjp(g):
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, n).sum(axis=0)
        gbeta = g.reshape(-1, n).sum(axis=0)
        return gx, ggamma.reshape(gv.shape), gbeta.reshape(beta.value.shape)

    return x.tape.record(xhat * gv + beta.value, (x, gamma, beta), vjp)


def sum_all(x: Var) -> Var:
    shape = x.value.shape
    return x.tape.record(np.array(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def _check_mask(pred: Var, truth, mask):
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if truth.shape != pred.value.shape or mask.shape != truth.shape:
        raise tc.ShapeError(f"shape mismatch: pred {pred.value.shape}, truth {truth.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ContractError("mask selects no cells")
    return truth, mask, n


def masked_mse(pred: Var, truth, mask) -> Var:
    truth, mask, n = _check_mask(pred, truth, mask)
    err = np.where(mask, pred.value - truth, 0.0)
    return pred.tape.record(np.array((err * err).sum() / n), (pred,), lambda g: (g * 2.0 * err / n,))


def masked_rmse(pred: Var, truth, mask) -> Var:
    truth, mask, n = _check_mask(pred, truth, mask)
    err = np.where(mask, pred.value - truth, 0.0)
    r = np.sqrt((err * err).sum() / n)

    def vjp(g):
        if r == 0.0:
            return (np.zeros_like(err),)
        return (g * err / (n * r),)

    return pred.tape.record(np.array(r), (pred,), vjp)


def masked_mae(pred: Var, truth, mask) -> Var:
    truth, mask, n = _check_mask(pred, truth, mask)
    err = np.where(mask, pred.value - truth, 0.0)
    return pred.tape.record(np.array(np.abs(err).sum() / n), (pred,), lambda g: (g * np.sign(err) / n,))


# -- finite-difference checker ------------------------------------------------

@dataclass
class FDReport:
    max_rel_error: float
    n_coords: int
    seed: int
    worst: tuple[str, int] | None


def value_and_grad(f, params: Mapping[str, np.ndarray]):
    """Evaluate ``f(tape, vars)`` and its gradient with respect to every parameter."""
    tape = Tape()
    pv = {name: tape.param(name, params[name]) for name in sorted(params)}
    loss = f(tape, pv)
    return float(loss.value), backward(tape, loss)


def _value(f, params) -> float:
    tape = Tape()
    pv = {name: tape.param(name, params[name]) for name in sorted(params)}
    return float(f(tape, pv).value)


def fd_check(f, params: Mapping[str, np.ndarray], eps: float = 1e-5,
             max_coords: int = 512, seed: int = 0, floor: float = 1e-5) -> FDReport:
    """Compare ``backward`` against central differences on sampled coordinates.

    The relative error at a coordinate is ``|g - n| / max(|g|, |n|, floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    base, grads = value_and_grad(f, params)
    if _value(f, params) != base:
        raise DeterminismError("f returned different values on repeated evaluation")

    coords = [(name, i) for name in sorted(params) for i in range(params[name].size)]
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]

    worst, worst_at = 0.0, None
    for name, i in coords:
        arr = params[name]
        flat = arr.reshape(-1)
        orig = flat[i]
        hi, lo = orig + eps, orig - eps
        flat[i] = hi
        fp = _value(f, params)
        flat[i] = lo
        fm = _value(f, params)
        flat[i] = orig
        num = (fp - fm) / (hi - lo)  # realized step, not 2*eps
        ana = grads[name].reshape(-1)[i]
        rel = abs(ana - num) / max(abs(ana), abs(num), floor)
        if rel > worst:
            worst, worst_at = rel, (name, i)
    return FDReport(worst, len(coords), seed, worst_at)
