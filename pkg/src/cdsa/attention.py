"""Cross-dimensional self-attention layers over a T x L x M x C hidden state.

Four variants are provided:

* ``independent``: one attention stream per axis, each over that axis' rows,
  fused by trainable scalar weights.
* ``joint``: a single TLM x TLM map over all cells (small cubes only).
* ``shared``: per-cell queries/keys, folded per axis into three maps.
* ``decomposed``: per-axis maps built like ``independent``, applied one after
  another to per-cell values like ``joint``.  The composite map is the
  Kronecker product of the three, so the application order does not matter.

Parameters live in plain ``dict[str, np.ndarray]`` bundles; forward functions
take the matching ``dict[str, Var]`` so that one code path serves inference,
training and gradient checking.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from . import autograd as ag
from . import tensor_core as tc
from .tensor_core import DIMS, Dim, Shape3


class Variant(str, enum.Enum):
    INDEPENDENT = "independent"
    JOINT = "joint"
    SHARED = "shared"
    DECOMPOSED = "decomposed"

    @classmethod
    def parse(cls, v: "str | Variant") -> "Variant":
        try:
            return cls(v.value if isinstance(v, Variant) else str(v).lower())
        except ValueError:
            raise ValueError(f"unknown attention variant {v!r}; expected one of "
                             f"{[x.value for x in cls]}") from None


@dataclass(frozen=True)
class AttentionDims:
    """Projection widths.  ``d``/``v`` are per-cell, ``d_t``/``d_l``/``d_m`` per-axis."""

    c: int = 16
    d: int = 16
    v: int = 16
    d_t: int = 16
    d_l: int = 16
    d_m: int = 16
    stream_depth: int = 1

    def axis_width(self, d: Dim) -> int:
        return (self.d_t, self.d_l, self.d_m)[int(d)]


ORDERS = tuple(permutations(DIMS))
DEFAULT_ORDER = (Dim.TIME, Dim.LOCATION, Dim.MEASUREMENT)


def row_width(shape: Shape3, d: Dim, c: int) -> int:
    """Length of one row of the per-axis matrix (other extents times channels)."""
    return shape.size // shape.extent(d) * c


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _linear(rng, prefix, n_in, n_out):
    return {f"{prefix}.w": _uniform(rng, n_in, (n_in, n_out)), f"{prefix}.b": np.zeros(n_out)}


def param_shapes(variant, shape: Shape3, dims: AttentionDims) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every trainable array of one attention layer."""
    variant = Variant.parse(variant)
    c = dims.c
    out: dict[str, tuple[int, ...]] = {}

    def lin(prefix, n_in, n_out):
        out[f"{prefix}.w"] = (n_in, n_out)
        out[f"{prefix}.b"] = (n_out,)

    if variant in (Variant.JOINT, Variant.SHARED):
        lin("q", c, dims.d)
        lin("k", c, dims.d)
        lin("v", c, dims.v)
        lin("o", dims.v, c)
    elif variant is Variant.DECOMPOSED:
        for d in DIMS:
            r = row_width(shape, d, c)
            lin(f"q_{d.letter}", r, dims.axis_width(d))
            lin(f"k_{d.letter}", r, dims.axis_width(d))
        lin("v", c, dims.v)
        lin("o", dims.v, c)
    else:
        for d in DIMS:
            r = row_width(shape, d, c)
            for j in range(dims.stream_depth):
                s = f"{d.letter}{j}"
                lin(f"{s}.q", r, dims.axis_width(d))
                lin(f"{s}.k", r, dims.axis_width(d))
                lin(f"{s}.v", r, r)
                lin(f"{s}.o", r, r)
        for d in DIMS:
            out[f"alpha_{d.letter}"] = ()
    return out


def init_params(variant, shape: Shape3, dims: AttentionDims, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shp in param_shapes(variant, shape, dims).items():
        if name.startswith("alpha_"):
            params[name] = np.array(1.0 / 3.0)
        elif name.endswith(".b"):
            params[name] = np.zeros(shp)
        else:
            params[name] = _uniform(rng, shp[0], shp)
    return params


def _lin(x, p, prefix):
    return ag.affine(x, p[f"{prefix}.w"], p[f"{prefix}.b"])


def attn_map_for_dim(h: ag.Var, d: Dim, wq_prefix: str, wk_prefix: str, p) -> ag.Var:
    """Row-stochastic map over axis ``d`` built from that axis' flattened rows."""
    rows = ag.dim_rows(h, d)
    q = _lin(rows, p, wq_prefix)
    k = _lin(rows, p, wk_prefix)
    return ag.softmax_rows(ag.scaled_scores(q, k))


def decomposed_forward(h: ag.Var, p, order=DEFAULT_ORDER, maps=None) -> ag.Var:
    order = tuple(Dim.parse(d) for d in order)
    if sorted(order) != list(DIMS):
        raise ValueError(f"order must be a permutation of (T, L, M), got {order}")
    a = {d: attn_map_for_dim(h, d, f"q_{d.letter}", f"k_{d.letter}", p) for d in DIMS}
    v = _lin(h, p, "v")
    for d in order:
        v = ag.mode_apply(a[d], v, d)
    if maps is not None:
        maps.update({d.letter: a[d].value for d in DIMS})
    return _lin(v, p, "o")


def joint_forward(h: ag.Var, p, maps=None) -> ag.Var:
    t, l, m, c = h.shape
    n = t * l * m
    if n > tc.KRON_GUARD:
        raise tc.CapacityError(f"joint attention over TLM = {n} cells exceeds the guard "
                               f"of {tc.KRON_GUARD}; use the decomposed variant")
    flat = ag.reshape(h, (n, c))
    q = _lin(flat, p, "q")
    k = _lin(flat, p, "k")
    a = ag.softmax_rows(ag.scaled_scores(q, k))
    v = a @ _lin(flat, p, "v")
    if maps is not None:
        maps["joint"] = a.value
    out = _lin(v, p, "o")
    return ag.reshape(out, (t, l, m, c))


def shared_forward(h: ag.Var, p, order=DEFAULT_ORDER, maps=None) -> ag.Var:
    q = _lin(h, p, "q")
    k = _lin(h, p, "k")
    a = {}
    for d in DIMS:
        # score scale is sqrt(row length) = sqrt(other extents * d)
        a[d] = ag.softmax_rows(ag.scaled_scores(ag.dim_rows(q, d), ag.dim_rows(k, d)))
    v = _lin(h, p, "v")
    for d in order:
        v = ag.mode_apply(a[d], v, Dim.parse(d))
    if maps is not None:
        maps.update({d.letter: a[d].value for d in DIMS})
    return _lin(v, p, "o")


def independent_forward(h: ag.Var, p, maps=None) -> ag.Var:
    shape = h.shape
    out = None
    for d in DIMS:
        alpha = p[f"alpha_{d.letter}"]
        if not alpha.requires_grad and float(alpha.value) == 0.0:
            continue  # a stream fixed at zero weight contributes nothing
        x = ag.dim_rows(h, d)
        j = 0
        while f"{d.letter}{j}.q.w" in p:
            s = f"{d.letter}{j}"
            a = ag.softmax_rows(ag.scaled_scores(_lin(x, p, f"{s}.q"), _lin(x, p, f"{s}.k")))
            x = _lin(a @ _lin(x, p, f"{s}.v"), p, f"{s}.o")
            if maps is not None:
                maps[d.letter if j == 0 else f"{d.letter}.{j}"] = a.value
            j += 1
        stream = ag.mul(alpha, ag.dim_unrows(x, d, shape))
        out = stream if out is None else out + stream
    return out if out is not None else h.tape.const(np.zeros(shape))


def forward(variant, h: ag.Var, p, order=DEFAULT_ORDER, maps=None) -> ag.Var:
    variant = Variant.parse(variant)
    if variant is Variant.DECOMPOSED:
        return decomposed_forward(h, p, order, maps)
    if variant is Variant.SHARED:
        return shared_forward(h, p, order, maps)
    if variant is Variant.JOINT:
        return joint_forward(h, p, maps)
    return independent_forward(h, p, maps)


def run(variant, h: np.ndarray, params, order=DEFAULT_ORDER):
    """Gradient-free forward on plain arrays; returns ``(output, maps)``."""
    tape = ag.Tape(grad=False)
    pv = {k: tape.param(k, v) for k, v in params.items()}
    maps: dict[str, np.ndarray] = {}
    out = forward(variant, tape.const(h), pv, order, maps)
    return out.value, maps
