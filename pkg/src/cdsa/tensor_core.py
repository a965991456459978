"""Dense tensor helpers over the (time, location, measurement) cube.

Cells are addressed by a flat index ``p = (t*L + l)*M + m`` (time-major,
measurement fastest).  With this ordering the lifted map of a single axis is
``kron(A_T, I_L, I_M)`` etc. under numpy's standard Kronecker convention.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

KRON_GUARD = 4096


class ShapeError(ValueError):
    pass


class CapacityError(RuntimeError):
    """Raised when a dense TLM x TLM map would be too large to materialize."""


class NumericError(FloatingPointError):
    pass


class Dim(enum.IntEnum):
    """Axis of the cube; the integer value is the axis position."""

    TIME = 0
    LOCATION = 1
    MEASUREMENT = 2

    @classmethod
    def parse(cls, name: "str | Dim") -> "Dim":
        if isinstance(name, Dim):
            return name
        key = name.strip().upper()
        aliases = {"T": "TIME", "L": "LOCATION", "M": "MEASUREMENT"}
        return cls[aliases.get(key, key)]

    @property
    def letter(self) -> str:
        return self.name[0]


DIMS = (Dim.TIME, Dim.LOCATION, Dim.MEASUREMENT)


@dataclass(frozen=True)
class Shape3:
    T: int
    L: int
    M: int

    def __post_init__(self):
        for name in ("T", "L", "M"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ShapeError(f"{name} must be a positive integer, got {v!r}")
        if self.size > np.iinfo(np.int64).max:
            raise ShapeError("cube too large for the index range")

    @property
    def size(self) -> int:
        return self.T * self.L * self.M

    def extent(self, d: Dim) -> int:
        return (self.T, self.L, self.M)[int(d)]

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.T, self.L, self.M)

    @classmethod
    def of(cls, x: np.ndarray) -> "Shape3":
        if x.ndim < 3:
            raise ShapeError(f"expected at least 3 axes, got shape {x.shape}")
        return cls(*x.shape[:3])


def flat_index(t: int, l: int, m: int, s: Shape3) -> int:
    if not (0 <= t < s.T and 0 <= l < s.L and 0 <= m < s.M):
        raise IndexError(f"cell ({t}, {l}, {m}) outside cube {s.as_tuple()}")
    return (t * s.L + l) * s.M + m


def unflat_index(p: int, s: Shape3) -> tuple[int, int, int]:
    if not 0 <= p < s.size:
        raise IndexError(f"flat index {p} outside [0, {s.size})")
    tl, m = divmod(p, s.M)
    t, l = divmod(tl, s.L)
    return t, l, m


def _dim_perm(d: Dim) -> tuple[int, int, int, int]:
    others = [a for a in range(3) if a != int(d)]
    return (int(d), *others, 3)


def reshape_for_dim(x: np.ndarray, d: Dim) -> np.ndarray:
    """Matrix whose rows index axis ``d``; columns flatten the rest in T, L, M, C order."""
    if x.ndim != 4:
        raise ShapeError(f"expected a T x L x M x C tensor, got shape {x.shape}")
    d = Dim.parse(d)
    moved = np.transpose(x, _dim_perm(d))
    return np.ascontiguousarray(moved).reshape(x.shape[int(d)], -1)


def unreshape_for_dim(mat: np.ndarray, d: Dim, shape: tuple[int, int, int, int]) -> np.ndarray:
    d = Dim.parse(d)
    perm = _dim_perm(d)
    moved_shape = tuple(shape[a] for a in perm)
    if mat.size != int(np.prod(shape)) or mat.shape[0] != shape[int(d)]:
        raise ShapeError(f"matrix {mat.shape} does not fold back into {shape} along {d.name}")
    moved = mat.reshape(moved_shape)
    return np.ascontiguousarray(np.transpose(moved, np.argsort(perm)))


def mode_apply(a: np.ndarray, v: np.ndarray, d: Dim) -> np.ndarray:
    """Apply a square map along one axis of ``v`` (mode-n product).

    ``out[..., i, ...] = sum_j a[i, j] * v[..., j, ...]`` with the other
    indices held fixed; equivalent to the lifted Kronecker map times vec(v).
    """
    d = Dim.parse(d)
    axis = int(d)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"map must be square, got {a.shape}")
    if v.ndim < 3 or v.shape[axis] != a.shape[1]:
        raise ShapeError(f"map of size {a.shape[0]} does not match axis {d.name} of {v.shape}")
    out = np.tensordot(a, v, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def kron3(a_t: np.ndarray, a_l: np.ndarray, a_m: np.ndarray) -> np.ndarray:
    for name, a in (("a_t", a_t), ("a_l", a_l), ("a_m", a_m)):
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"{name} must be square, got {a.shape}")
    n = a_t.shape[0] * a_l.shape[0] * a_m.shape[0]
    if n > KRON_GUARD:
        raise CapacityError(f"TLM = {n} exceeds the dense map guard of {KRON_GUARD}")
    return np.kron(np.kron(a_t, a_l), a_m)


def lift(a: np.ndarray, d: Dim, s: Shape3) -> np.ndarray:
    """Dense TLM x TLM form of a single-axis map (identity on the other axes)."""
    d = Dim.parse(d)
    eyes = [np.eye(s.T), np.eye(s.L), np.eye(s.M)]
    eyes[int(d)] = a
    return kron3(*eyes)


def softmax_rows(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise NumericError("softmax input contains non-finite entries")
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def scaled_scores(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1] or q.shape[1] < 1:
        raise ShapeError(f"incompatible query/key shapes {q.shape} and {k.shape}")
    return (q @ k.T) / np.sqrt(q.shape[1])


def is_row_stochastic(a: np.ndarray, tol: float = 1e-9) -> bool:
    return bool(np.all(a >= -tol) and np.allclose(a.sum(axis=-1), 1.0, rtol=0.0, atol=tol))
