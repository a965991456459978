"""Data cubes, normalization, burst-loss masking, synthetic data and metrics."""

from __future__ import annotations

import csv
import io
import json
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .tensor_core import Shape3

log = logging.getLogger(__name__)

CUBE_HEADER = ["t", "l", "m", "value", "observed"]
MASK_HEADER = ["t", "l", "m", "removed"]
MAPE_EPS = 1e-6


class FormatError(ValueError):
    pass


class ContractError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float),
                   np.asarray(d["constant"], bool))


@dataclass
class DataCube:
    values: np.ndarray
    observed: np.ndarray
    stats: NormStats | None = None
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.values.ndim != 3 or self.values.shape != self.observed.shape:
            raise FormatError(f"values {self.values.shape} and observed {self.observed.shape} "
                              "must be equal T x L x M arrays")

    @property
    def shape(self) -> Shape3:
        return Shape3(*self.values.shape)

    def missing_rate(self) -> float:
        return 1.0 - self.observed.mean()

    def hide(self, removed: np.ndarray) -> "DataCube":
        """Copy with ``removed`` cells marked unobserved (and zeroed if normalized)."""
        obs = self.observed & ~np.asarray(removed, bool)
        vals = np.where(obs, self.values, 0.0) if self.normalized else self.values.copy()
        return replace(self, values=vals, observed=obs, meta=dict(self.meta))

    def window(self, start: int, length: int) -> "DataCube":
        sl = slice(start, start + length)
        return replace(self, values=self.values[sl].copy(), observed=self.observed[sl].copy(),
                       meta=dict(self.meta))


# -- normalization ------------------------------------------------------------

def compute_stats(cube: DataCube) -> NormStats:
    m = cube.values.shape[2]
    mean, std, const = np.zeros(m), np.ones(m), np.zeros(m, bool)
    for j in range(m):
        vals = cube.values[:, :, j][cube.observed[:, :, j]]
        if vals.size == 0:
            const[j] = True
            log.warning("measurement %d has no observed cells; treated as constant", j)
            continue
        mean[j] = vals.mean()
        s = vals.std()  # population std
        if s > 0:
            std[j] = s
        else:
            const[j] = True
            log.warning("measurement %d has zero variance; scaled by 1", j)
    return NormStats(mean, std, const)


def normalize(cube: DataCube, stats: NormStats | None = None) -> DataCube:
    if cube.normalized:
        raise ContractError("cube is already normalized")
    stats = compute_stats(cube) if stats is None else stats
    z = (cube.values - stats.mean) / stats.std
    z = np.where(cube.observed, z, 0.0)
    return replace(cube, values=z, stats=stats, normalized=True, meta=dict(cube.meta))


def denormalize(cube: DataCube, stats: NormStats | None = None) -> DataCube:
    stats = stats or cube.stats
    if stats is None:
        raise ContractError("no normalization statistics available")
    raw = cube.values * stats.std + stats.mean
    return replace(cube, values=raw, stats=None, normalized=False, meta=dict(cube.meta))


# -- burst loss ---------------------------------------------------------------

@dataclass(frozen=True)
class MissingSpec:
    target_rate: float
    burst_len_mean: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.target_rate < 1.0:
            raise ConfigError(f"target_rate must be in [0, 1), got {self.target_rate}")
        if self.burst_len_mean < 1.0:
            raise ConfigError(f"burst_len_mean must be >= 1, got {self.burst_len_mean}")


def burst_mask(observed: np.ndarray, spec: MissingSpec, rng: np.random.Generator | None = None,
               max_attempts: int | None = None, bursts: list | None = None) -> np.ndarray:
    """Remove consecutive runs of observed cells until the missing rate reaches the target.

    Each burst picks a uniform ``(l, m)`` series and start time and removes up
    to a geometric(mean ``burst_len_mean``) number of consecutive observed
    cells.  Removal stops as soon as the overall missing fraction reaches
    ``spec.target_rate``.  ``bursts``, if given, collects ``(l, m, t0, drawn_len)``.
    """
    if isinstance(observed, DataCube):
        observed = observed.observed
    observed = np.asarray(observed, bool)
    T, L, M = observed.shape
    n = observed.size
    natural = n - int(observed.sum())
    need = math.ceil(spec.target_rate * n - 1e-9) - natural
    removed = np.zeros_like(observed)
    if need <= 0:
        return removed
    if need > n - natural:
        raise ContractError(f"target rate {spec.target_rate} unreachable: only "
                            f"{n - natural} observed cells")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    p = 1.0 / spec.burst_len_mean
    max_attempts = max_attempts or 1000 * n
    done = 0
    for _ in range(max_attempts):
        l, m, t0 = int(rng.integers(L)), int(rng.integers(M)), int(rng.integers(T))
        length = int(rng.geometric(p))
        if bursts is not None:
            bursts.append((l, m, t0, length))
        for t in range(t0, min(T, t0 + length)):
            if observed[t, l, m] and not removed[t, l, m]:
                removed[t, l, m] = True
                done += 1
                if done == need:
                    return removed
    raise ContractError(f"target rate {spec.target_rate} not reached after {max_attempts} bursts")


# -- metrics ------------------------------------------------------------------

@dataclass
class MetricsReport:
    rmse: float
    mae: float
    mre: float
    mse: float
    mape: float
    n_eval: int
    excluded_near_zero: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def metrics(pred, truth, eval_mask) -> MetricsReport:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    mask = np.asarray(eval_mask, bool)
    if pred.shape != truth.shape or mask.shape != truth.shape:
        raise ContractError(f"shape mismatch: {pred.shape}, {truth.shape}, {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ContractError("evaluation mask is empty")
    e = (pred - truth)[mask]
    y = truth[mask]
    ae = np.abs(e)
    mse = float(np.mean(e * e))
    denom = float(np.abs(y).sum())
    mre = float(ae.sum() / denom) if denom > 0 else math.inf
    keep = np.abs(y) >= MAPE_EPS
    mape = float(np.mean(ae[keep] / np.abs(y[keep]))) if keep.any() else 0.0
    return MetricsReport(rmse=math.sqrt(mse), mae=float(ae.mean()), mre=mre, mse=mse,
                         mape=mape, n_eval=n, excluded_near_zero=int((~keep).sum()))


def mean_fill(cube: DataCube) -> np.ndarray:
    """Baseline: every unobserved cell gets its measurement's observed mean."""
    stats = compute_stats(cube)
    return np.where(cube.observed, cube.values, stats.mean[None, None, :])


# -- synthetic data -----------------------------------------------------------

SYNTH_KINDS = ("seasonal", "cross-measurement", "spatial")


def synth_gen(kind: str, shape, seed: int = 0, noise: float = 0.0, **kw) -> DataCube:
    """Fully observed synthetic cube; generation parameters are kept in ``meta``."""
    s = shape if isinstance(shape, Shape3) else Shape3(*shape)
    rng = np.random.default_rng(seed)
    T, L, M = s.as_tuple()
    t = np.arange(T, dtype=float)
    if kind == "seasonal":
        period = float(kw.get("period", 24.0))
        amp = rng.uniform(0.5, 1.5, size=(L, M))
        phase = rng.uniform(0.0, 2 * np.pi, size=(L, M))
        offset = np.arange(M, dtype=float)[None, :] * 2.0 + rng.uniform(-0.5, 0.5, size=(L, M))
        values = offset + amp * np.sin(2 * np.pi * t[:, None, None] / period + phase)
        meta = {"period": period, "amplitude": amp.tolist(), "phase": phase.tolist(),
                "offset": offset.tolist()}
    elif kind == "cross-measurement":
        if M < 2:
            raise ConfigError("cross-measurement cubes need at least two measurements")
        lag = int(kw.get("lag", 1))
        gain = float(kw.get("gain", 0.8))
        bias = float(kw.get("bias", 1.0))
        rho = float(kw.get("rho", 0.8))
        # measurement 0: AR(1) driver, stationary with unit variance
        x = np.empty((T + lag, L))
        x[0] = rng.standard_normal(L)
        innov = rng.standard_normal((T + lag - 1, L)) * np.sqrt(1 - rho * rho)
        for i in range(1, T + lag):
            x[i] = rho * x[i - 1] + innov[i - 1]
        values = np.empty((T, L, M))
        values[:, :, 0] = x[lag:]
        values[:, :, 1] = gain * x[:T] + bias
        period = float(kw.get("period", 24.0))
        phase = rng.uniform(0.0, 2 * np.pi, size=(L, M))
        for j in range(2, M):
            values[:, :, j] = np.sin(2 * np.pi * t[:, None] / period + phase[None, :, j])
        meta = {"lag": lag, "gain": gain, "bias": bias, "rho": rho}
    elif kind == "spatial":
        corr = float(kw.get("corr", 0.7))
        period = float(kw.get("period", 24.0))
        base = rng.standard_normal((T, L))
        for i in range(1, T):
            base[i] = 0.9 * base[i - 1] + np.sqrt(1 - 0.81) * base[i]
        mix = corr ** np.abs(np.subtract.outer(np.arange(L), np.arange(L)))
        latent = base @ mix.T / np.sqrt((mix * mix).sum(axis=1))
        latent = latent + np.sin(2 * np.pi * t / period)[:, None]
        coef = rng.uniform(0.5, 1.5, size=M)
        shift = rng.uniform(-1.0, 1.0, size=M)
        values = latent[:, :, None] * coef + shift
        meta = {"corr": corr, "period": period, "coef": coef.tolist(), "shift": shift.tolist()}
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    if noise > 0:
        values = values + noise * rng.standard_normal(values.shape)
    meta.update(kind=kind, seed=seed, noise=noise, shape=[T, L, M])
    return DataCube(values, np.ones(values.shape, bool), meta=meta)


# -- CSV I/O ------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def cube_to_csv(cube: DataCube) -> str:
    buf = io.StringIO()
    buf.write(",".join(CUBE_HEADER) + "\n")
    T, L, M = cube.values.shape
    for t in range(T):
        for l in range(L):
            for m in range(M):
                if cube.observed[t, l, m]:
                    buf.write(f"{t},{l},{m},{_fmt(cube.values[t, l, m])},1\n")
                else:
                    buf.write(f"{t},{l},{m},,0\n")
    return buf.getvalue()


def save_cube(cube: DataCube, path) -> None:
    with open(path, "w", newline="") as f:
        f.write(cube_to_csv(cube))


def _read_rows(path, header):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            got = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if [h.strip() for h in got] != header:
            raise FormatError(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def _index(path, lineno, row):
    try:
        t, l, m = (int(x) for x in row[:3])
    except ValueError:
        raise FormatError(f"{path}:{lineno}: non-integer index") from None
    if min(t, l, m) < 0:
        raise FormatError(f"{path}:{lineno}: negative index")
    return t, l, m


def _flag(path, lineno, s):
    if s.strip() not in ("0", "1"):
        raise FormatError(f"{path}:{lineno}: flag must be 0 or 1, got {s!r}")
    return s.strip() == "1"


def load_cube(path, shape=None) -> DataCube:
    """Read a long-format cube CSV.  Missing rows are unobserved cells."""
    cells = {}
    for lineno, row in _read_rows(path, CUBE_HEADER):
        key = _index(path, lineno, row)
        if key in cells:
            raise FormatError(f"{path}:{lineno}: duplicate cell {key}")
        obs = _flag(path, lineno, row[4])
        txt = row[3].strip()
        if obs:
            try:
                val = float(txt)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad value {txt!r}") from None
            if not math.isfinite(val):
                raise FormatError(f"{path}:{lineno}: non-finite value")
        else:
            val = 0.0
        cells[key] = (val, obs)
    if not cells:
        raise FormatError(f"{path}: no cells")
    dims = _infer_shape(cells, shape, path)
    values = np.zeros(dims)
    observed = np.zeros(dims, bool)
    for (t, l, m), (val, obs) in cells.items():
        values[t, l, m] = val
        observed[t, l, m] = obs
    return DataCube(values, observed)


def _infer_shape(cells, shape, path):
    top = tuple(max(k[i] for k in cells) + 1 for i in range(3))
    if shape is None:
        return top
    shape = tuple(shape.as_tuple() if isinstance(shape, Shape3) else shape)
    if any(a > b for a, b in zip(top, shape)):
        raise FormatError(f"{path}: index {top} outside declared shape {shape}")
    return shape


def save_mask(mask: np.ndarray, path) -> None:
    T, L, M = mask.shape
    with open(path, "w", newline="") as f:
        f.write(",".join(MASK_HEADER) + "\n")
        for t in range(T):
            for l in range(L):
                for m in range(M):
                    f.write(f"{t},{l},{m},{int(bool(mask[t, l, m]))}\n")


def load_mask(path, shape=None) -> np.ndarray:
    cells = {}
    for lineno, row in _read_rows(path, MASK_HEADER):
        key = _index(path, lineno, row)
        if key in cells:
            raise FormatError(f"{path}:{lineno}: duplicate cell {key}")
        cells[key] = _flag(path, lineno, row[3])
    if not cells:
        raise FormatError(f"{path}: no cells")
    mask = np.zeros(_infer_shape(cells, shape, path), bool)
    for key, v in cells.items():
        mask[key] = v
    return mask


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()

