"""Analytic FLOP / variable counts per attention variant and a forward-pass timer.

Counting rules (one attention layer, one forward pass):

* dense product (n x k) @ (k x m): ``2*n*k*m`` (multiply-add = 2)
* bias add, score scaling, fusion scale/add: 1 per element
* softmax over an r x c score block: 4 per element (max-shift, exp, sum, divide)
* applying an n x n map along one axis of an N x w tensor: ``2*n*N*w``
"""

from __future__ import annotations

import csv
import io
import json
import platform
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import attention
from .attention import AttentionDims, Variant
from .tensor_core import DIMS, KRON_GUARD, CapacityError, Shape3

CSV_COLUMNS = ["variant", "T", "L", "M", "C", "d", "v", "d_t", "d_l", "d_m", "ff_hidden", "n_layers",
               "flops", "variables", "attention_variables", "peak_map_cells",
               "median_s", "iqr_s", "reps", "status", "reason"]


@dataclass(frozen=True)
class PerfDims:
    T: int
    L: int
    M: int
    C: int = 16
    d: int = 16
    v: int = 16
    d_t: int = 16
    d_l: int = 16
    d_m: int = 16
    ff_hidden: int = 32
    n_layers: int = 1
    stream_depth: int = 1

    @property
    def shape(self) -> Shape3:
        return Shape3(self.T, self.L, self.M)

    @property
    def attention_dims(self) -> AttentionDims:
        return AttentionDims(self.C, self.d, self.v, self.d_t, self.d_l, self.d_m, self.stream_depth)


@dataclass
class FlopsReport:
    variant: str
    dims: PerfDims
    flops: int
    variables: int
    peak_map_cells: int


def _affine(n, k, m):
    return 2 * n * k * m + n * m


def _scores(n, k):
    return 2 * n * n * k + n * n


def _softmax(r, c):
    return 4 * r * c


def count_flops(variant, dims: PerfDims) -> FlopsReport:
    variant = Variant.parse(variant)
    s = dims.shape
    n = s.size
    c = dims.C
    ext = {d: s.extent(d) for d in DIMS}
    if variant is Variant.JOINT:
        f = 2 * _affine(n, c, dims.d) + _affine(n, c, dims.v)
        f += _scores(n, dims.d) + _softmax(n, n) + 2 * n * n * dims.v
        f += _affine(n, dims.v, c)
        peak = n * n
    elif variant is Variant.SHARED:
        f = 2 * _affine(n, c, dims.d) + _affine(n, c, dims.v)
        for d in DIMS:
            f += _scores(ext[d], n // ext[d] * dims.d) + _softmax(ext[d], ext[d])
            f += 2 * ext[d] * n * dims.v
        f += _affine(n, dims.v, c)
        peak = max(e * e for e in ext.values())
    elif variant is Variant.DECOMPOSED:
        f = 0
        for d in DIMS:
            r, w = n // ext[d] * c, dims.attention_dims.axis_width(d)
            f += 2 * _affine(ext[d], r, w) + _scores(ext[d], w) + _softmax(ext[d], ext[d])
            f += 2 * ext[d] * n * dims.v
        f += _affine(n, c, dims.v) + _affine(n, dims.v, c)
        peak = max(e * e for e in ext.values())
    else:
        f = 0
        for d in DIMS:
            r, w = n // ext[d] * c, dims.attention_dims.axis_width(d)
            per = 2 * _affine(ext[d], r, w) + _scores(ext[d], w) + _softmax(ext[d], ext[d])
            per += 2 * _affine(ext[d], r, r) + 2 * ext[d] * ext[d] * r
            f += dims.stream_depth * per
        f += 3 * n * c + 2 * n * c  # alpha scaling and fusion sum
        peak = max(e * e for e in ext.values())
    return FlopsReport(variant.value, dims, int(f), count_variables(variant, dims), int(peak))


def count_attention_variables(variant, dims: PerfDims) -> int:
    shapes = attention.param_shapes(variant, dims.shape, dims.attention_dims)
    return int(sum(int(np.prod(s, dtype=np.int64)) for s in shapes.values()))


def count_variables(variant, dims: PerfDims, positional: bool = False) -> int:
    """Trainable scalars of a whole encoder (embedding, layers, head) with ``dims.n_layers`` layers."""
    c, h = dims.C, dims.ff_hidden
    per_layer = count_attention_variables(variant, dims) + 4 * c + (c * h + h) + (h * c + c)
    total = 2 * dims.M * c + dims.n_layers * per_layer + (c + 1)
    if positional:
        total += (dims.T + dims.L + dims.M) * c
    return int(total)


@dataclass
class TimingReport:
    variant: str
    dims: PerfDims
    samples: list
    median: float | None
    iqr: float | None
    checksum: float | None
    status: str = "ok"
    reason: str = ""
    meta: dict | None = None


def time_forward(variant, dims: PerfDims, reps: int = 5, seed: int = 0, warmup: int = 1) -> TimingReport:
    """Median wall time of ``reps`` single-layer attention forward passes."""
    if reps < 5:
        raise ValueError("reps must be at least 5")
    variant = Variant.parse(variant)
    meta = {"python": platform.python_version(), "numpy": np.__version__, "machine": platform.machine()}
    if variant is Variant.JOINT and dims.shape.size > KRON_GUARD:
        return TimingReport(variant.value, dims, [], None, None, None, "skipped",
                            f"joint map over TLM={dims.shape.size} exceeds guard {KRON_GUARD}", meta)
    rng = np.random.default_rng(seed)
    params = attention.init_params(variant, dims.shape, dims.attention_dims, rng)
    h = rng.standard_normal(dims.shape.as_tuple() + (dims.C,))
    try:
        for _ in range(warmup):
            out, _ = attention.run(variant, h, params)
    except CapacityError as e:
        return TimingReport(variant.value, dims, [], None, None, None, "skipped", str(e), meta)
    samples, sums = [], []
    for _ in range(reps):
        t0 = time.perf_counter()
        out, _ = attention.run(variant, h, params)
        samples.append(time.perf_counter() - t0)
        sums.append(float(out.sum()))
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    if len(set(sums)) != 1:
        raise RuntimeError("forward pass is not deterministic across repetitions")
    return TimingReport(variant.value, dims, samples, float(med), float(q3 - q1), sums[0], meta=meta)


def bench_rows(dims_list, variants, reps: int = 5, seed: int = 0, timing: bool = True) -> list[dict]:
    rows = []
    for dims in dims_list:
        for variant in variants:
            fr = count_flops(variant, dims)
            row = {"variant": fr.variant, **{k: getattr(dims, k) for k in
                   ("T", "L", "M", "C", "d", "v", "d_t", "d_l", "d_m", "ff_hidden", "n_layers")},
                   "flops": fr.flops, "variables": fr.variables,
                   "attention_variables": count_attention_variables(variant, dims),
                   "peak_map_cells": fr.peak_map_cells,
                   "median_s": "", "iqr_s": "", "reps": 0, "status": "ok", "reason": ""}
            if timing:
                tr = time_forward(variant, dims, reps, seed)
                row.update(status=tr.status, reason=tr.reason, reps=len(tr.samples))
                if tr.median is not None:
                    row.update(median_s=f"{tr.median:.6g}", iqr_s=f"{tr.iqr:.6g}")
            rows.append(row)
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def rows_summary(rows) -> str:
    by_variant: dict[str, list] = {}
    for r in rows:
        by_variant.setdefault(r["variant"], []).append(r)
    summary = {
        "rows": len(rows),
        "skipped": sum(r["status"] != "ok" for r in rows),
        "variants": {v: {"max_flops": max(r["flops"] for r in rs),
                         "max_variables": max(r["variables"] for r in rs)}
                     for v, rs in by_variant.items()},
    }
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def report_dict(fr: FlopsReport) -> dict:
    out = asdict(fr)
    out["dims"] = asdict(fr.dims)
    return out
