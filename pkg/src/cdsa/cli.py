"""``cdsa`` command line: gen-data, train, impute, eval, bench, export-attention.

Every command writes into ``--out`` (created if needed) and finishes with a
``manifest.json`` holding the effective config, its hash, the seed and the
sha256 of every input and output file.  Outputs are staged and only moved into
place once all of them were written; on any error nothing is left behind.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as dm
from . import model as md
from . import perf
from .attention import Variant
from .tensor_core import ShapeError, Shape3

log = logging.getLogger("cdsa")

THREADS_ENV = "CDSA_THREADS"

# Accepted config keys per command; nested "model" is checked by EncoderConfig.
SCHEMA = {
    "gen-data": {"kind", "shape", "noise", "params", "missing", "seed"},
    "train": {"model", "missing", "cube", "mask", "shape"},
    "impute": {"checkpoint", "cube", "mask"},
    "eval": {"truth", "mask", "pred", "checkpoint"},
    "bench": {"dims", "variants", "reps", "timing", "seed"},
    "export-attention": {"checkpoint", "cube", "start", "mask"},
}
MISSING_KEYS = {"target_rate", "burst_len_mean", "seed"}


class UsageError(Exception):
    """Bad flags or config; reported with exit status 2."""


def version_string() -> str:
    """``<version>+g<sha>[.dirty]`` when run from a git checkout, else the bare version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return __version__
    desc = out.stdout.strip()
    if out.returncode != 0 or not desc:
        return __version__
    return f"{__version__}+g{desc.replace('-dirty', '.dirty')}"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def parse_shape(text) -> tuple[int, int, int]:
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).lower().replace("x", ",").split(",")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"shape must be T,L,M integers, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise UsageError(f"shape must be three positive integers, got {text!r}")
    return dims


def load_config(path, command: str) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    unknown = set(cfg) - SCHEMA[command]
    if unknown:
        raise UsageError(f"{path}: unknown config keys for {command}: {sorted(unknown)}")
    if "missing" in cfg:
        bad = set(cfg["missing"]) - MISSING_KEYS
        if bad:
            raise UsageError(f"{path}: unknown missing keys: {sorted(bad)}")
    return cfg


class Outputs:
    """Stage files under ``out`` and publish them together, or not at all."""

    def __init__(self, out: Path, force: bool):
        self.out = Path(out)
        self.force = force
        self.staged: dict[Path, Path] = {}

    def path(self, name: str) -> Path:
        final = self.out / name
        if final.exists() and not self.force:
            raise UsageError(f"{final} exists; pass --force to overwrite")
        tmp = self.out / f".{name}.partial"
        self.staged[final] = tmp
        return tmp

    def refuse_existing(self, *names: str) -> None:
        """Fail before any work if a known output would be overwritten."""
        for name in names + ("manifest.json",):
            if (self.out / name).exists() and not self.force:
                raise UsageError(f"{self.out / name} exists; pass --force to overwrite")

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            for final, tmp in self.staged.items():
                os.replace(tmp, final)
        else:
            for tmp in self.staged.values():
                tmp.unlink(missing_ok=True)
        return False

    def digests(self) -> dict[str, str]:
        return {final.name: dm.file_sha256(tmp) for final, tmp in self.staged.items()}


def write_manifest(outs: Outputs, command: str, seed, cfg: dict, flags: dict, inputs: dict, **extra):
    manifest = {
        "command": command,
        "version": version_string(),
        "seed": seed,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "flags": {k: v for k, v in flags.items() if v is not None},
        "inputs": {str(p): dm.file_sha256(p) for p in inputs.values() if p is not None},
        "outputs": outs.digests(),
        **extra,
    }
    with open(outs.path("manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _pick(flag, cfg: dict, key, default=None):
    return flag if flag is not None else cfg.get(key, default)


def _missing_spec(args, cfg: dict, seed: int) -> dm.MissingSpec | None:
    base = dict(cfg.get("missing", {}))
    if args.missing_rate is not None:
        base["target_rate"] = args.missing_rate
    if args.burst_len is not None:
        base["burst_len_mean"] = args.burst_len
    if "target_rate" not in base:
        return None
    base.setdefault("seed", seed)
    return dm.MissingSpec(**base)


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, "gen-data")
    kind = _pick(args.kind, cfg, "kind")
    if kind not in dm.SYNTH_KINDS:
        raise UsageError(f"kind must be one of {list(dm.SYNTH_KINDS)}, got {kind!r}")
    shape = parse_shape(_pick(args.shape, cfg, "shape", "96,6,2"))
    noise = float(_pick(args.noise, cfg, "noise", 0.0))
    seed = int(_pick(args.seed, cfg, "seed", 0))
    params = dict(cfg.get("params", {}))
    cube = dm.synth_gen(kind, shape, seed=seed, noise=noise, **params)
    spec = _missing_spec(args, cfg, seed + 1)
    effective = {"kind": kind, "shape": list(shape), "noise": noise, "params": params}
    with Outputs(args.out, args.force) as outs:
        dm.save_cube(cube, outs.path("cube.csv"))
        if spec is not None:
            mask = dm.burst_mask(cube.observed, spec)
            dm.save_mask(mask, outs.path("mask.csv"))
            effective["missing"] = {"target_rate": spec.target_rate,
                                    "burst_len_mean": spec.burst_len_mean, "seed": spec.seed}
        write_manifest(outs, "gen-data", seed, effective, vars_of(args), {},
                       generation=cube.meta)
    return 0


def _model_config(args, cfg: dict) -> md.EncoderConfig:
    base = dict(cfg.get("model", {}))
    for key in ("variant", "epochs", "loss", "learning_rate", "n_layers", "c", "window_len_t"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    if args.seed is not None:
        base["seed"] = args.seed
    try:
        return md.EncoderConfig.from_dict(base)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid model config: {e}") from None


def cmd_train(args) -> int:
    cfg = load_config(args.config, "train")
    mcfg = _model_config(args, cfg)
    Outputs(args.out, args.force).refuse_existing("model.ckpt", "trace.csv")
    cube_path = _pick(args.cube, cfg, "cube")
    if cube_path is None:
        raise UsageError("train needs --cube")
    mask_path = _pick(args.mask, cfg, "mask")
    declared = cfg.get("shape")
    cube = dm.load_cube(cube_path, parse_shape(declared) if declared else None)
    s = cube.shape
    if mcfg.window_len_t > s.T:
        raise ShapeError(f"window_len_t={mcfg.window_len_t} exceeds cube length T={s.T}")
    spec = None
    if mask_path is not None:
        removed = dm.load_mask(mask_path, s)
    else:
        spec = _missing_spec(args, cfg, mcfg.seed)
        removed = dm.burst_mask(cube.observed, spec) if spec is not None else np.zeros(s.as_tuple(), bool)
    train_cube = cube.hide(removed)
    z = dm.normalize(train_cube)
    model = md.Model.init(mcfg, Shape3(mcfg.window_len_t, s.L, s.M), z.stats)
    result = md.train(model, md.TrainingSet(z), mcfg,
                      progress=lambda e, loss: log.info("epoch %d loss %.6f", e, loss))
    effective = {"model": mcfg.to_dict(), "cube": str(cube_path),
                 "mask": str(mask_path) if mask_path else None}
    if spec is not None:
        effective["missing"] = {"target_rate": spec.target_rate,
                                "burst_len_mean": spec.burst_len_mean, "seed": spec.seed}
    with Outputs(args.out, args.force) as outs:
        md.save_checkpoint(model, outs.path("model.ckpt"))
        with open(outs.path("trace.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "loss"])
            for i, v in enumerate(result.trace):
                w.writerow([i, repr(float(v))])
        if mask_path is None:
            dm.save_mask(removed, outs.path("mask.csv"))
        write_manifest(outs, "train", mcfg.seed, effective, vars_of(args),
                       {"cube": cube_path, "mask": mask_path}, model_digest=mcfg.digest(),
                       steps=result.steps)
    return 0


def _imputed(model: md.Model, cube: dm.DataCube, removed=None) -> dm.DataCube:
    visible = cube.hide(removed) if removed is not None else cube
    if (visible.shape.L, visible.shape.M) != (model.shape.L, model.shape.M):
        raise md.VersionError(f"checkpoint is for L={model.shape.L}, M={model.shape.M}; "
                              f"cube has {visible.shape.as_tuple()}")
    pred = md.impute(model, visible, threads=thread_count())
    # keep what was observed, fill the rest
    values = np.where(visible.observed, visible.values, pred.values)
    return dm.DataCube(values, np.ones(values.shape, bool))


def cmd_impute(args) -> int:
    cfg = load_config(args.config, "impute")
    ckpt = _pick(args.checkpoint, cfg, "checkpoint")
    cube_path = _pick(args.cube, cfg, "cube")
    mask_path = _pick(args.mask, cfg, "mask")
    if ckpt is None or cube_path is None:
        raise UsageError("impute needs --checkpoint and --cube")
    model = md.load_checkpoint(ckpt)
    cube = dm.load_cube(cube_path)
    removed = dm.load_mask(mask_path, cube.shape) if mask_path else None
    filled = _imputed(model, cube, removed)
    with Outputs(args.out, args.force) as outs:
        dm.save_cube(filled, outs.path("imputed.csv"))
        write_manifest(outs, "impute", model.cfg.seed,
                       {"checkpoint": str(ckpt), "cube": str(cube_path), "mask": mask_path},
                       vars_of(args), {"checkpoint": ckpt, "cube": cube_path, "mask": mask_path})
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, "eval")
    truth_path = _pick(args.truth, cfg, "truth")
    mask_path = _pick(args.mask, cfg, "mask")
    pred_path = _pick(args.pred, cfg, "pred")
    ckpt = _pick(args.checkpoint, cfg, "checkpoint")
    if truth_path is None or mask_path is None:
        raise UsageError("eval needs --truth and --mask")
    if (pred_path is None) == (ckpt is None):
        raise UsageError("eval needs exactly one of --pred or --checkpoint")
    truth = dm.load_cube(truth_path)
    removed = dm.load_mask(mask_path, truth.shape)
    mask = removed & truth.observed
    if not mask.any():
        raise dm.ContractError("eval mask selects no cells with ground truth")
    if pred_path is not None:
        pred = dm.load_cube(pred_path, truth.shape)
        if not pred.observed[mask].all():
            raise dm.FormatError(f"{pred_path}: prediction lacks values on evaluated cells")
    else:
        pred = _imputed(md.load_checkpoint(ckpt), truth, removed)
    report = dm.metrics(pred.values, truth.values, mask)
    with Outputs(args.out, args.force) as outs:
        with open(outs.path("metrics.json"), "w") as f:
            f.write(report.to_json())
        write_manifest(outs, "eval", None,
                       {"truth": str(truth_path), "mask": str(mask_path), "pred": pred_path,
                        "checkpoint": ckpt},
                       vars_of(args), {"truth": truth_path, "mask": mask_path, "pred": pred_path,
                                       "checkpoint": ckpt})
    print(report.to_json().strip())
    return 0


def _bench_dims(entry) -> perf.PerfDims:
    if isinstance(entry, str):
        T, L, M = parse_shape(entry)
        return perf.PerfDims(T, L, M)
    if isinstance(entry, dict):
        try:
            return perf.PerfDims(**entry)
        except TypeError as e:
            raise UsageError(f"bad bench dims {entry!r}: {e}") from None
    raise UsageError(f"bad bench dims {entry!r}")


def cmd_bench(args) -> int:
    cfg = load_config(args.config, "bench")
    Outputs(args.out, args.force).refuse_existing("bench.csv", "bench.json")
    dims = [_bench_dims(d) for d in (args.dims or cfg.get("dims") or ["10,10,10"])]
    variants = args.variants or cfg.get("variants") or [v.value for v in Variant]
    variants = [Variant.parse(v).value for v in variants]
    reps = int(_pick(args.reps, cfg, "reps", 5))
    timing = not args.no_timing and cfg.get("timing", True)
    seed = int(_pick(args.seed, cfg, "seed", 0))
    rows = perf.bench_rows(dims, variants, reps=reps, seed=seed, timing=timing)
    effective = {"dims": [d.__dict__ for d in dims], "variants": variants, "reps": reps, "timing": timing}
    with Outputs(args.out, args.force) as outs:
        with open(outs.path("bench.csv"), "w", newline="") as f:
            f.write(perf.rows_to_csv(rows))
        with open(outs.path("bench.json"), "w") as f:
            f.write(perf.rows_summary(rows))
        write_manifest(outs, "bench", seed, effective, vars_of(args), {})
    return 0


def write_map_csv(a: np.ndarray, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["i"] + list(range(a.shape[1])))
        for i, row in enumerate(a):
            w.writerow([i] + [repr(float(x)) for x in row])


def cmd_export_attention(args) -> int:
    cfg = load_config(args.config, "export-attention")
    ckpt = _pick(args.checkpoint, cfg, "checkpoint")
    cube_path = _pick(args.cube, cfg, "cube")
    mask_path = _pick(args.mask, cfg, "mask")
    start = int(_pick(args.start, cfg, "start", 0))
    if ckpt is None or cube_path is None:
        raise UsageError("export-attention needs --checkpoint and --cube")
    model = md.load_checkpoint(ckpt)
    cube = dm.load_cube(cube_path)
    if mask_path:
        cube = cube.hide(dm.load_mask(mask_path, cube.shape))
    s = cube.shape
    if (s.L, s.M) != (model.shape.L, model.shape.M):
        raise md.VersionError(f"checkpoint is for L={model.shape.L}, M={model.shape.M}; cube has {s.as_tuple()}")
    w = model.shape.T
    if not 0 <= start <= s.T - w:
        raise ShapeError(f"window [{start}, {start + w}) does not fit in T={s.T}")
    z = dm.normalize(cube, model.stats)
    maps: list[dict] = []
    md.predict_window(model, z.values[start:start + w], maps=maps)
    with Outputs(args.out, args.force) as outs:
        for i, layer in enumerate(maps):
            for key, a in sorted(layer.items()):
                if np.max(np.abs(a.sum(axis=1) - 1.0)) > 1e-9:
                    raise ValueError(f"layer {i} map {key} is not row-stochastic")
                write_map_csv(a, outs.path(f"layer{i}_A_{key}.csv"))
        write_manifest(outs, "export-attention", model.cfg.seed,
                       {"checkpoint": str(ckpt), "cube": str(cube_path), "mask": mask_path, "start": start},
                       vars_of(args), {"checkpoint": ckpt, "cube": cube_path, "mask": mask_path})
    return 0


# -- parser -------------------------------------------------------------------

def vars_of(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
            if k not in ("func", "verbose")}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdsa", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config; flags override its keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic cube")
    g.add_argument("--kind")
    g.add_argument("--shape", help="T,L,M")
    g.add_argument("--noise", type=float)
    g.add_argument("--missing-rate", type=float, help="also write a burst removal mask")
    g.add_argument("--burst-len", type=float)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train an imputation encoder")
    t.add_argument("--cube", type=Path)
    t.add_argument("--mask", type=Path, help="cells hidden from training (evaluation mask)")
    t.add_argument("--missing-rate", type=float, help="generate the hidden-cell mask instead")
    t.add_argument("--burst-len", type=float)
    t.add_argument("--variant", choices=[v.value for v in Variant])
    t.add_argument("--epochs", type=int)
    t.add_argument("--loss", choices=md.LOSSES)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--layers", dest="n_layers", type=int)
    t.add_argument("--channels", dest="c", type=int)
    t.add_argument("--window", dest="window_len_t", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("impute", parents=[common], help="fill a cube with a trained model")
    i.add_argument("--checkpoint", type=Path)
    i.add_argument("--cube", type=Path)
    i.add_argument("--mask", type=Path, help="additionally hide these cells before imputing")
    i.set_defaults(func=cmd_impute)

    e = sub.add_parser("eval", parents=[common], help="metrics on removed cells")
    e.add_argument("--truth", type=Path)
    e.add_argument("--mask", type=Path)
    src = e.add_mutually_exclusive_group()
    src.add_argument("--pred", type=Path)
    src.add_argument("--checkpoint", type=Path)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="FLOP/variable counts and timings")
    b.add_argument("--dims", action="append", help="T,L,M (repeatable)")
    b.add_argument("--variants", nargs="+")
    b.add_argument("--reps", type=int)
    b.add_argument("--no-timing", action="store_true")
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("export-attention", parents=[common], help="dump per-layer attention maps")
    x.add_argument("--checkpoint", type=Path)
    x.add_argument("--cube", type=Path)
    x.add_argument("--mask", type=Path)
    x.add_argument("--start", type=int, help="first time stamp of the window")
    x.set_defaults(func=cmd_export_attention)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"cdsa {args.command}: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"cdsa {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
