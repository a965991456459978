"""Imputation encoder: embedding, N post-norm attention layers, per-cell output head."""

from __future__ import annotations

import fnmatch
import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import attention
from . import autograd as ag
from . import data as dm
from .attention import AttentionDims, Variant
from .tensor_core import Dim, NumericError, ShapeError, Shape3

log = logging.getLogger(__name__)

MAGIC = b"CDSA1"
LOSSES = ("rmse", "mae", "mse", "rmse+mae")
LOSS_CELLS = ("union", "observed", "removed")


class VersionError(ValueError):
    pass


@dataclass
class EncoderConfig:
    variant: str = "decomposed"
    n_layers: int = 2
    c: int = 16
    d: int = 16
    v: int = 16
    d_t: int = 16
    d_l: int = 16
    d_m: int = 16
    ff_hidden: int = 32
    stream_depth: int = 1
    positional: bool = False
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    epochs: int = 100
    window_len_t: int = 24
    steps_per_epoch: int = 0  # 0: one pass worth of windows, T // window_len_t
    loss: str = "rmse"
    loss_cells: str = "union"
    train_mask_rate: float = 0.2
    train_burst_len: float = 4.0
    alpha_init: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    frozen: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        self.variant = Variant.parse(self.variant).value
        self.betas = tuple(self.betas)
        self.alpha_init = tuple(self.alpha_init)
        self.frozen = tuple(self.frozen)
        for name in ("n_layers", "c", "d", "v", "d_t", "d_l", "d_m", "ff_hidden",
                     "stream_depth", "window_len_t"):
            if int(getattr(self, name)) < 1:
                raise dm.ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.steps_per_epoch < 0:
            raise dm.ConfigError("epochs and steps_per_epoch must be non-negative")
        if self.loss not in LOSSES:
            raise dm.ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.loss_cells not in LOSS_CELLS:
            raise dm.ConfigError(f"loss_cells must be one of {LOSS_CELLS}, got {self.loss_cells!r}")
        if not 0.0 <= self.train_mask_rate < 1.0:
            raise dm.ConfigError("train_mask_rate must be in [0, 1)")
        if self.learning_rate < 0:
            raise dm.ConfigError("learning_rate must be non-negative")

    @property
    def attention_dims(self) -> AttentionDims:
        return AttentionDims(self.c, self.d, self.v, self.d_t, self.d_l, self.d_m, self.stream_depth)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise dm.ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        out["alpha_init"] = list(self.alpha_init)
        out["frozen"] = list(self.frozen)
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def model_param_shapes(cfg: EncoderConfig, shape: Shape3) -> dict[str, tuple[int, ...]]:
    c, M = cfg.c, shape.M
    out: dict[str, tuple[int, ...]] = {"embed.w": (M, c), "embed.b": (M, c)}
    if cfg.positional:
        out.update({"pos.T": (shape.T, c), "pos.L": (shape.L, c), "pos.M": (shape.M, c)})
    attn = attention.param_shapes(cfg.variant, shape, cfg.attention_dims)
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        out.update({pre + "attn." + k: s for k, s in attn.items()})
        out.update({pre + "norm1.g": (c,), pre + "norm1.b": (c,),
                    pre + "ff1.w": (c, cfg.ff_hidden), pre + "ff1.b": (cfg.ff_hidden,),
                    pre + "ff2.w": (cfg.ff_hidden, c), pre + "ff2.b": (c,),
                    pre + "norm2.g": (c,), pre + "norm2.b": (c,)})
    out.update({"head.w": (c, 1), "head.b": (1,)})
    return out


@dataclass
class Model:
    """Encoder parameters bound to a window shape (T = window length, L, M)."""

    cfg: EncoderConfig
    shape: Shape3
    params: dict[str, np.ndarray]
    stats: dm.NormStats | None = None

    @classmethod
    def init(cls, cfg: EncoderConfig, shape: Shape3, stats=None) -> "Model":
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0])
        c = cfg.c
        params: dict[str, np.ndarray] = {
            "embed.w": rng.uniform(-1.0, 1.0, size=(shape.M, c)),
            "embed.b": rng.uniform(-1.0, 1.0, size=(shape.M, c)),
        }
        if cfg.positional:
            params["pos.T"] = sinusoid_table(shape.T, c)
            params["pos.L"] = rng.normal(0.0, 0.1, size=(shape.L, c))
            params["pos.M"] = rng.normal(0.0, 0.1, size=(shape.M, c))
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            attn = attention.init_params(cfg.variant, shape, cfg.attention_dims, rng)
            for k, a in zip("TLM", cfg.alpha_init):
                if f"alpha_{k}" in attn:
                    attn[f"alpha_{k}"] = np.array(float(a))
            params.update({pre + "attn." + k: v for k, v in attn.items()})
            params[pre + "norm1.g"] = np.ones(c)
            params[pre + "norm1.b"] = np.zeros(c)
            params[pre + "ff1.w"] = attention._uniform(rng, c, (c, cfg.ff_hidden))
            params[pre + "ff1.b"] = np.zeros(cfg.ff_hidden)
            params[pre + "ff2.w"] = attention._uniform(rng, cfg.ff_hidden, (cfg.ff_hidden, c))
            params[pre + "ff2.b"] = np.zeros(c)
            params[pre + "norm2.g"] = np.ones(c)
            params[pre + "norm2.b"] = np.zeros(c)
        params["head.w"] = attention._uniform(rng, c, (c, 1))
        params["head.b"] = np.zeros(1)
        return cls(cfg, shape, params, stats)

    @property
    def n_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def trainable(self) -> list[str]:
        return [k for k in sorted(self.params)
                if not any(fnmatch.fnmatchcase(k, pat) for pat in self.cfg.frozen)]


def sinusoid_table(n: int, c: int) -> np.ndarray:
    """Fixed sine/cosine position codes used to initialize the learned time embedding."""
    pos = np.arange(n)[:, None]
    freq = 1.0 / (10000.0 ** (2 * (np.arange(c) // 2) / c))
    ang = pos * freq[None, :]
    return np.where(np.arange(c) % 2 == 0, np.sin(ang), np.cos(ang))


# -- forward ------------------------------------------------------------------

def embed(x, p, cfg: EncoderConfig, normalized: bool = True) -> ag.Var:
    """Lift a normalized T x L x M cube to T x L x M x C (per-measurement affine)."""
    if not normalized:
        raise dm.ContractError("embedding expects a normalized, zero-filled cube")
    if not isinstance(x, ag.Var):
        x = p["embed.w"].tape.const(x)
    h = ag.mul(ag.reshape(x, x.shape + (1,)), p["embed.w"]) + p["embed.b"]
    if cfg.positional:
        T, L, M = x.shape
        c = cfg.c
        h = h + ag.reshape(p["pos.T"], (T, 1, 1, c))
        h = h + ag.reshape(p["pos.L"], (1, L, 1, c))
        h = h + ag.reshape(p["pos.M"], (1, 1, M, c))
    return h


def _sub(p, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}


def encoder_layer_forward(h: ag.Var, p, variant, index: int = 0, order=attention.DEFAULT_ORDER,
                          maps=None) -> ag.Var:
    pre = f"layer{index}."
    a = attention.forward(variant, h, _sub(p, pre + "attn."), order, maps)
    h1 = ag.layer_norm(h + a, p[pre + "norm1.g"], p[pre + "norm1.b"])
    f = ag.relu(ag.affine(h1, p[pre + "ff1.w"], p[pre + "ff1.b"]))
    f = ag.affine(f, p[pre + "ff2.w"], p[pre + "ff2.b"])
    out = ag.layer_norm(h1 + f, p[pre + "norm2.g"], p[pre + "norm2.b"])
    if not np.all(np.isfinite(out.value)):
        raise NumericError(f"non-finite activations in layer {index}")
    return out


def forward(x, p, cfg: EncoderConfig, order=attention.DEFAULT_ORDER, maps=None) -> ag.Var:
    """Normalized T x L x M input -> normalized T x L x M reconstruction."""
    h = embed(x, p, cfg)
    for i in range(cfg.n_layers):
        layer_maps = {} if maps is not None else None
        h = encoder_layer_forward(h, p, cfg.variant, i, order, layer_maps)
        if maps is not None:
            maps.append(layer_maps)
    y = ag.affine(h, p["head.w"], p["head.b"])
    return ag.reshape(y, y.shape[:3])


def predict_window(model: Model, x: np.ndarray, maps=None) -> np.ndarray:
    if Shape3.of(x) != model.shape:
        raise ShapeError(f"window {x.shape} does not match model shape {model.shape.as_tuple()}")
    tape = ag.Tape(grad=False)
    pv = {k: tape.param(k, v) for k, v in model.params.items()}
    return forward(tape.const(x), pv, model.cfg, maps=maps).value


def window_starts(total: int, w: int) -> list[int]:
    if total < w:
        raise ShapeError(f"cube has {total} time stamps, model window needs {w}")
    starts = list(range(0, total - w + 1, w))
    if starts[-1] != total - w:
        starts.append(total - w)
    return starts


def impute(model: Model, cube: dm.DataCube, threads: int = 1) -> dm.DataCube:
    """Dense reconstruction of every cell, in the cube's original units.

    The cube is cut into consecutive windows of the model's length (the last
    one aligned to the end); overlapping predictions are averaged.
    """
    s = cube.shape
    if (s.L, s.M) != (model.shape.L, model.shape.M):
        raise ShapeError(f"cube {s.as_tuple()} does not match model L={model.shape.L}, M={model.shape.M}")
    if cube.normalized:
        z = cube
    else:
        z = dm.normalize(cube, model.stats)
    w = model.shape.T
    starts = window_starts(s.T, w)

    def run(st):
        return predict_window(model, z.values[st:st + w])

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            preds = list(ex.map(run, starts))
    else:
        preds = [run(st) for st in starts]
    acc = np.zeros(z.values.shape)
    cnt = np.zeros((s.T, 1, 1))
    for st, pr in zip(starts, preds):
        acc[st:st + w] += pr
        cnt[st:st + w] += 1
    out = dm.DataCube(acc / cnt, np.ones(acc.shape, bool), stats=z.stats, normalized=True)
    return dm.denormalize(out, z.stats)


# -- losses / optimizer -------------------------------------------------------

def masked_rmse(pred, truth, mask) -> float:
    """Root mean squared error over the cells selected by ``mask``."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise dm.ContractError("mask selects no cells")
    e = (np.asarray(pred, float) - np.asarray(truth, float))[mask]
    return float(np.sqrt(np.mean(e * e)))


def loss_fn(kind: str, pred: ag.Var, truth, mask) -> ag.Var:
    if kind == "rmse":
        return ag.masked_rmse(pred, truth, mask)
    if kind == "mae":
        return ag.masked_mae(pred, truth, mask)
    if kind == "mse":
        return ag.masked_mse(pred, truth, mask)
    if kind == "rmse+mae":
        return ag.mul(0.5, ag.masked_rmse(pred, truth, mask) + ag.masked_mae(pred, truth, mask))
    raise dm.ConfigError(f"unknown loss {kind!r}")


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, tuple(betas), eps

    def init(self, params) -> OptimState:
        return OptimState({k: np.zeros_like(a) for k, a in params.items()},
                          {k: np.zeros_like(a) for k, a in params.items()})

    def update(self, params, grads, state: OptimState, names=None) -> None:
        """In-place Adam step on ``params`` restricted to ``names``."""
        b1, b2 = self.betas
        state.step += 1
        c1 = 1.0 - b1 ** state.step
        c2 = 1.0 - b2 ** state.step
        for k in (names if names is not None else sorted(params)):
            g = grads[k]
            state.m[k] = b1 * state.m[k] + (1 - b1) * g
            state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
            if self.lr == 0:
                continue
            params[k] = params[k] - self.lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + self.eps)


# -- training -----------------------------------------------------------------

@dataclass
class TrainingSet:
    """Normalized training cube plus an optional fixed artificial-removal mask.

    Cells in ``removed`` keep their ground truth in ``cube.values`` but are
    hidden from the model input; they count as loss targets.  Cells that are
    unobserved in ``cube`` are never used.
    """

    cube: dm.DataCube
    removed: np.ndarray | None = None

    def __post_init__(self):
        if not self.cube.normalized:
            raise dm.ContractError("training cube must be normalized")
        if self.removed is None:
            self.removed = np.zeros(self.cube.values.shape, bool)
        self.removed = np.asarray(self.removed, bool) & self.cube.observed


@dataclass
class TrainResult:
    model: Model
    trace: list[float] = field(default_factory=list)
    steps: int = 0


MAX_RESAMPLE = 100


def _sample_step(ds: TrainingSet, cfg: EncoderConfig, rng):
    T = ds.cube.values.shape[0]
    w = cfg.window_len_t
    for _ in range(MAX_RESAMPLE):
        st = int(rng.integers(0, T - w + 1))
        vals = ds.cube.values[st:st + w]
        obs = ds.cube.observed[st:st + w]
        removed = ds.removed[st:st + w].copy()
        if cfg.train_mask_rate > 0 and obs.any():
            visible = obs & ~removed
            natural = 1.0 - visible.mean()
            target = min(natural + cfg.train_mask_rate * visible.mean(), 0.999)
            spec = dm.MissingSpec(target, cfg.train_burst_len)
            try:
                removed |= dm.burst_mask(visible, spec, rng=rng)
            except dm.ContractError:
                pass
        if cfg.loss_cells == "union":
            loss_mask = obs
        elif cfg.loss_cells == "removed":
            loss_mask = removed
        else:
            loss_mask = obs & ~removed
        if loss_mask.any():
            visible = obs & ~removed
            return np.where(visible, vals, 0.0), visible, vals, loss_mask
    raise dm.ContractError(f"no window with loss cells after {MAX_RESAMPLE} draws")


def train(model: Model, ds: TrainingSet, cfg: EncoderConfig | None = None, progress=None) -> TrainResult:
    """Adam on random windows; returns the model (updated in place) and per-epoch mean loss."""
    cfg = cfg or model.cfg
    T, L, M = ds.cube.values.shape
    if (L, M) != (model.shape.L, model.shape.M) or cfg.window_len_t != model.shape.T:
        raise ShapeError(f"training cube {T}x{L}x{M} / window {cfg.window_len_t} does not "
                         f"match model shape {model.shape.as_tuple()}")
    if T < cfg.window_len_t:
        raise ShapeError(f"training cube has {T} time stamps, window needs {cfg.window_len_t}")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    opt = Adam(cfg.learning_rate, cfg.betas, cfg.epsilon)
    names = model.trainable()
    state = opt.init({k: model.params[k] for k in names})
    trainable = set(names)
    steps = cfg.steps_per_epoch or max(1, T // cfg.window_len_t)
    result = TrainResult(model)
    for epoch in range(cfg.epochs):
        losses = []
        for _ in range(steps):
            x, visible, truth, mask = _sample_step(ds, cfg, rng)
            tape = ag.Tape()
            pv = {k: tape.param(k, v) if k in trainable else tape.const(v) for k, v in model.params.items()}
            pred = forward(tape.const(x), pv, model.cfg)
            loss = loss_fn(cfg.loss, pred, truth, mask)
            grads = ag.backward(tape, loss)
            losses.append(float(loss.value))
            tape.clear()
            opt.update(model.params, grads, state, names)
            result.steps += 1
        result.trace.append(float(np.mean(losses)))
        if progress is not None:
            progress(epoch, result.trace[-1])
    return result


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    """``CDSA1\\n`` + u64 header length + JSON header + little-endian float64 payload."""
    names = sorted(model.params)
    table, offset = [], 0
    for k in names:
        a = model.params[k]
        table.append({"name": k, "shape": list(a.shape), "offset": offset})
        offset += a.size
    header = {"format": MAGIC.decode(), "config": model.cfg.to_dict(),
              "shape": list(model.shape.as_tuple()),
              "stats": model.stats.to_dict() if model.stats is not None else None,
              "params": table}
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + b"\n")
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for k in names:
            f.write(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(MAGIC + b"\n"):
        raise VersionError(f"{path}: not a {MAGIC.decode()} checkpoint")
    pos = len(MAGIC) + 1
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos:pos + n])
    pos += n
    payload = np.frombuffer(raw, dtype="<f8", offset=pos)
    cfg = EncoderConfig.from_dict(header["config"])
    shape = Shape3(*header["shape"])
    params = {}
    for entry in header["params"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        params[entry["name"]] = payload[entry["offset"]:entry["offset"] + size].astype(np.float64).reshape(entry["shape"])
    expected = model_param_shapes(cfg, shape)
    got = {k: tuple(v.shape) for k, v in params.items()}
    if got != expected:
        raise VersionError(f"{path}: parameter table does not match its config")
    stats = dm.NormStats.from_dict(header["stats"]) if header["stats"] else None
    return Model(cfg, shape, params, stats)


def with_config(model: Model, **overrides) -> Model:
    return replace(model, cfg=replace(model.cfg, **overrides))
