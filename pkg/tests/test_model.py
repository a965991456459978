import numpy as np
import pytest

from cdsa import autograd as ag
from cdsa import data as dm
from cdsa import model as md
from cdsa.tensor_core import ShapeError, Shape3

SMALL = dict(n_layers=1, c=4, d=3, v=3, d_t=3, d_l=3, d_m=3, ff_hidden=5, window_len_t=6)


def small_model(variant="decomposed", **kw):
    cfg = md.EncoderConfig(variant=variant, **{**SMALL, **kw})
    return md.Model.init(cfg, Shape3(cfg.window_len_t, 3, 2))


def small_cube(seed=0, T=20):
    cube = dm.synth_gen("seasonal", (T, 3, 2), seed=seed, noise=0.1)
    return cube


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(dm.ConfigError):
            md.EncoderConfig.from_dict({"variant": "joint", "n_heads": 4})

    def test_bad_values(self):
        for kw in ({"c": 0}, {"loss": "huber"}, {"loss_cells": "all"}, {"train_mask_rate": 1.0},
                   {"learning_rate": -1.0}):
            with pytest.raises(dm.ConfigError):
                md.EncoderConfig(**kw)
        with pytest.raises(ValueError):
            md.EncoderConfig(variant="sparse")

    def test_roundtrip_and_digest(self):
        cfg = md.EncoderConfig(variant="shared", frozen=("*alpha*",))
        again = md.EncoderConfig.from_dict(cfg.to_dict())
        assert again == cfg and again.digest() == cfg.digest()
        assert md.EncoderConfig(seed=1).digest() != md.EncoderConfig(seed=2).digest()


@pytest.mark.parametrize("variant", ["independent", "joint", "shared", "decomposed"])
@pytest.mark.parametrize("positional", [False, True])
def test_init_matches_declared_shapes(variant, positional):
    m = small_model(variant, positional=positional)
    assert {k: v.shape for k, v in m.params.items()} == md.model_param_shapes(m.cfg, m.shape)
    assert m.n_params == sum(int(np.prod(s)) for s in md.model_param_shapes(m.cfg, m.shape).values())


def test_init_is_seeded():
    a, b, c = small_model(seed=3), small_model(seed=3), small_model(seed=4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["embed.w"], c.params["embed.w"])


def test_sinusoid_table():
    tab = md.sinusoid_table(5, 4)
    np.testing.assert_allclose(tab[:, 0], np.sin(np.arange(5)))
    np.testing.assert_allclose(tab[:, 1], np.cos(np.arange(5)))
    np.testing.assert_allclose(tab[:, 2], np.sin(np.arange(5) / 100.0))


@pytest.mark.parametrize("variant", ["independent", "joint", "shared", "decomposed"])
def test_forward_shape_and_maps(variant):
    m = small_model(variant)
    x = np.random.default_rng(0).standard_normal(m.shape.as_tuple())
    maps = []
    y = md.predict_window(m, x, maps=maps)
    assert y.shape == x.shape and len(maps) == m.cfg.n_layers
    with pytest.raises(ShapeError):
        md.predict_window(m, x[:-1])


def test_embed_is_per_measurement_affine():
    m = small_model()
    x = np.random.default_rng(1).standard_normal(m.shape.as_tuple())
    tape = ag.Tape(grad=False)
    p = {k: tape.param(k, v) for k, v in m.params.items()}
    h = md.embed(x, p, m.cfg).value
    expected = x[..., None] * m.params["embed.w"] + m.params["embed.b"]
    np.testing.assert_allclose(h, expected)


@pytest.mark.parametrize("variant", ["independent", "decomposed"])
def test_encoder_gradients(variant):
    m = small_model(variant, n_layers=2, positional=True)
    rng = np.random.default_rng(2)
    x = rng.standard_normal(m.shape.as_tuple())
    truth = rng.standard_normal(x.shape)
    mask = rng.random(x.shape) < 0.5

    def f(tape, p):
        return ag.masked_rmse(md.forward(tape.const(x), p, m.cfg), truth, mask)

    assert ag.fd_check(f, m.params, max_coords=256, seed=1).max_rel_error <= 1e-5


class TestAdam:
    def test_matches_reference(self):
        # hand-unrolled reference for two steps
        p = {"w": np.array([1.0, -2.0])}
        g1, g2 = np.array([0.5, 1.0]), np.array([-0.25, 2.0])
        opt = md.Adam(lr=0.1, betas=(0.9, 0.999), eps=1e-8)
        st = opt.init(p)
        opt.update(p, {"w": g1}, st)
        opt.update(p, {"w": g2}, st)
        w = np.array([1.0, -2.0])
        m = v = np.zeros(2)
        for t, g in enumerate((g1, g2), start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p["w"], w, rtol=0, atol=1e-15)

    def test_first_step_is_lr_times_sign(self):
        p = {"w": np.array([0.0, 0.0, 0.0])}
        opt = md.Adam(lr=0.01)
        opt.update(p, {"w": np.array([3.0, -1e-3, 0.0])}, opt.init(p))
        np.testing.assert_allclose(p["w"], [-0.01, 0.01, 0.0], atol=1e-7)

    def test_zero_lr_is_noop(self):
        p = {"w": np.array([1.0])}
        opt = md.Adam(lr=0.0)
        opt.update(p, {"w": np.array([5.0])}, opt.init(p))
        assert p["w"][0] == 1.0


class TestTraining:
    def _setup(self, **kw):
        cube = small_cube()
        z = dm.normalize(cube)
        m = small_model(epochs=3, steps_per_epoch=2, learning_rate=1e-2, **kw)
        return m, md.TrainingSet(z)

    def test_trace_and_determinism(self):
        m1, ds = self._setup()
        m2, _ = self._setup()
        r1, r2 = md.train(m1, ds), md.train(m2, ds)
        assert len(r1.trace) == 3 and r1.steps == 6
        assert r1.trace == r2.trace
        assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)

    def test_frozen_params_unchanged(self):
        m, ds = self._setup(variant="independent", frozen=("*alpha_L", "*alpha_M", "embed.*"))
        before = {k: v.copy() for k, v in m.params.items()}
        md.train(m, ds)
        for k in m.params:
            same = np.array_equal(m.params[k], before[k])
            assert same == (k.endswith(("alpha_L", "alpha_M")) or k.startswith("embed."))

    def test_loss_decreases(self):
        m, ds = self._setup()
        cfg = md.with_config(m, epochs=40).cfg
        r = md.train(m, ds, cfg)
        assert np.mean(r.trace[-5:]) < r.trace[0]

    def test_hidden_cells_never_visible(self):
        cube = small_cube()
        z = dm.normalize(cube)
        removed = np.zeros(z.values.shape, bool)
        removed[5:9, 1, 0] = True
        ds = md.TrainingSet(z, removed)
        cfg = md.EncoderConfig(**{**SMALL, "loss_cells": "removed"})
        rng = np.random.default_rng(0)
        for _ in range(50):
            x, visible, truth, mask = md._sample_step(ds, cfg, rng)
            assert mask.any() and not np.any(visible & mask)
            assert np.all(x[~visible] == 0.0)

    def test_removed_never_in_input(self):
        z = dm.normalize(small_cube())
        removed = np.zeros(z.values.shape, bool)
        removed[:, 2, 1] = True
        ds = md.TrainingSet(z, removed)
        cfg = md.EncoderConfig(**SMALL)
        rng = np.random.default_rng(5)
        for _ in range(30):
            x, visible, _, _ = md._sample_step(ds, cfg, rng)
            assert not visible[:, 2, 1].any() and np.all(x[:, 2, 1] == 0.0)

    def test_shape_mismatch(self):
        m = small_model()
        ds = md.TrainingSet(dm.normalize(dm.synth_gen("seasonal", (20, 4, 2), seed=0)))
        with pytest.raises(ShapeError):
            md.train(m, ds)


class TestImpute:
    def test_window_starts(self):
        assert md.window_starts(20, 6) == [0, 6, 12, 14]
        assert md.window_starts(12, 6) == [0, 6]
        assert md.window_starts(6, 6) == [0]
        with pytest.raises(ShapeError):
            md.window_starts(5, 6)

    def test_overlap_averaging(self):
        cube = small_cube(T=20)
        z = dm.normalize(cube)
        m = small_model()
        m.stats = z.stats
        out = md.impute(m, cube)
        w = m.shape.T
        p14 = md.predict_window(m, z.values[14:20])
        p12 = md.predict_window(m, z.values[12:18])
        expect = 0.5 * (p12[2:4] + p14[0:2])
        back = dm.denormalize(dm.DataCube(expect, np.ones(expect.shape, bool), z.stats, True), z.stats)
        np.testing.assert_allclose(out.values[14:16], back.values, atol=1e-12)
        assert out.values.shape == cube.values.shape and w == 6

    def test_threads_match_serial(self):
        cube = small_cube(T=30)
        m = small_model()
        m.stats = dm.normalize(cube).stats
        assert np.array_equal(md.impute(m, cube).values, md.impute(m, cube, threads=3).values)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        m = small_model("independent", positional=True)
        m.stats = dm.normalize(small_cube()).stats
        path = tmp_path / "m.ckpt"
        md.save_checkpoint(m, path)
        back = md.load_checkpoint(path)
        assert back.cfg == m.cfg and back.shape == m.shape
        assert all(np.array_equal(back.params[k], m.params[k]) for k in m.params)
        np.testing.assert_array_equal(back.stats.mean, m.stats.mean)
        assert path.read_bytes().startswith(b"CDSA1\n")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"CDSA0\nxxxx")
        with pytest.raises(md.VersionError):
            md.load_checkpoint(path)

    def test_table_mismatch(self, tmp_path):
        m = small_model()
        del m.params["head.b"]
        path = tmp_path / "m.ckpt"
        md.save_checkpoint(m, path)
        with pytest.raises(md.VersionError):
            md.load_checkpoint(path)


@pytest.mark.parametrize("kind", md.LOSSES)
def test_loss_modes(kind):
    rng = np.random.default_rng(9)
    pred, truth = rng.standard_normal((4, 3, 2)), rng.standard_normal((4, 3, 2))
    mask = rng.random((4, 3, 2)) < 0.5
    e = (pred - truth)[mask]
    expected = {"rmse": np.sqrt(np.mean(e ** 2)), "mae": np.mean(np.abs(e)), "mse": np.mean(e ** 2),
                "rmse+mae": 0.5 * (np.sqrt(np.mean(e ** 2)) + np.mean(np.abs(e)))}[kind]
    tape = ag.Tape()
    got = md.loss_fn(kind, tape.const(pred), truth, mask).value
    assert got == pytest.approx(expected, rel=1e-12)
    with pytest.raises(dm.ConfigError):
        md.loss_fn("huber", tape.const(pred), truth, mask)


def test_freezing_zero_weight_streams_is_exact():
    # with alpha_L = alpha_M fixed at 0 the L/M stream parameters are unreachable,
    # so freezing them as well must not change training at all
    z = dm.normalize(small_cube())
    base = dict(variant="independent", epochs=2, steps_per_epoch=3, learning_rate=1e-2, alpha_init=(1.0, 0.0, 0.0))
    a = small_model(**base, frozen=("*.attn.alpha_L", "*.attn.alpha_M"))
    b = small_model(**base, frozen=("*.attn.alpha_L", "*.attn.alpha_M", "*.attn.L*", "*.attn.M*"))
    ra, rb = md.train(a, md.TrainingSet(z)), md.train(b, md.TrainingSet(z))
    assert ra.trace == rb.trace
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
