import itertools

import numpy as np
import pytest

from cdsa import attention as at
from cdsa import autograd as ag
from cdsa import tensor_core as tc
from cdsa.attention import AttentionDims, Variant
from cdsa.tensor_core import DIMS, Dim, Shape3

DIMS_SMALL = AttentionDims(c=3, d=4, v=5, d_t=3, d_l=2, d_m=4)


def make(variant, shape, dims=DIMS_SMALL, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    s = Shape3(*shape)
    params = at.init_params(variant, s, dims, rng)
    params = {k: v * scale if not k.startswith("alpha") else v for k, v in params.items()}
    h = rng.standard_normal(shape + (dims.c,))
    return params, h


def zero_qk(params):
    return {k: (np.zeros_like(v) if k.split(".")[0].startswith(("q", "k")) or ".q." in k or ".k." in k else v)
            for k, v in params.items()}


def test_variant_parse():
    assert Variant.parse("Decomposed") is Variant.DECOMPOSED
    with pytest.raises(ValueError):
        Variant.parse("sparse")


@pytest.mark.parametrize("variant", list(Variant))
def test_output_shape_equals_input(variant):
    params, h = make(variant, (3, 2, 2))
    out, _ = at.run(variant, h, params)
    assert out.shape == h.shape


@pytest.mark.parametrize("variant", list(Variant))
def test_every_map_row_stochastic(variant):
    params, h = make(variant, (4, 3, 2), seed=3, scale=3.0)
    _, maps = at.run(variant, h, params)
    assert maps
    for a in maps.values():
        assert np.all(a >= 0)
        assert np.max(np.abs(a.sum(axis=1) - 1)) <= 1e-12


class TestAttnMapForDim:
    def test_zero_weights_uniform(self):
        tape = ag.Tape(grad=False)
        h = tape.const(np.random.default_rng(0).standard_normal((4, 3, 2, 2)))
        p = {n: tape.const(np.zeros(s)) for n, s in
             {"q.w": (16, 3), "q.b": (3,), "k.w": (16, 3), "k.b": (3,)}.items()}
        a = at.attn_map_for_dim(h, Dim.LOCATION, "q", "k", p).value
        np.testing.assert_allclose(a, np.full((3, 3), 1 / 3))

    def test_extent_one(self):
        tape = ag.Tape(grad=False)
        h = tape.const(np.ones((1, 2, 2, 1)))
        rng = np.random.default_rng(1)
        p = {"q.w": tape.const(rng.random((4, 2))), "q.b": tape.const(np.zeros(2)),
             "k.w": tape.const(rng.random((4, 2))), "k.b": tape.const(np.zeros(2))}
        assert at.attn_map_for_dim(h, Dim.TIME, "q", "k", p).value.tolist() == [[1.0]]


class TestDecomposed:
    def test_single_cell_reduces_to_value_output(self):
        dims = AttentionDims(c=2, d=2, v=2, d_t=2, d_l=2, d_m=2)
        params, h = make("decomposed", (1, 1, 1), dims)
        params = zero_qk(params)
        params.update({"v.w": np.eye(2), "v.b": np.zeros(2), "o.w": np.eye(2), "o.b": np.zeros(2)})
        out, maps = at.run("decomposed", h, params)
        np.testing.assert_allclose(out, h)
        assert all(a.tolist() == [[1.0]] for a in maps.values())

    def test_order_independent(self):
        params, h = make("decomposed", (3, 2, 2), AttentionDims(c=2, d=2, v=3, d_t=2, d_l=2, d_m=2), seed=5)
        ref, _ = at.run("decomposed", h, params, order=(Dim.TIME, Dim.LOCATION, Dim.MEASUREMENT))
        out, _ = at.run("decomposed", h, params, order=(Dim.MEASUREMENT, Dim.TIME, Dim.LOCATION))
        np.testing.assert_allclose(out, ref, atol=1e-10, rtol=0)

    @pytest.mark.parametrize("shape", [(2, 2, 2), (4, 2, 2), (1, 3, 5), (2, 2, 4)])
    def test_matches_kron_oracle(self, shape):
        params, h = make("decomposed", shape, seed=sum(shape))
        out, maps = at.run("decomposed", h, params)
        s = Shape3(*shape)
        v = h @ params["v.w"] + params["v.b"]
        big = tc.kron3(maps["T"], maps["L"], maps["M"])
        expected = (big @ v.reshape(s.size, -1)) @ params["o.w"] + params["o.b"]
        np.testing.assert_allclose(out.reshape(s.size, -1), expected, atol=1e-12, rtol=0)

    def test_bad_order(self):
        params, h = make("decomposed", (2, 2, 2))
        with pytest.raises(ValueError):
            at.run("decomposed", h, params, order=(Dim.TIME, Dim.TIME, Dim.MEASUREMENT))


class TestJoint:
    def test_single_cell(self):
        params, h = make("joint", (1, 1, 1))
        out, maps = at.run("joint", h, params)
        assert maps["joint"].tolist() == [[1.0]]
        expected = (h @ params["v.w"] + params["v.b"]) @ params["o.w"] + params["o.b"]
        np.testing.assert_allclose(out, expected)

    def test_zero_qk_is_mean_of_values(self):
        params, h = make("joint", (2, 3, 2), seed=2)
        params = zero_qk(params)
        out, maps = at.run("joint", h, params)
        np.testing.assert_allclose(maps["joint"], np.full((12, 12), 1 / 12))
        v = h.reshape(12, -1) @ params["v.w"] + params["v.b"]
        expected = v.mean(axis=0) @ params["o.w"] + params["o.b"]
        np.testing.assert_allclose(out.reshape(12, -1), np.tile(expected, (12, 1)), atol=1e-12)

    def test_rows_sum_to_one(self):
        params, h = make("joint", (2, 2, 2), seed=4, scale=2.0)
        _, maps = at.run("joint", h, params)
        assert np.max(np.abs(maps["joint"].sum(axis=1) - 1)) <= 1e-12

    def test_capacity_guard(self):
        dims = AttentionDims(c=1, d=1, v=1, d_t=1, d_l=1, d_m=1)
        params, h = make("joint", (17, 17, 17), dims)
        with pytest.raises(tc.CapacityError):
            at.run("joint", h, params)


class TestShared:
    def test_zero_qk_uniform_maps(self):
        params, h = make("shared", (3, 2, 4), seed=1)
        _, maps = at.run("shared", h, zero_qk(params))
        for d, n in zip("TLM", (3, 2, 4)):
            np.testing.assert_allclose(maps[d], np.full((n, n), 1 / n))

    def test_single_cell_like_joint(self):
        params, h = make("shared", (1, 1, 1))
        out_s, _ = at.run("shared", h, params)
        out_j, _ = at.run("joint", h, params)
        np.testing.assert_allclose(out_s, out_j)

    def test_score_scale_uses_row_length(self):
        params, h = make("shared", (2, 3, 2), seed=8)
        _, maps = at.run("shared", h, params)
        q = h @ params["q.w"] + params["q.b"]
        k = h @ params["k.w"] + params["k.b"]
        ql, kl = tc.reshape_for_dim(q, Dim.LOCATION), tc.reshape_for_dim(k, Dim.LOCATION)
        expected = tc.softmax_rows(ql @ kl.T / np.sqrt(2 * 2 * DIMS_SMALL.d))
        np.testing.assert_allclose(maps["L"], expected, atol=1e-14)

    def test_same_parameter_count_as_joint(self):
        s = Shape3(5, 4, 3)
        count = lambda v: sum(int(np.prod(x)) for x in at.param_shapes(v, s, DIMS_SMALL).values())  # noqa: E731
        assert count("shared") == count("joint")


class TestIndependent:
    def _streams(self, params, h):
        outs = {}
        for d in DIMS:
            p = dict(params)
            for k in "TLM":
                p[f"alpha_{k}"] = np.array(1.0 if k == d.letter else 0.0)
            outs[d.letter] = at.run("independent", h, p)[0]
        return outs

    def test_alpha_selects_time_stream(self):
        params, h = make("independent", (3, 2, 2), seed=6)
        streams = self._streams(params, h)
        rows = tc.reshape_for_dim(h, Dim.TIME)
        q = rows @ params["T0.q.w"] + params["T0.q.b"]
        k = rows @ params["T0.k.w"] + params["T0.k.b"]
        a = tc.softmax_rows(tc.scaled_scores(q, k))
        x = (a @ (rows @ params["T0.v.w"] + params["T0.v.b"])) @ params["T0.o.w"] + params["T0.o.b"]
        np.testing.assert_allclose(streams["T"], tc.unreshape_for_dim(x, Dim.TIME, h.shape), atol=1e-12)

    def test_fusion_is_weighted_sum(self):
        params, h = make("independent", (3, 2, 2), seed=7)
        streams = self._streams(params, h)
        params.update(alpha_T=np.array(0.5), alpha_L=np.array(-2.0), alpha_M=np.array(1.5))
        out, _ = at.run("independent", h, params)
        np.testing.assert_allclose(out, 0.5 * streams["T"] - 2.0 * streams["L"] + 1.5 * streams["M"], atol=1e-12)

    def test_zero_alpha_zero_output(self):
        params, h = make("independent", (2, 2, 2))
        params.update(alpha_T=np.array(0.0), alpha_L=np.array(0.0), alpha_M=np.array(0.0))
        out, _ = at.run("independent", h, params)
        assert np.all(out == 0.0)

    def test_stream_depth(self):
        dims = AttentionDims(c=2, d=2, v=2, d_t=2, d_l=2, d_m=2, stream_depth=2)
        params, h = make("independent", (2, 3, 2), dims)
        assert "T1.q.w" in params
        out, maps = at.run("independent", h, params)
        assert out.shape == h.shape and "T.1" in maps


def test_parameter_count_ordering():
    s = Shape3(6, 4, 3)
    dims = AttentionDims(c=4, d=8, v=8, d_t=8, d_l=8, d_m=8)
    count = {v: sum(int(np.prod(x)) for x in at.param_shapes(v, s, dims).values()) for v in Variant}
    assert count[Variant.SHARED] == count[Variant.JOINT] < count[Variant.DECOMPOSED] < count[Variant.INDEPENDENT]


@pytest.mark.parametrize("variant", list(Variant))
def test_layer_gradients(variant):
    params, h = make(variant, (3, 2, 2), seed=11)
    target = np.random.default_rng(12).standard_normal(h.shape)

    def f(tape, p):
        out = at.forward(variant, tape.const(h), p)
        return ag.sum_all(out * target)

    assert ag.fd_check(f, params, max_coords=200).max_rel_error <= 1e-5


def test_decomposed_gradients_order_independent():
    params, h = make("decomposed", (3, 2, 2), seed=13)
    target = np.random.default_rng(14).standard_normal(h.shape)
    grads = []
    for order in itertools.permutations(DIMS):
        _, g = ag.value_and_grad(lambda t, p: ag.sum_all(at.decomposed_forward(t.const(h), p, order) * target), params)
        grads.append(g)
    for g in grads[1:]:
        for k in g:
            np.testing.assert_allclose(g[k], grads[0][k], atol=1e-8, rtol=0)


def test_constant_zero_stream_skipped_without_effect():
    params, h = make("independent", (3, 2, 2), seed=21)
    params.update(alpha_T=np.array(0.7), alpha_L=np.array(0.0), alpha_M=np.array(0.0))
    outs, maps = [], []
    for const in (False, True):
        tape = ag.Tape()
        p = {k: (tape.const(v) if const and k in ("alpha_L", "alpha_M") else tape.param(k, v))
             for k, v in params.items()}
        m = {}
        outs.append(at.independent_forward(tape.const(h), p, m).value)
        maps.append(set(m))
    assert np.array_equal(outs[0], outs[1])
    assert maps == [{"T", "L", "M"}, {"T"}]
