import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatedformer import autodiff as ad
from gatedformer.autodiff import Tensor
from gatedformer.errors import EmptyTensor, ShapeMismatch
from gatedformer.gating import (
    GateKind,
    GateParams,
    gate_saturation_stats,
    gated_mhdpa_combine,
    highway_gate,
    product_rule_terms,
    sdu,
    sdu_param_count,
)
from gatedformer.gradcheck import finite_diff_check


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def params(rng, d, w1=None, b1=None, w2=None, b2=None, scale=0.5):
    def pick(v, shape):
        return t(scale * rng.normal(size=shape) if v is None else v)
    return GateParams(pick(w1, (d, d)), pick(b1, (d,)), pick(w2, (d, d)), pick(b2, (d,)))


class TestGateKind:
    def test_parse(self):
        assert GateKind.parse(" SDU-Tanh ") is GateKind.SDU_TANH

    def test_parse_unknown(self):
        with pytest.raises(ValueError, match="unknown gate kind"):
            GateKind.parse("swish")

    @pytest.mark.parametrize("kind", [GateKind.HIGHWAY, GateKind.GATED_MHDPA,
                                      GateKind.SDU_SIGMOID])
    def test_sigmoid_kinds(self, kind):
        assert kind.psi == "sigmoid"

    def test_tanh_kind(self):
        assert GateKind.SDU_TANH.psi == "tanh"
        assert GateKind.SDU_TANH.is_sdu and not GateKind.HIGHWAY.is_sdu


class TestGateParams:
    def test_bad_shapes(self):
        with pytest.raises(ShapeMismatch):
            GateParams(t(np.zeros((3, 3))), t(np.zeros(3)), t(np.zeros((3, 2))), t(np.zeros(3)))

    def test_count(self, rng):
        assert params(rng, 5).num_parameters() == sdu_param_count(5)


class TestSdu:
    def test_sigmoid_half_pass(self, rng):
        x = rng.normal(size=(4, 3))
        p = params(rng, 3, w1=np.zeros((3, 3)), b1=np.zeros(3), w2=np.eye(3), b2=np.zeros(3))
        np.testing.assert_array_equal(sdu(t(x), p, "sigmoid").data, 0.5 * x)

    def test_tanh_closed(self, rng):
        p = params(rng, 3, w1=np.zeros((3, 3)), b1=np.zeros(3))
        assert np.all(sdu(t(rng.normal(size=(4, 3))), p, "tanh").data == 0.0)

    def test_formula(self, rng):
        x = rng.normal(size=(4, 3))
        p = params(rng, 3)
        ref = np.tanh(x @ p.w1.data + p.b1.data) * (x @ p.w2.data + p.b2.data)
        np.testing.assert_allclose(sdu(t(x), p, "tanh").data, ref, rtol=1e-13)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            sdu(t(np.ones((2, 4))), params(rng, 3))

    def test_bad_psi(self, rng):
        with pytest.raises(ValueError):
            sdu(t(np.ones((2, 3))), params(rng, 3), "relu")

    @pytest.mark.parametrize("psi", ["sigmoid", "tanh"])
    @pytest.mark.parametrize("which", ["x", "w1", "b1", "w2", "b2"])
    def test_gradients(self, rng, psi, which):
        x = t(rng.normal(size=(5, 6)))
        p = params(rng, 6)
        w = t(rng.normal(size=(5, 6)))
        parts = dict(x=x, **p.named())
        target = parts[which]

        def fn(z):
            kw = dict(parts)
            kw[which] = z
            q = GateParams(kw["w1"], kw["b1"], kw["w2"], kw["b2"])
            return ad.tsum(ad.mul(sdu(kw["x"], q, psi), w))

        assert finite_diff_check(fn, target) < 1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from(["sigmoid", "tanh"]), st.integers(0, 10 ** 6))
    def test_output_bounded_by_content(self, psi, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4)) * 3
        p = params(rng, 4, scale=2.0)
        content = np.abs(x @ p.w2.data + p.b2.data)
        assert np.all(np.abs(sdu(t(x), p, psi).data) <= content)


class TestProductRule:
    @pytest.mark.parametrize("psi", ["sigmoid", "tanh"])
    def test_backward_equals_two_terms(self, rng, psi):
        x = rng.normal(size=(4, 5))
        p = params(rng, 5)
        w = rng.normal(size=(4, 5))
        direction = rng.normal(size=(4, 5))
        xt = t(x, grad=True)
        ad.tsum(ad.mul(sdu(xt, p, psi), t(w))).backward()
        backprop = np.sum(xt.grad * direction)
        f = x @ p.w2.data + p.b2.data
        g = x @ p.w1.data + p.b1.data
        first, second = product_rule_terms(f, g, direction @ p.w2.data, direction @ p.w1.data, psi)
        independent = np.sum(w * first) + np.sum(w * second)
        assert abs(backprop - independent) / abs(independent) < 1e-10

    def test_terms_against_manual(self):
        f, g = np.array([2.0]), np.array([0.0])
        first, second = product_rule_terms(f, g, np.array([1.0]), np.array([1.0]))
        assert first[0] == 0.5 and second[0] == 0.5

    def test_unknown_psi(self):
        with pytest.raises(ValueError):
            product_rule_terms(*(np.zeros(1),) * 4, psi="relu")


class TestHighway:
    def test_neutral_gate(self, rng):
        x = rng.normal(size=(3, 4))
        p = params(rng, 4, w1=np.zeros((4, 4)), b1=np.zeros(4))
        f = x @ p.w2.data + p.b2.data
        np.testing.assert_allclose(highway_gate(t(x), p).data, 0.5 * x + 0.5 * f, rtol=1e-14)

    def test_saturated_transform(self, rng):
        x = rng.normal(size=(3, 4))
        p = params(rng, 4, w1=np.zeros((4, 4)), b1=20 * np.ones(4))
        f = x @ p.w2.data + p.b2.data
        assert np.all(np.abs(highway_gate(t(x), p).data - f) < 1e-6 * np.abs(x))

    def test_identity_content(self, rng):
        x = rng.normal(size=(3, 4))
        p = params(rng, 4, w2=np.eye(4), b2=np.zeros(4))
        np.testing.assert_allclose(highway_gate(t(x), p).data, x, rtol=1e-14)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_interpolation(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4))
        p = params(rng, 4, scale=1.5)
        f = x @ p.w2.data + p.b2.data
        o = highway_gate(t(x), p).data
        lo, hi = np.minimum(x, f), np.maximum(x, f)
        slack = 1e-12 * (1 + np.abs(x) + np.abs(f))
        assert np.all(o >= lo - slack) and np.all(o <= hi + slack)


class TestGatedMhdpa:
    def test_neutral_gate(self, rng):
        x, att = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        p = params(rng, 4, w1=np.zeros((4, 4)), b1=np.zeros(4))
        f = x @ p.w2.data + p.b2.data
        np.testing.assert_allclose(gated_mhdpa_combine(t(att), t(x), p).data,
                                   0.5 * att + 0.5 * f, rtol=1e-14)

    def test_closed_gate(self, rng):
        x, att = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        p = params(rng, 4, w1=np.zeros((4, 4)), b1=-20 * np.ones(4))
        np.testing.assert_allclose(gated_mhdpa_combine(t(att), t(x), p).data, att, atol=1e-7)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            gated_mhdpa_combine(t(np.ones((2, 4))), t(np.ones((3, 4))), params(rng, 4))

    @pytest.mark.parametrize("which", ["att", "x", "w1", "b1", "w2", "b2"])
    def test_gradients(self, rng, which):
        parts = dict(att=t(rng.normal(size=(4, 5))), x=t(rng.normal(size=(4, 5))),
                     **params(rng, 5).named())
        w = t(rng.normal(size=(4, 5)))

        def fn(z):
            kw = dict(parts)
            kw[which] = z
            q = GateParams(kw["w1"], kw["b1"], kw["w2"], kw["b2"])
            return ad.tsum(ad.mul(gated_mhdpa_combine(kw["att"], kw["x"], q), w))

        assert finite_diff_check(fn, parts[which]) < 1e-6


class TestParamCount:
    @pytest.mark.parametrize("dh,expected", [(512, 525_312), (1, 4)])
    def test_values(self, dh, expected):
        assert sdu_param_count(dh) == expected

    def test_formula_64(self):
        assert sdu_param_count(64) == 64 * 64 + 64 + 64 * 64 + 64

    def test_invalid(self):
        with pytest.raises(ValueError):
            sdu_param_count(0)


class TestSaturation:
    def test_all_neutral(self):
        assert gate_saturation_stats(t(np.full((3, 3), 0.5))) == {
            "frac_below": 0.0, "frac_mid": 1.0, "frac_above": 0.0}

    def test_thirds(self):
        stats = gate_saturation_stats(np.array([0.05, 0.5, 0.95]))
        for v in stats.values():
            assert abs(v - 1 / 3) < 1e-15

    def test_counting_oracle(self, rng):
        a = 1.0 / (1.0 + np.exp(-rng.normal(size=1000)))
        stats = gate_saturation_stats(t(a))
        below = sum(1 for v in a if v < 0.1)
        above = sum(1 for v in a if v > 0.9)
        assert stats["frac_below"] == below / 1000
        assert stats["frac_above"] == above / 1000
        assert abs(sum(stats.values()) - 1.0) < 1e-12

    def test_tanh_band(self):
        stats = gate_saturation_stats(np.array([-0.9, 0.0, 0.85, 0.2]), psi="tanh")
        assert stats == {"frac_below": 0.25, "frac_mid": 0.5, "frac_above": 0.25}

    def test_empty(self):
        with pytest.raises(EmptyTensor):
            gate_saturation_stats(np.zeros(0))
