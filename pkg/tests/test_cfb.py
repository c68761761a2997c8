import math

import numpy as np
import pytest

from oracles import attention_naive, bilinear_naive
from vrsuie.cfb import BridgeConfig, CrossFeatureBridge, cross_attention, gated_fusion, window_self_attention
from vrsuie.core.gradcheck import grad_check
from vrsuie.core.tensor import ParameterError, ShapeError, Tensor
from vrsuie.nn import Conv2d


def proj(c, rng):
    return Conv2d(c, c, 1, rng=rng)


def apply_1x1(conv, x):
    """(C, H, W) -> (H*W, C) tokens of a 1x1 conv."""
    w = conv.weight.data[:, :, 0, 0]
    t = x.reshape(x.shape[0], -1).T
    return t @ w.T + conv.bias.data


def bridge(rng, c=4, dc=8, **kw):
    return CrossFeatureBridge(BridgeConfig(c, dc, **kw), rng)


class TestWindowAttention:
    def test_unit_window_is_value_projection(self, rng):
        q, k, v = proj(3, rng), proj(3, rng), proj(3, rng)
        x = Tensor(rng.normal(size=(1, 3, 4, 5)))
        np.testing.assert_allclose(window_self_attention(x, q, k, v, 1).data, v(x).data, atol=1e-14)

    def test_shape(self, rng):
        q, k, v = proj(8, rng), proj(8, rng), proj(8, rng)
        assert window_self_attention(Tensor(rng.normal(size=(1, 8, 8, 8))), q, k, v, 4).shape == (1, 8, 8, 8)

    @pytest.mark.parametrize("h,w", [(5, 6), (3, 3), (6, 2)])
    def test_non_divisible_extent_preserved(self, rng, h, w):
        q, k, v = proj(2, rng), proj(2, rng), proj(2, rng)
        assert window_self_attention(Tensor(rng.normal(size=(2, 2, h, w))), q, k, v, 4).shape == (2, 2, h, w)

    def test_single_window_oracle(self, rng):
        q, k, v = proj(3, rng), proj(3, rng), proj(3, rng)
        x = rng.normal(size=(1, 3, 2, 2))
        ref = attention_naive(apply_1x1(q, x[0]), apply_1x1(k, x[0]), apply_1x1(v, x[0]), 1 / math.sqrt(3))
        got = window_self_attention(Tensor(x), q, k, v, 2).data[0].reshape(3, 4).T
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)

    def test_windows_are_independent(self, rng):
        q, k, v = proj(2, rng), proj(2, rng), proj(2, rng)
        x = rng.normal(size=(1, 2, 4, 4))
        base = window_self_attention(Tensor(x), q, k, v, 2).data
        x[0, :, 3, 3] += 5.0
        changed = np.abs(window_self_attention(Tensor(x), q, k, v, 2).data - base).max(axis=1)[0] > 0
        assert changed[2:, 2:].all() and not changed[:2].any() and not changed[:, :2].any()


class TestCrossAttention:
    def test_single_decoder_token(self, rng):
        q, k, v = proj(4, rng), proj(4, rng), proj(4, rng)
        f_h = Tensor(rng.normal(size=(1, 4, 2, 2)))
        f_l1 = Tensor(rng.normal(size=(1, 4, 1, 1)))
        out = cross_attention(f_h, f_l1, q, k, v).data
        np.testing.assert_allclose(out, np.broadcast_to(v(f_l1).data, out.shape), atol=1e-14)

    def test_four_queries_two_keys(self, rng):
        q, k, v = proj(3, rng), proj(3, rng), proj(3, rng)
        f_h = rng.normal(size=(1, 3, 2, 2))
        f_l1 = rng.normal(size=(1, 3, 1, 2))
        ref = attention_naive(apply_1x1(q, f_h[0]), apply_1x1(k, f_l1[0]), apply_1x1(v, f_l1[0]), 1 / math.sqrt(3))
        got = cross_attention(Tensor(f_h), Tensor(f_l1), q, k, v).data[0].reshape(3, 4).T
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)

    def test_channel_mismatch(self, rng):
        q, k, v = proj(4, rng), proj(4, rng), proj(4, rng)
        with pytest.raises(ShapeError):
            cross_attention(Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros((1, 8, 1, 1))), q, k, v)


class TestGate:
    def _gate(self, c, bias, rng):
        gate = Conv2d(2 * c, c, 1, rng=rng)
        gate.weight.data[:] = 0.0
        gate.bias.data[:] = bias
        return gate

    def test_saturated_open(self, rng):
        f_h = rng.normal(size=(1, 2, 4, 4))
        z = Tensor(np.zeros((1, 2, 4, 4)))
        out = gated_fusion(Tensor(f_h), z, z, Tensor(rng.normal(size=(1, 2, 2, 2))), self._gate(2, 800.0, rng))
        np.testing.assert_array_equal(out.data, f_h)

    def test_saturated_closed(self, rng):
        f_l1 = rng.normal(size=(1, 2, 2, 2))
        z = Tensor(np.zeros((1, 2, 4, 4)))
        out = gated_fusion(Tensor(rng.normal(size=(1, 2, 4, 4))), z, z, Tensor(f_l1), self._gate(2, -800.0, rng))
        np.testing.assert_allclose(out.data[0], bilinear_naive(f_l1[0], 4, 4), atol=1e-14)

    def test_half_gate_is_mean(self, rng):
        f_h, f_l1 = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 2, 2, 2))
        z = Tensor(np.zeros((1, 2, 4, 4)))
        out = gated_fusion(Tensor(f_h), z, z, Tensor(f_l1), self._gate(2, 0.0, rng)).data[0]
        np.testing.assert_allclose(out, 0.5 * (f_h[0] + bilinear_naive(f_l1[0], 4, 4)), atol=1e-14)

    def test_convexity(self, rng):
        f_h, f_l1 = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 2, 2))
        gate = Conv2d(6, 3, 1, rng=rng)
        out = gated_fusion(Tensor(f_h), Tensor(rng.normal(size=(2, 3, 4, 4))), Tensor(rng.normal(size=(2, 3, 4, 4))),
                           Tensor(f_l1), gate).data
        up = np.stack([bilinear_naive(f, 4, 4) for f in f_l1])
        lo, hi = np.minimum(f_h, up), np.maximum(f_h, up)
        assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


class TestBridge:
    def test_shape(self, rng):
        out = bridge(rng, 4, 8)(Tensor(rng.normal(size=(2, 4, 8, 8))), Tensor(rng.normal(size=(2, 8, 4, 4))))
        assert out.shape == (2, 4, 8, 8)

    def test_disabled_is_addition(self, rng):
        b = bridge(rng, 4, 8, enabled=False)
        f_h, f_l = rng.normal(size=(1, 4, 4, 4)), rng.normal(size=(1, 8, 2, 2))
        aligned = b.align(Tensor(f_l)).data[0]
        np.testing.assert_allclose(b(Tensor(f_h), Tensor(f_l)).data[0], f_h[0] + bilinear_naive(aligned, 4, 4),
                                   atol=1e-14)
        assert [n.split(".")[0] for n, _ in b.named_parameters()] == ["align", "align"]

    def test_projections_shared_between_attentions(self, rng):
        names = {n.split(".")[0] for n, _ in bridge(rng).named_parameters()}
        assert names == {"align", "q", "k", "v", "gate"}

    def test_channel_check(self, rng):
        with pytest.raises(ShapeError):
            bridge(rng, 4, 8)(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 4, 2, 2))))

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            BridgeConfig(4, 8, window=0)
        with pytest.raises(ParameterError):
            BridgeConfig(4, 8, heads=2)

    @pytest.mark.parametrize("window,hw,lhw", [(2, (4, 4), (2, 2)), (4, (3, 5), (2, 3))])
    def test_grad(self, rng, window, hw, lhw):
        b = bridge(rng, 2, 4, window=window)
        f_h, f_l = Tensor(rng.normal(size=(1, 2) + hw)), Tensor(rng.normal(size=(1, 4) + lhw))
        # a key bias shifts every score of a query row equally, so softmax cancels it
        params = [p for n, p in b.named_parameters() if n != "k.bias"]
        assert grad_check(lambda: b(f_h, f_l), [f_h, f_l] + params) < 1e-4
        b.zero_grad()
        (b(f_h, f_l) * rng.normal(size=(1, 2) + hw)).sum().backward()
        assert np.abs(b.k.bias.grad).max() < 1e-12
