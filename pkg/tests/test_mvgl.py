import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import conv2d_naive, kl_direct
from vrsuie.core import ops, vrst
from vrsuie.core.gradcheck import grad_check
from vrsuie.core.tensor import ParameterError, ShapeError, Tensor, no_grad
from vrsuie.mvgl import (
    MVGL,
    OffsetField,
    OffsetHead,
    PriorMap,
    TemperatureSchedule,
    accumulate_frequency,
    base_grid,
    explicit_prior,
    hard_count,
    load_prior,
    masked_kl,
    mvgl_loss,
    pooled_kl_loss,
    prior_from_reference,
    sample_locations,
    soft_splat,
    topk_masks,
    upsample_prior,
    value_map,
)


def zero_field(b, h, w, k=1):
    return OffsetField(Tensor(np.zeros((b, 2 * k * k, h, w))), k)


class TestOffsets:
    def test_zero_head_gives_zero_offsets(self, rng):
        head = OffsetHead(4, k=2, rng=rng, zero=True)
        assert not head(Tensor(rng.normal(size=(1, 4, 5, 5)))).offsets.data.any()

    def test_constant_input_gives_constant_offsets(self, rng):
        head = OffsetHead(3, rng=rng)
        off = head(Tensor(np.full((1, 3, 6, 6), 0.3))).offsets.data
        # only the zero-padded border differs, the interior is translation invariant
        inner = off[..., 1:-1, 1:-1]
        np.testing.assert_allclose(inner, inner[..., :1, :1] * np.ones_like(inner), atol=1e-14)

    def test_composed_oracle(self, rng):
        head = OffsetHead(8, rng=rng)
        x = rng.normal(size=(1, 8, 8, 8))
        mid = conv2d_naive(x, head.dw.weight.data, head.dw.bias.data, pad=1, groups=8)
        mid = 0.5 * mid * (1 + np.tanh(math.sqrt(2 / math.pi) * (mid + 0.044715 * mid ** 3)))
        ref = conv2d_naive(mid, head.pw.weight.data, head.pw.bias.data)
        np.testing.assert_allclose(head(Tensor(x)).offsets.data, ref, rtol=0, atol=1e-12)

    def test_channel_count_checked(self):
        with pytest.raises(ShapeError):
            OffsetField(Tensor(np.zeros((1, 3, 2, 2))), 1)


class TestSampling:
    def test_identity(self):
        ys, xs = sample_locations(zero_field(1, 3, 4), 3, 4)
        np.testing.assert_array_equal(ys.data[0, 0], np.repeat(np.arange(3.0)[:, None], 4, axis=1))
        np.testing.assert_array_equal(xs.data[0, 0], np.repeat(np.arange(4.0)[None], 3, axis=0))

    def test_uniform_shift(self):
        off = np.zeros((1, 2, 3, 3))
        off[:, 0] = 1.0
        ys, xs = sample_locations(OffsetField(Tensor(off)), 3, 3)
        np.testing.assert_array_equal(ys.data[0, 0], np.arange(3.0)[:, None] + 1 + np.zeros((3, 3)))

    def test_k3_neighborhood(self):
        ys, xs = sample_locations(zero_field(1, 5, 5, k=3), 5, 5)
        pts = {(int(ys.data[0, n, 2, 2]), int(xs.data[0, n, 2, 2])) for n in range(9)}
        assert pts == {(2 + dy, 2 + dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)}

    def test_base_grid_even_k(self):
        assert {tuple(r) for r in base_grid(2).astype(int)} == {(0, 0), (0, 1), (1, 0), (1, 1)}

    def test_extent_checked(self):
        with pytest.raises(ShapeError):
            sample_locations(zero_field(1, 3, 3), 4, 3)


class TestAccumulate:
    def test_identity_hard_count_all_ones(self):
        ys, xs = sample_locations(zero_field(2, 4, 5), 4, 5)
        np.testing.assert_array_equal(hard_count(ys, xs, 4, 5), np.ones((2, 4, 5)))

    def test_identity_soft_all_ones(self):
        ys, xs = sample_locations(zero_field(1, 4, 4), 4, 4)
        np.testing.assert_array_equal(soft_splat(ys, xs, 4, 4).data, np.ones((1, 4, 4)))

    def test_concentration(self):
        ys = np.zeros((1, 1, 3, 4))
        s = hard_count(ys, ys.copy(), 3, 4)
        assert s[0, 0, 0] == 12 and s.sum() == 12

    def test_fractional_splat(self):
        ys = np.full((1, 1, 1, 1), 1.5)
        xs = np.full((1, 1, 1, 1), 2.0)
        s = soft_splat(Tensor(ys), Tensor(xs), 4, 4).data[0]
        assert s[1, 2] == 0.5 and s[2, 2] == 0.5 and s.sum() == 1.0

    def test_out_of_bounds_dropped(self):
        ys = np.array([[[[-3.0, 0.0]]]])
        xs = np.array([[[[0.0, 7.0]]]])
        assert soft_splat(Tensor(ys), Tensor(xs), 2, 2).data.sum() == 0.0
        assert hard_count(ys, xs, 2, 2).sum() == 0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 3))
    def test_mass_bounds(self, seed, k):
        r = np.random.default_rng(seed)
        off = OffsetField(Tensor(r.normal(scale=2.0, size=(1, 2 * k * k, 4, 5))), k)
        ys, xs = sample_locations(off, 4, 5)
        assert soft_splat(ys, xs, 4, 5).data.sum() <= 4 * 5 * k * k + 1e-9
        hard = hard_count(ys, xs, 4, 5)
        assert hard.sum() <= 4 * 5 * k * k and (hard >= 0).all()

    def test_splat_locality(self, rng):
        off = rng.normal(scale=0.3, size=(1, 2, 6, 6))
        base = accumulate_frequency(*sample_locations(OffsetField(Tensor(off)), 6, 6), 6, 6).grid.data
        moved = off.copy()
        moved[0, :, 2, 3] += (0.4, -0.3)
        after = accumulate_frequency(*sample_locations(OffsetField(Tensor(moved)), 6, 6), 6, 6).grid.data
        changed = np.argwhere(np.abs(after - base)[0] > 1e-15)
        old = (2 + off[0, 0, 2, 3], 3 + off[0, 1, 2, 3])
        new = (2 + moved[0, 0, 2, 3], 3 + moved[0, 1, 2, 3])
        support = {(int(math.floor(p[0])) + dy, int(math.floor(p[1])) + dx)
                   for p in (old, new) for dy in (0, 1) for dx in (0, 1)}
        assert {tuple(c) for c in changed} <= support

    def test_value_map_pass_through(self):
        s = accumulate_frequency(np.full((1, 1, 2, 2), 0.0), np.zeros((1, 1, 2, 2)), 2, 2, "soft")
        np.testing.assert_array_equal(value_map(s).grid, s.grid.data)

    def test_unknown_mode(self):
        with pytest.raises(ParameterError):
            accumulate_frequency(np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1, 1)), 1, 1, "cubic")

    def test_splat_grad(self, rng):
        ys = Tensor(rng.uniform(0.1, 2.9, size=(1, 1, 3, 3)))
        xs = Tensor(rng.uniform(0.1, 2.9, size=(1, 1, 3, 3)))
        wts = rng.normal(size=(1, 4, 4))
        assert grad_check(lambda: soft_splat(ys, xs, 4, 4) * wts, [ys, xs]) < 1e-4


class TestPrior:
    def test_one_hot_channel(self, rng):
        a = rng.normal(size=(2, 2))
        feats = np.zeros((1, 3, 2, 2))
        feats[0, 1] = a
        np.testing.assert_array_equal(explicit_prior(feats).grid[0], np.abs(a))

    def test_zero_features(self):
        assert not explicit_prior(np.zeros((1, 4, 3, 3))).grid.any()

    def test_root_sum_square(self, rng):
        f = rng.normal(size=(1, 4, 2, 2))
        ref = np.array([[[math.sqrt(sum(f[0, c, i, j] ** 2 for c in range(4))) for j in range(2)] for i in range(2)]])
        np.testing.assert_allclose(explicit_prior(f).grid, ref, rtol=0, atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            explicit_prior(np.full((1, 2, 2, 2), np.inf))

    def test_prior_map_invariants(self):
        with pytest.raises(ValueError):
            PriorMap(np.array([[-1.0]]))
        with pytest.raises(ShapeError):
            PriorMap(np.zeros(4))

    def test_load_prior(self, tmp_path, rng):
        f = rng.normal(size=(3, 4, 4))
        vrst.save(tmp_path / "p.vrst", f)
        np.testing.assert_allclose(load_prior(tmp_path / "p.vrst").grid, np.sqrt((f ** 2).sum(axis=0)), rtol=1e-6)

    def test_constant_reference(self):
        with pytest.warns(RuntimeWarning):
            prior = prior_from_reference(np.full((3, 40, 40), 0.3))
        assert prior.grid.shape == (16, 16) and not prior.grid.any()

    @pytest.mark.parametrize("size", [16, 33, 64])
    def test_extent_is_16(self, rng, size):
        assert prior_from_reference(rng.uniform(size=(3, size, size))).grid.shape == (16, 16)

    def test_vertical_edge(self):
        img = np.zeros((64, 64))
        img[:, 40:] = 1.0
        grid = prior_from_reference(img).grid
        # the step sits between columns 39 and 40; pooled columns of width 4 put it in column 9 and 10
        col = grid.sum(axis=0)
        assert set(np.flatnonzero(col > 0)) == {9, 10}
        assert grid.max() == 1.0 and grid.min() == 0.0

    def test_upsample_constant(self):
        up = upsample_prior(PriorMap(np.full((16, 16), 0.25)), 8, 8)
        np.testing.assert_allclose(up, 0.25, atol=1e-15)


class TestTemperature:
    def test_endpoints(self):
        t = TemperatureSchedule(100)
        assert t(0) == 1.0 and t(100) == 0.1 and t(5000) == 0.1

    def test_midpoint(self):
        assert TemperatureSchedule(100)(50) == pytest.approx(0.55, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 1000), st.integers(0, 2000))
    def test_non_increasing(self, half, it):
        t = TemperatureSchedule(half)
        assert t(it + 1) <= t(it)
        assert 0.1 <= t(it) <= 1.0

    def test_negative_rejected(self):
        with pytest.raises(ParameterError):
            TemperatureSchedule(10)(-1)


class TestMasks:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 80), st.booleans())
    def test_nested_popcounts(self, seed, n, ties):
        r = np.random.default_rng(seed)
        q = r.integers(0, 3, size=n).astype(float) if ties else r.normal(size=n)
        ratios = [r_ for r_ in (0.25, 0.5, 0.75, 1.0) if r_ * n >= 1]
        masks = topk_masks(q, ratios)
        for ratio, m in zip(ratios, masks):
            assert m.sum() == math.ceil(ratio * n)
        for small, big in zip(masks, masks[1:]):
            assert (big | ~small).all()
        assert masks[-1].all()

    def test_ties_break_by_raster_index(self):
        m = topk_masks(np.zeros(8), (0.25,))[0]
        np.testing.assert_array_equal(np.flatnonzero(m[0]), [0, 1])

    def test_empty_mask_rejected(self):
        with pytest.raises(ParameterError):
            topk_masks(np.ones(3), (0.25,))


class TestKL:
    def test_toy_case(self):
        kl = masked_kl(Tensor(np.array([[0.25, 0.75]])), np.array([[0.5, 0.5]]), (1.0,)).item()
        assert abs(kl - 0.14384) < 1e-5
        assert abs(kl - kl_direct([0.5, 0.5], [0.25, 0.75])) < 1e-12

    def test_single_ratio_is_plain_kl(self, rng):
        p = rng.dirichlet(np.ones(12))
        q = rng.dirichlet(np.ones(12))
        kl = masked_kl(Tensor(p[None]), q[None], (1.0,), eps=0.0).item()
        assert abs(kl - kl_direct(q, p, eps=0.0)) < 1e-12

    def test_masked_oracle(self, rng):
        p = rng.dirichlet(np.ones(8))
        q = rng.dirichlet(np.ones(8))
        order = np.argsort(-q, kind="stable")
        ref = 0.0
        for r in (0.25, 0.5, 0.75, 1.0):
            idx = order[:math.ceil(r * 8)]
            ref += kl_direct(q[idx] / q[idx].sum(), p[idx] / p[idx].sum())
        assert abs(masked_kl(Tensor(p[None]), q[None]).item() - ref) < 1e-12

    def test_matched_distributions(self, rng):
        d = PriorMap(rng.uniform(size=(16, 16)))
        s = Tensor(upsample_prior(d, 16, 16)[None] + 3.0)  # softmax is shift- but not scale-invariant
        assert mvgl_loss(s, d, 0.7).item() <= 1e-6

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 1.0))
    def test_non_negative(self, seed, temp):
        r = np.random.default_rng(seed)
        loss = mvgl_loss(Tensor(r.normal(size=(2, 8, 8))), PriorMap(r.uniform(size=(16, 16))), temp).item()
        assert loss >= -1e-6

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_bad_temperature(self, t):
        with pytest.raises(ParameterError):
            mvgl_loss(Tensor(np.ones((1, 4, 4))), PriorMap(np.ones((2, 2))), t)

    def test_prior_gets_no_gradient(self, rng):
        s = Tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
        prior = PriorMap(rng.uniform(size=(4, 4)))
        mvgl_loss(s, prior, 0.5).backward()
        assert s.grad is not None and isinstance(prior.grid, np.ndarray)

    def test_pooled_kl_matches_direct(self, rng):
        s = rng.uniform(size=(1, 32, 32))
        prior = PriorMap(rng.uniform(size=(16, 16)))
        got = pooled_kl_loss(Tensor(s), prior, 1.0).item()
        pooled = s[0].reshape(16, 2, 16, 2).mean(axis=(1, 3)).ravel()
        sm = lambda v: np.exp(v - v.max()) / np.exp(v - v.max()).sum()  # noqa: E731
        assert abs(got - kl_direct(sm(prior.grid.ravel()), sm(pooled))) < 1e-9

    def test_grad_through_soft_splat(self, rng):
        m = MVGL(2, k=1, rng=rng)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)))
        prior = PriorMap(rng.uniform(size=(16, 16)))
        assert grad_check(lambda: m(x, prior, 0.5).loss, m.head.parameters()) < 1e-4


class TestMVGLModule:
    def test_no_loss_without_prior(self, rng):
        out = MVGL(3, rng=rng)(Tensor(rng.normal(size=(1, 3, 4, 4))))
        assert out.loss is None and out.value.shape == (1, 4, 4)

    def test_eval_mode_ignores_prior(self, rng):
        m = MVGL(3, rng=rng)
        m.eval()
        assert m(Tensor(rng.normal(size=(1, 3, 4, 4))), PriorMap(np.ones((4, 4))), 0.5).loss is None

    def test_guidance_variants(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 8, 8)))
        prior = PriorMap(rng.uniform(size=(16, 16)))
        losses = {g: MVGL(2, guidance=g, rng=np.random.default_rng(0))(x, prior, 0.5).loss.item() for g in "bcd"}
        assert all(np.isfinite(v) and v >= -1e-6 for v in losses.values())
        with no_grad():
            up = upsample_prior(prior, 8, 8)
        s = MVGL(2, guidance="c", rng=np.random.default_rng(0))(x).freq.grid
        assert losses["c"] == pytest.approx(mvgl_loss(s, PriorMap(up), 0.5, (1.0,)).item(), abs=1e-6)

    def test_unknown_guidance(self):
        with pytest.raises(ParameterError):
            MVGL(2, guidance="a")

    def test_needs_temperature(self, rng):
        with pytest.raises(ParameterError):
            MVGL(2, rng=rng)(Tensor(np.zeros((1, 2, 4, 4))), PriorMap(np.ones((4, 4))))

    def test_value_is_detached(self, rng):
        out = MVGL(2, rng=rng)(Tensor(rng.normal(size=(1, 2, 4, 4))))
        assert isinstance(out.value, np.ndarray)
        np.testing.assert_array_equal(out.value, out.freq.grid.data)


def test_bilinear_resize_is_the_network_convention(rng):
    g = rng.uniform(size=(4, 4))
    np.testing.assert_array_equal(upsample_prior(PriorMap(g), 8, 8), ops.bilinear_resize(Tensor(g), 8, 8).data)
