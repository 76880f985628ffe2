import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from evslice.boxes import BoxParams
from evslice.distill import (AttentionMap, DistillConfig, DistillSample, FeatureMap,
                             ProjectionHead, RegionEmbedding, attention_map, channel_abs_pool,
                             embed_pooled, event_feature_map, f2e_loss, fuse_attention,
                             grad_f2e, load_head, region_attention_weight, region_embed,
                             roi_avg_pool, save_head, train_projection)
from evslice.events import EventStream, to_voxel_grid

import oracles


def corners(x0, y0, x1, y1):
    return BoxParams.from_corners(x0, y0, x1, y1)


def students_from(vectors, weights=None):
    weights = np.ones(len(vectors)) if weights is None else weights
    return [(RegionEmbedding(np.asarray(v, float), None, np.asarray(v, float)), float(a))
            for v, a in zip(vectors, weights)]


class TestPooling:
    def test_zero_map(self):
        np.testing.assert_array_equal(channel_abs_pool(FeatureMap(np.zeros((3, 4, 5)))), 0.0)

    def test_two_channels(self):
        d = np.zeros((2, 1, 1))
        d[:, 0, 0] = [1.0, -3.0]
        assert channel_abs_pool(FeatureMap(d))[0, 0] == 2.0

    def test_single_channel_is_abs(self):
        d = np.random.default_rng(0).normal(size=(1, 4, 4))
        np.testing.assert_array_equal(channel_abs_pool(FeatureMap(d)), np.abs(d[0]))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            FeatureMap(np.full((1, 2, 2), np.nan))


class TestAttention:
    def test_constant_map_is_uniform(self):
        a = attention_map(FeatureMap(np.full((2, 3, 4), 0.7)), 0.5)
        np.testing.assert_allclose(a.data, 1 / 12, atol=1e-15)

    def test_high_temperature_is_uniform(self):
        d = np.random.default_rng(1).normal(size=(3, 5, 6))
        a = attention_map(FeatureMap(d), 1e6)
        np.testing.assert_allclose(a.data, 1 / 30, atol=1e-6)

    def test_two_cell_softmax(self):
        a = attention_map(FeatureMap(np.array([[[1.0], [0.0]]])), 1.0)
        np.testing.assert_allclose(a.data[:, 0], [math.e / (math.e + 1), 1 / (math.e + 1)],
                                   atol=1e-12)

    def test_rejects_bad_tau(self):
        with pytest.raises(ValueError):
            attention_map(FeatureMap(np.ones((1, 1, 1))), 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 8), st.integers(1, 8), st.floats(0.05, 10),
           st.integers(0, 2**31))
    def test_positive_and_normalized(self, c, h, w, tau, seed):
        d = np.random.default_rng(seed).normal(0, 3, size=(c, h, w))
        a = attention_map(FeatureMap(d), tau)
        assert np.all(a.data > 0)
        assert abs(a.data.sum() - 1) <= 1e-9

    def test_fuse_identical(self):
        a = attention_map(FeatureMap(np.random.default_rng(2).normal(size=(2, 3, 3))), 1.0)
        np.testing.assert_array_equal(fuse_attention(a, a).data, a.data)

    def test_fuse_uniform(self):
        u = AttentionMap(np.full((2, 2), 0.25), 1.0)
        np.testing.assert_array_equal(fuse_attention(u, u).data, 0.25)

    def test_fuse_random_pair(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = attention_map(FeatureMap(rng.normal(size=(2, 4, 5))), 0.3)
            b = attention_map(FeatureMap(rng.normal(size=(3, 4, 5))), 2.0)
            f = fuse_attention(a, b)
            assert abs(f.data.sum() - 1) <= 1e-9
            for i in range(4):
                for j in range(5):
                    assert f.data[i, j] == pytest.approx((a.data[i, j] + b.data[i, j]) / 2,
                                                         abs=1e-15)

    def test_fuse_shape_mismatch(self):
        with pytest.raises(ValueError):
            fuse_attention(AttentionMap(np.ones((2, 2)) / 4, 1), AttentionMap(np.ones((1, 4)) / 4, 1))


class TestRegionWeight:
    def test_uniform_map(self):
        a = AttentionMap(np.full((6, 8), 1 / 48), 1.0)
        for roi in (corners(0, 0, 1, 1), corners(2, 1, 7, 5), corners(0, 0, 8, 6)):
            assert region_attention_weight(a, roi) == pytest.approx(1.0)

    def test_all_mass_in_quarter(self):
        d = np.zeros((4, 4))
        d[:2, :2] = 0.25
        assert region_attention_weight(AttentionMap(d, 1.0), corners(0, 0, 2, 2)) == 4.0

    def test_full_roi(self):
        a = attention_map(FeatureMap(np.random.default_rng(4).normal(size=(2, 5, 7))), 0.2)
        assert region_attention_weight(a, corners(0, 0, 7, 5)) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_roi(self):
        with pytest.raises(ValueError):
            region_attention_weight(AttentionMap(np.ones((2, 2)) / 4, 1), corners(5, 5, 6, 6))


class TestRegionEmbed:
    def test_constant_map_pools_to_channel_vector(self):
        d = np.empty((3, 6, 6))
        d[:] = np.array([0.2, -1.0, 4.0])[:, None, None]
        np.testing.assert_allclose(roi_avg_pool(FeatureMap(d), corners(1, 1, 4, 5)),
                                   [0.2, -1.0, 4.0], atol=1e-15)

    def test_identity_head_one_hot(self):
        d = np.zeros((4, 5, 5))
        d[2] = 3.0
        e = region_embed(FeatureMap(d), ProjectionHead.identity(4), corners(0, 0, 5, 5))
        np.testing.assert_allclose(e.vector, [0, 0, 1, 0], atol=1e-15)

    def test_pool_matches_loop(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            c, h, w = rng.integers(1, 5), rng.integers(2, 10), rng.integers(2, 10)
            d = rng.normal(size=(c, h, w))
            x0, y0 = int(rng.integers(0, w - 1)), int(rng.integers(0, h - 1))
            x1, y1 = int(rng.integers(x0 + 1, w + 1)), int(rng.integers(y0 + 1, h + 1))
            want = [sum(d[k, r, q] for r in range(y0, y1) for q in range(x0, x1))
                    / ((y1 - y0) * (x1 - x0)) for k in range(c)]
            np.testing.assert_allclose(roi_avg_pool(FeatureMap(d), corners(x0, y0, x1, y1)),
                                       want, atol=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 6))
    def test_unit_norm(self, seed, c, dim):
        rng = np.random.default_rng(seed)
        fmap = FeatureMap(rng.normal(size=(c, 6, 6)))
        head = ProjectionHead.init(c, dim, seed=seed)
        head = ProjectionHead(head.weight, rng.normal(size=dim))
        e = region_embed(fmap, head, corners(1, 1, 5, 4))
        assert abs(np.linalg.norm(e.vector) - 1) <= 1e-9

    def test_degenerate_roi(self):
        with pytest.raises(ValueError):
            roi_avg_pool(FeatureMap(np.ones((1, 4, 4))), corners(10, 10, 12, 12))

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            region_embed(FeatureMap(np.ones((2, 4, 4))), ProjectionHead.identity(3),
                         corners(0, 0, 2, 2))


class TestF2eLoss:
    def test_infonce_orthonormal_pair(self):
        eye = np.eye(2)
        loss = f2e_loss(students_from(eye), list(eye), DistillConfig(1.0, 1.0, "infonce"))
        assert loss == pytest.approx(2 * -math.log(math.e / (math.e + 1)), abs=1e-12)
        assert loss == pytest.approx(0.6266, abs=1e-4)

    def test_exclude_self_orthonormal_pair(self):
        eye = np.eye(2)
        assert f2e_loss(students_from(eye), list(eye), DistillConfig(1.0, 1.0)) == \
            pytest.approx(-2.0, abs=1e-12)

    def test_exclude_self_needs_two(self):
        with pytest.raises(ValueError):
            f2e_loss(students_from([[1.0, 0.0]]), [np.array([1.0, 0.0])], DistillConfig())
        f2e_loss(students_from([[1.0, 0.0]]), [np.array([1.0, 0.0])],
                 DistillConfig(denominator_mode="infonce"))

    @pytest.mark.parametrize("mode", ["exclude_self", "infonce"])
    def test_matches_oracle(self, mode):
        rng = np.random.default_rng(6)
        for _ in range(50):
            n, d = int(rng.integers(2, 7)), int(rng.integers(2, 6))
            s = rng.normal(size=(n, d))
            t = rng.normal(size=(n, d))
            a = rng.uniform(0.2, 3, n)
            tau = float(rng.uniform(0.05, 2))
            got = f2e_loss(students_from(s, a), list(t), DistillConfig(1.0, tau, mode))
            want = oracles.naive_f2e(s, a, t, tau, mode)
            assert abs(got - want) <= 1e-9 * max(1.0, abs(want))

    @pytest.mark.parametrize("mode", ["exclude_self", "infonce"])
    def test_joint_rotation_invariance(self, mode):
        rng = np.random.default_rng(7)
        for k in range(20):
            n, d = 5, 6
            s = rng.normal(size=(n, d))
            s /= np.linalg.norm(s, axis=1, keepdims=True)
            t = rng.normal(size=(n, d))
            a = rng.uniform(0.5, 2, n)
            q = ortho_group.rvs(d, random_state=k)
            cfg = DistillConfig(1.0, 0.2, mode)
            base = f2e_loss(students_from(s, a), list(t), cfg)
            rot = f2e_loss(students_from(s @ q.T, a), list(t @ q.T), cfg)
            assert abs(base - rot) <= 1e-9

    def test_directional_descent(self):
        rng = np.random.default_rng(8)
        cfg = DistillConfig(1.0, 0.1, "infonce")
        for k in range(100):
            n, d = 4, 8
            t = ortho_group.rvs(d, random_state=k)[:n]
            s = rng.normal(size=(n, d))
            s /= np.linalg.norm(s, axis=1, keepdims=True)
            i = int(rng.integers(n))
            cos = float(s[i] @ t[i])
            omega = math.acos(min(max(cos, -1.0), 1.0))
            if omega < 1e-3:
                continue
            # move a small angle along the great circle from s_i toward t_i
            step = 0.05 * omega
            moved = s.copy()
            moved[i] = (math.sin(omega - step) * s[i] + math.sin(step) * t[i]) / math.sin(omega)
            assert f2e_loss(students_from(moved), list(t), cfg) < \
                f2e_loss(students_from(s), list(t), cfg)


class TestGradF2e:
    def _loss_of(self, head, pooled, weights, teachers, cfg):
        def f(theta):
            h = head.with_params(theta)
            st_ = [(RegionEmbedding(embed_pooled(h, p), None, p), a)
                   for p, a in zip(pooled, weights)]
            return f2e_loss(st_, teachers, cfg)
        return f

    @pytest.mark.parametrize("mode", ["exclude_self", "infonce"])
    def test_matches_finite_differences(self, mode):
        rng = np.random.default_rng(9)
        for k in range(20):
            n, c, d = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
            head = ProjectionHead(rng.normal(size=(d, c)), rng.normal(size=d))
            pooled = rng.normal(size=(n, c))
            weights = rng.uniform(0.3, 2, n)
            teachers = list(rng.normal(size=(n, d)))
            cfg = DistillConfig(1.0, float(rng.uniform(0.2, 1.5)), mode)
            st_ = [(RegionEmbedding(embed_pooled(head, p), None, p), a)
                   for p, a in zip(pooled, weights)]
            d_w, d_b = grad_f2e(st_, teachers, head, cfg)
            fd = oracles.central_diff(self._loss_of(head, pooled, weights, teachers, cfg),
                                      head.params())
            assert oracles.rel_err(np.concatenate([d_w.ravel(), d_b]), fd) <= 1e-5

    def test_aligned_low_temperature_vanishes(self):
        eye = np.eye(3)
        head = ProjectionHead.identity(3)
        st_ = [(RegionEmbedding(embed_pooled(head, p), None, p), 1.0) for p in eye]
        d_w, d_b = grad_f2e(st_, list(eye), head, DistillConfig(1.0, 1e-3, "infonce"))
        assert np.linalg.norm(np.concatenate([d_w.ravel(), d_b])) <= 1e-6

    @pytest.mark.parametrize("mode", ["exclude_self", "infonce"])
    def test_zero_attention_annihilates(self, mode):
        rng = np.random.default_rng(10)
        head = ProjectionHead(rng.normal(size=(4, 3)), rng.normal(size=4))
        pooled = rng.normal(size=(3, 3))
        st_ = [(RegionEmbedding(embed_pooled(head, p), None, p), 0.0) for p in pooled]
        d_w, d_b = grad_f2e(st_, list(rng.normal(size=(3, 4))), head, DistillConfig(1.0, 0.1, mode))
        np.testing.assert_array_equal(d_w, 0.0)
        np.testing.assert_array_equal(d_b, 0.0)


class TestTrainProjection:
    def test_loss_decreases(self):
        rng = np.random.default_rng(11)
        teachers = np.linalg.qr(rng.normal(size=(8, 8)))[0][:4]
        samples = [DistillSample(rng.normal(size=5), 1.0, t) for t in teachers]
        _, hist = train_projection(ProjectionHead.init(5, 8, seed=0), samples,
                                   DistillConfig(1.0, 0.1, "infonce"), lr=0.05, iters=200)
        assert hist[-1] < hist[0]

    def test_head_json_round_trip(self, tmp_path):
        head = ProjectionHead.init(3, 4, seed=2)
        save_head(tmp_path / "h.json", head, {"note": 1})
        back, doc = load_head(tmp_path / "h.json")
        np.testing.assert_array_equal(back.params(), head.params())
        assert doc["note"] == 1


class TestEventFeatureMap:
    def test_channels_and_ranges(self):
        rng = np.random.default_rng(12)
        s = EventStream.from_arrays(rng.integers(0, 16, 300), rng.integers(0, 12, 300),
                                    rng.integers(0, 1000, 300), rng.choice([-1, 1], 300),
                                    16, 12, 0, 1000)
        f = event_feature_map(to_voxel_grid(s, bins=5))
        assert f.shape == (8, 12, 16)
        assert np.all((f.data >= 0) & (f.data <= 1))

    def test_empty_grid_is_zero(self):
        f = event_feature_map(to_voxel_grid(EventStream.empty(4, 4, 0, 10), bins=3))
        np.testing.assert_array_equal(f.data, 0.0)
