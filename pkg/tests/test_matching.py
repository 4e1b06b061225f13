import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvmatch.core import PointCloud
from dvmatch.deformation import build_deformation_graph, identity_transforms
from dvmatch.geodesics import GeodesicMatrix
from dvmatch.matching import (
    LossWeights,
    SoftCorrespondence,
    hard_match,
    pull_back,
    smoothness_loss,
    soft_correspondence,
    total_loss,
)


def permutation_pi(perm, cols):
    n = len(perm)
    return SoftCorrespondence(
        rows=n,
        cols=cols,
        idx=np.asarray(perm, dtype=np.int64)[:, None],
        weight=np.ones((n, 1)),
        counts=np.ones(n, dtype=np.int64),
    )


class TestSoftCorrespondence:
    def test_self_similarity_concentrates(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(12, 5)) * 10.0
        pi = soft_correspondence(f, f, top_n=4, temperature=1e-3)
        assert np.array_equal(pi.idx[np.arange(12), pi.weight.argmax(axis=1)], np.arange(12))
        assert pi.weight.max(axis=1).min() > 1.0 - 1e-6

    def test_truncation_noop_when_few_targets(self):
        rng = np.random.default_rng(1)
        fs, ft = rng.normal(size=(6, 3)), rng.normal(size=(2, 3))
        pi = soft_correspondence(fs, ft, top_n=10)
        assert pi.idx.shape == (6, 2)
        assert np.allclose(pi.weight.sum(axis=1), 1.0)

    def test_equidistant_pair_half_half(self):
        fs = np.zeros((1, 2))
        ft = np.array([[1.0, 0.0], [-1.0, 0.0]])
        pi = soft_correspondence(fs, ft, top_n=2)
        assert np.allclose(pi.weight, 0.5)

    def test_rows_sum_one_and_bounded(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            fs = rng.normal(size=(20, 4))
            ft = rng.normal(size=(30, 4))
            pi = soft_correspondence(fs, ft, top_n=10)
            assert pi.idx.shape[1] <= 10
            assert np.abs(pi.weight.sum(axis=1) - 1.0).max() <= 1e-9
            for i in range(20):
                ids, _ = pi.row(i)
                assert np.unique(ids).size == ids.size

    def test_temperature_limit_matches_hard(self):
        rng = np.random.default_rng(3)
        fs = rng.normal(size=(15, 6))
        ft = rng.normal(size=(25, 6))
        pi = soft_correspondence(fs, ft, top_n=10, temperature=1e-4)
        hard = hard_match(fs, ft)
        top = pi.idx[np.arange(15), pi.weight.argmax(axis=1)]
        assert np.array_equal(top, hard)
        assert pi.weight.max(axis=1).min() > 1.0 - 1e-6

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            soft_correspondence(np.zeros((2, 3)), np.zeros((2, 4)))


class TestPullBack:
    def test_hard_permutation_reindexes(self):
        rng = np.random.default_rng(4)
        v = rng.normal(size=(5, 3))
        perm = [3, 0, 4, 1, 2]
        pi = permutation_pi(perm, 5)
        assert np.array_equal(pull_back(pi, v), v[perm])

    def test_uniform_average(self):
        pi = SoftCorrespondence(rows=1, cols=2, idx=np.array([[0, 1]]),
                                weight=np.array([[0.5, 0.5]]),
                                counts=np.array([2]))
        out = pull_back(pi, np.array([0.0, 2.0]))
        assert out[0] == pytest.approx(1.0)

    def test_convex_hull(self):
        rng = np.random.default_rng(5)
        fs, ft = rng.normal(size=(10, 3)), rng.normal(size=(8, 3))
        pi = soft_correspondence(fs, ft, top_n=4)
        v = rng.normal(size=(8, 2))
        out = pull_back(pi, v)
        assert (out.min(axis=0) >= v.min(axis=0) - 1e-12).all()
        assert (out.max(axis=0) <= v.max(axis=0) + 1e-12).all()


class TestSmoothness:
    def test_identity_zero(self):
        rng = np.random.default_rng(6)
        t = PointCloud(rng.normal(size=(7, 3)))
        pi = permutation_pi(list(range(7)), 7)
        assert smoothness_loss(pi, t) == 0.0

    def test_any_permutation_zero(self):
        rng = np.random.default_rng(7)
        t = PointCloud(rng.normal(size=(6, 3)))
        pi = permutation_pi([5, 4, 3, 2, 1, 0], 6)
        assert smoothness_loss(pi, t) == 0.0

    def test_collapse_hand_value(self):
        t = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
        pi = SoftCorrespondence(rows=2, cols=2,
                                idx=np.array([[0], [0]]),
                                weight=np.ones((2, 1)),
                                counts=np.array([1, 1]))
        # pulled-back cloud = {a, a}: forward mean({0, 1}) = 0.5, reverse 0
        assert smoothness_loss(pi, t) == pytest.approx(0.5)


class TestHardMatch:
    def test_identity(self):
        rng = np.random.default_rng(8)
        f = rng.normal(size=(9, 4))
        assert np.array_equal(hard_match(f, f), np.arange(9))

    def test_nearer_target_wins(self):
        fs = np.array([[0.4, 0.0]])
        ft = np.array([[0.0, 0.0], [1.0, 0.0]])
        assert hard_match(fs, ft)[0] == 0
        assert hard_match(np.array([[0.6, 0.0]]), ft)[0] == 1

    def test_tie_low_index(self):
        fs = np.zeros((1, 3))
        ft = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        assert hard_match(fs, ft)[0] == 0

    def test_scale_invariance(self):
        rng = np.random.default_rng(9)
        fs, ft = rng.normal(size=(12, 5)), rng.normal(size=(20, 5))
        assert np.array_equal(hard_match(fs, ft), hard_match(3.7 * fs, 3.7 * ft))


class TestLossWeights:
    def test_defaults_match_published(self):
        w = LossWeights()
        assert (w.deform, w.arap, w.smooth, w.geo) == (0.05, 0.005, 0.5, 0.02)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LossWeights(deform=-0.1)


class TestTotalLoss:
    def setup_case(self, seed=10):
        rng = np.random.default_rng(seed)
        s = PointCloud(rng.normal(size=(20, 3)))
        t = PointCloud(rng.normal(size=(22, 3)))
        g = build_deformation_graph(s)
        x = identity_transforms(g.node_count)
        f = rng.normal(size=(20, 6))
        pi = soft_correspondence(f, rng.normal(size=(22, 6)), top_n=5)
        return g, x, s, t, pi, f

    def test_all_zero_terms(self):
        rng = np.random.default_rng(11)
        s = PointCloud(rng.normal(size=(10, 3)))
        g = build_deformation_graph(s)
        x = identity_transforms(g.node_count)
        pi = permutation_pi(list(range(10)), 10)
        total, terms = total_loss(g, x, s, s, pi, s.points, None)
        assert total == 0.0
        assert terms["deform"] == 0.0 and terms["arap"] == 0.0
        assert terms["smooth"] == 0.0 and terms["geo"] == 0.0

    def test_linearity_in_lambda(self):
        g, x, s, t, pi, f = self.setup_case()
        w1 = LossWeights()
        w2 = LossWeights(deform=w1.deform, arap=w1.arap, smooth=2 * w1.smooth, geo=w1.geo)
        t1, terms1 = total_loss(g, x, s, t, pi, f, None, weights=w1)
        t2, terms2 = total_loss(g, x, s, t, pi, f, None, weights=w2)
        assert terms1 == terms2
        assert t2 - t1 == pytest.approx(w1.smooth * terms1["smooth"])

    def test_partial_mode_uses_one_sided(self):
        g, x, s, t, pi, f = self.setup_case(12)
        _, terms_full = total_loss(g, x, s, t, pi, f, None, mode="full")
        _, terms_part = total_loss(g, x, s, t, pi, f, None, mode="partial")
        assert terms_part["deform"] <= terms_full["deform"]

    def test_geo_term_when_matrix_supplied(self):
        g, x, s, t, pi, f = self.setup_case(13)
        rng = np.random.default_rng(14)
        d = np.abs(rng.normal(size=(20, 20)))
        d = 0.5 * (d + d.T)
        np.fill_diagonal(d, 0.0)
        _, terms = total_loss(g, x, s, t, pi, f, GeodesicMatrix(distances=d),
                              geo_neighbors=5)
        assert terms["geo"] > 0.0
