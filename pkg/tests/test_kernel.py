import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reweightlab.data import gen_clusters
from reweightlab.errors import ConfigError
from reweightlab.kernel import (GramMatrix, center_gram, estimate_shift, feature_gram, kernel_stats,
                                histogram_rows, ntk_gram, sign_agreement, sign_margin,
                                write_histogram_csv)
from reweightlab.net import NetConfig, init_network, jacobian

from conftest import perturbed


class TestNtkGram:
    def test_single_point_is_squared_norm(self, rng):
        p = perturbed(NetConfig.uniform(3, 8, 1))
        x = rng.uniform(-1, 1, (1, 3))
        g = ntk_gram(p, x, x, same=True)
        J = jacobian(p, x).values[:, 0]
        assert g.values.shape == (1, 1)
        assert g.values[0, 0] == pytest.approx(J @ J, rel=1e-12)
        assert g.values[0, 0] >= 0

    def test_rows_cols_match_jacobians(self, rng):
        p = perturbed(NetConfig.uniform(3, 8, 2))
        A, B = rng.uniform(-1, 1, (5, 3)), rng.uniform(-1, 1, (3, 3))
        g = ntk_gram(p, A, B)
        ref = jacobian(p, A).values.T @ jacobian(p, B).values
        assert np.allclose(g.values, ref, rtol=1e-12, atol=1e-12)
        assert g.centering == "none" and g.snapshot == p.snapshot_id()

    def test_positive_definite_distinct_points(self, rng):
        p = init_network(NetConfig.uniform(4, 1024, 1, seed=0))
        X = rng.standard_normal((6, 4))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        g = ntk_gram(p, X, X, same=True)
        st_ = kernel_stats(g, np.zeros(6, int), np.zeros(6, int))
        assert st_.lam_min > 0

    def test_psd_numerically(self, rng):
        p = perturbed(NetConfig.uniform(3, 32, 2), 0.5, 2)
        X = rng.uniform(-1, 1, (12, 3))
        ev = np.linalg.eigvalsh(ntk_gram(p, X, X, same=True).values)
        assert ev[0] >= -1e-8 * ev[-1]

    def test_concentrates_with_width(self, rng):
        X = rng.standard_normal((8, 4))
        X /= np.linalg.norm(X, axis=1, keepdims=True)

        def rel_dist(width, s):
            a = ntk_gram(init_network(NetConfig.uniform(4, width, 1, seed=2 * s)), X, X, same=True).values
            b = ntk_gram(init_network(NetConfig.uniform(4, width, 1, seed=2 * s + 1)), X, X, same=True).values
            return np.linalg.norm(a - b) / np.linalg.norm(a)

        # the zero output layer makes the init kernel depend only on last-layer features
        narrow = np.median([rel_dist(256, s) for s in range(5)])
        wide = np.median([rel_dist(2048, s) for s in range(5)])
        assert wide < narrow


class TestCentering:
    def test_constant_shift_invariance(self, rng):
        F, V = rng.standard_normal((7, 5)), rng.standard_normal((4, 5))
        v = rng.standard_normal(5) * 10
        a = center_gram(feature_gram(F, V), "mean_centered").values
        b = center_gram(feature_gram(F + v, V + v), "mean_centered").values
        assert np.max(np.abs(a - b)) <= 1e-10 * np.max(np.abs(a))

    def test_matches_explicit_centering(self, rng):
        F, V = rng.standard_normal((7, 5)), rng.standard_normal((4, 5))
        mu = V.mean(axis=0)
        ref = (F - mu) @ (V - mu).T
        assert np.allclose(center_gram(feature_gram(F, V), "mean_centered").values, ref, atol=1e-12)

    def test_idempotent(self, rng):
        g = center_gram(feature_gram(rng.standard_normal((6, 3)), rng.standard_normal((4, 3))),
                        "mean_centered")
        gg = center_gram(g, "mean_centered")
        assert np.allclose(g.values, gg.values, atol=1e-12)

    def test_scalar_shift_zero_identity(self, rng):
        g = feature_gram(rng.standard_normal((3, 2)), rng.standard_normal((3, 2)))
        assert np.array_equal(center_gram(g, "scalar_shifted", mu=0.0).values, g.values)

    def test_scalar_shift_restores_signs(self, rng):
        # positive-orthant clusters: raw Gram all positive, within > cross
        data = gen_clusters(200, 2, 2, 4.0, seed=1, spread=0.1)
        X = data.X + 1.0
        g = feature_gram(X, X)
        assert np.all(g.values > 0)
        labels = data.y_clean
        a = g.values[labels[:, None] == labels[None, :]].mean()
        b = g.values[labels[:, None] != labels[None, :]].mean()
        assert b < a
        shifted = center_gram(g, "scalar_shifted", mu=(a + b) / 2)
        assert sign_agreement(shifted.values, labels, labels) >= 0.95
        auto = center_gram(g, "scalar_shifted", labels_rows=labels, labels_cols=labels)
        assert auto.shift == pytest.approx((a + b) / 2)

    def test_errors(self, rng):
        empty = GramMatrix(np.zeros((2, 0)), np.arange(2), np.arange(0), col_gram=np.zeros((0, 0)))
        with pytest.raises(ConfigError):
            center_gram(empty, "mean_centered")
        g = feature_gram(rng.standard_normal((2, 2)), rng.standard_normal((2, 2)))
        with pytest.raises(ConfigError):
            center_gram(g, "whitened")
        with pytest.raises(ConfigError):
            center_gram(g, "scalar_shifted")
        with pytest.raises(ConfigError):
            estimate_shift(g.values, [0, 0], [0, 0])


class TestStats:
    def test_identity_same_class(self):
        st_ = kernel_stats(GramMatrix(np.eye(3), np.arange(3), np.arange(3)), [0, 0, 0], [0, 0, 0])
        assert st_.gamma == 0.0

    def test_two_by_two(self):
        g = GramMatrix(np.array([[2.0, -1.0], [-1.0, 2.0]]), np.arange(2), np.arange(2))
        st_ = kernel_stats(g, [0, 1], [0, 1])
        assert st_.gamma == 1.0
        assert st_.lam_min == pytest.approx(1.0)
        assert st_.lam_max == pytest.approx(3.0)
        assert st_.sign_agreement == 1.0

    def test_histogram_conserves_pairs(self, rng, tmp_path):
        vals = rng.standard_normal((5, 4))
        g = GramMatrix(vals, np.arange(5), np.arange(10, 14))
        st_ = kernel_stats(g, rng.integers(0, 2, 5), rng.integers(0, 2, 4), bins=7)
        assert st_.lam_min is None
        assert st_.hist_within.sum() + st_.hist_cross.sum() == 20
        path = tmp_path / "h.csv"
        write_histogram_csv(st_, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "bin_lo,bin_hi,count,pair_type"
        assert len(lines) == 1 + 14 == 1 + len(histogram_rows(st_))

    def test_size_limit(self):
        g = GramMatrix(np.eye(2001), np.arange(2001), np.arange(2001))
        with pytest.raises(ConfigError):
            kernel_stats(g, np.zeros(2001, int), np.zeros(2001, int))

    def test_mean_centered_ntk_sign_agreement(self):
        data = gen_clusters(120, 2, 2, 4.0, seed=0, spread=0.05)
        p = init_network(NetConfig.uniform(2, 2048, 1, seed=1))
        g = center_gram(ntk_gram(p, data.X, data.X, same=True), "mean_centered")
        st_ = kernel_stats(g, data.y_clean, data.y_clean)
        assert st_.sign_agreement >= 0.95

    def test_sign_margin_violation(self):
        assert sign_margin(np.array([[1.0, 0.5]]), [0], [0, 1]) == 0.0
        assert sign_margin(np.array([[1.0, -0.5]]), [0], [0, 1]) == 0.5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6), st.integers(1, 6), st.integers(1, 5))
def test_centering_properties(seed, n, m, dim):
    rng = np.random.default_rng(seed)
    F, V = rng.standard_normal((n, dim)), rng.standard_normal((m, dim))
    g = center_gram(feature_gram(F, V), "mean_centered")
    # column-feature mean is zero, so each row of the centered clean block sums to 0
    assert np.allclose(g.col_gram.sum(axis=1), 0, atol=1e-10)
    assert np.allclose(center_gram(g, "mean_centered").values, g.values, atol=1e-10)
    sq = center_gram(feature_gram(V, V), "mean_centered").values
    assert np.allclose(sq, sq.T, atol=1e-12)
