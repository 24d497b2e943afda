"""Metric properties and cross-checks against sklearn as the oracle."""

import numpy as np
import pytest
from sklearn import metrics as skmetrics
from sklearn.cluster import KMeans as SkKMeans

from infodpcca.data import HenonParams, generate_grouped, generate_henon
from infodpcca.errors import (DegenerateVariance, IndexOutOfRange, InvalidK,
                              LengthMismatch, SingleCluster)
from infodpcca.evaluation import (global_mean_corr, kmeans, lloyd, nmi,
                                  pca_sequence_features, pool_features,
                                  prediction_coverage, recon_report,
                                  silhouette)
from infodpcca.models import (LatentExtraction, ModelSpec, TrainConfig, build,
                              train_step1, train_step2)


def _latents(z):
    return LatentExtraction(stage="step1_prior", z0_mean=z,
                            z0_std=np.ones_like(z))


class TestGlobalMeanCorr:
    def test_self_correlation_is_one(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(7, 11, 3))
        rep = global_mean_corr(z, z)
        assert rep.rho_hat == pytest.approx(1.0, abs=1e-12)

    def test_sign_flip_is_one(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(5, 9, 2))
        assert global_mean_corr(z, -z).rho_hat == pytest.approx(1.0, abs=1e-12)

    def test_affine_and_permutation_invariance(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(6, 8, 3))
        zh = z[..., [2, 0, 1]] * np.array([-3.0, 0.5, 10.0]) + \
            np.array([1.0, -2.0, 0.25])
        assert global_mean_corr(z, zh).rho_hat == pytest.approx(1.0, abs=1e-10)

    def test_independent_noise_scores_low(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(1000, 100, 2))
        noise = rng.normal(size=(1000, 100, 2))
        assert global_mean_corr(z, noise).rho_hat < 0.05

    def test_constant_dimension_rejected(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(4, 6, 2))
        flat = z.copy()
        flat[..., 1] = 7.0
        with pytest.raises(DegenerateVariance):
            global_mean_corr(flat, z)
        with pytest.raises(DegenerateVariance):
            global_mean_corr(z, flat)

    def test_matrix_entries_bounded(self):
        rng = np.random.default_rng(5)
        rep = global_mean_corr(rng.normal(size=(5, 7, 3)),
                               rng.normal(size=(5, 7, 4)))
        assert np.all(np.abs(rep.rho_matrix) <= 1.0 + 1e-12)
        assert rep.rho_matrix.shape == (3, 4)


class TestPoolFeatures:
    def test_length_and_constant_trajectory(self):
        z = np.tile(np.array([[1.0, -2.0]]), (3, 10, 1))
        f = pool_features(_latents(z))
        assert f.shape == (3, 4)
        np.testing.assert_allclose(f[:, 2:], 0.0)
        np.testing.assert_allclose(f[:, :2], [[1.0, -2.0]] * 3)

    def test_time_permutation_invariance(self):
        rng = np.random.default_rng(6)
        z = rng.normal(size=(4, 12, 2))
        f1 = pool_features(_latents(z))
        f2 = pool_features(_latents(z[:, rng.permutation(12)]))
        np.testing.assert_allclose(f1, f2, atol=1e-12)


def _blobs(rng, n_per=20, gap=20.0, d=3):
    a = rng.normal(size=(n_per, d)) + gap
    b = rng.normal(size=(n_per, d)) - gap
    x = np.vstack([a, b])
    y = np.repeat([0, 1], n_per)
    return x, y


class TestKmeans:
    def test_recovers_separated_blobs(self):
        x, y = _blobs(np.random.default_rng(7))
        labels = kmeans(x, 2, seed=0)
        assert nmi(y, labels) == 1.0

    def test_deterministic(self):
        x, _ = _blobs(np.random.default_rng(8), gap=1.0)
        a = kmeans(x, 3, seed=5)
        b = kmeans(x, 3, seed=5)
        np.testing.assert_array_equal(a, b)

    def test_inertia_history_non_increasing(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(60, 4))
        _, _, hist = lloyd(x, 4, np.random.default_rng(1))
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))

    def test_invalid_k(self):
        x = np.zeros((5, 2))
        with pytest.raises(InvalidK):
            kmeans(x, 1, seed=0)
        with pytest.raises(InvalidK):
            kmeans(x, 6, seed=0)

    def test_agrees_with_sklearn_on_blobs(self):
        x, _ = _blobs(np.random.default_rng(10), gap=8.0)
        ours = kmeans(x, 2, seed=0)
        sk = SkKMeans(n_clusters=2, n_init=10, random_state=0).fit_predict(x)
        assert nmi(sk, ours) == 1.0


class TestNmi:
    def test_identical_is_one(self):
        y = np.array([0, 0, 1, 1, 2, 2])
        assert nmi(y, y) == 1.0

    def test_single_cluster_prediction_is_zero(self):
        y = np.array([0, 0, 1, 1])
        assert nmi(y, np.zeros(4, dtype=int)) == 0.0

    def test_relabeling_invariance_and_symmetry(self):
        rng = np.random.default_rng(11)
        a = rng.integers(0, 3, size=50)
        b = rng.integers(0, 4, size=50)
        remap = np.array([2, 0, 3, 1])
        assert nmi(a, b) == pytest.approx(nmi(a, remap[b]), abs=1e-12)
        assert nmi(a, b) == pytest.approx(nmi(b, a), abs=1e-12)

    def test_matches_sklearn(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            a = rng.integers(0, 3, size=40)
            b = rng.integers(0, 3, size=40)
            want = skmetrics.normalized_mutual_info_score(a, b)
            assert nmi(a, b) == pytest.approx(want, abs=1e-10)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            nmi([0, 1], [0, 1, 0])


class TestSilhouette:
    def test_separated_blobs_score_high(self):
        x, y = _blobs(np.random.default_rng(13), gap=15.0)
        assert silhouette(x, y) > 0.9

    def test_symmetric_duplicates_score_near_zero(self):
        # duplicating the point set into both clusters gives b = (n-1)/n * a
        # exactly, so the score is -1/n and approaches 0 with cluster size
        rng = np.random.default_rng(14)
        n = 40
        pts = rng.normal(size=(n, 2))
        x = np.vstack([pts, pts])
        y = np.repeat([0, 1], n)
        s = silhouette(x, y)
        assert s == pytest.approx(-1.0 / n, abs=1e-12)
        assert abs(s) < 0.05

    def test_always_in_range_and_matches_sklearn(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            x = rng.normal(size=(30, 3))
            y = rng.integers(0, 3, size=30)
            if len(np.unique(y)) < 2:
                continue
            ours = silhouette(x, y)
            assert -1.0 <= ours <= 1.0
            assert ours == pytest.approx(skmetrics.silhouette_score(x, y),
                                         abs=1e-10)

    def test_single_cluster_rejected(self):
        with pytest.raises(SingleCluster):
            silhouette(np.zeros((4, 2)), np.zeros(4, dtype=int))


class TestIdenticalRegimesClusterAtChance:
    def test_nmi_near_zero(self):
        p = HenonParams(a=1.4, t_len=60, n_seq=1, dx=4, dy=4,
                        noise_std=0.05, seed=0)
        ds = generate_grouped(p, p, n_per_group=24, seed=3)
        feats = np.concatenate([ds.z_true.mean(axis=1),
                                ds.z_true.std(axis=1)], axis=1)
        labels = kmeans(feats, 2, seed=0)
        assert nmi(ds.labels, labels) < 0.15


@pytest.fixture(scope="module")
def trained():
    params = HenonParams(t_len=24, n_seq=20, dx=6, dy=5, noise_std=0.05, seed=3)
    ds = generate_henon(params)
    spec = ModelSpec("infodpcca", dx=6, dy=5, dz0=2, dz1=2, dz2=2,
                     rnn_hidden=12, mlp_hidden=(12, 12))
    cfg = TrainConfig(max_epochs=150, batch_size=10, seed=0)
    ck1 = train_step1(spec, build(spec, cfg.seed), ds, cfg)
    return train_step2(ck1, ds, cfg), ds


class TestReconReport:
    def test_row_count_and_coverage_range(self, trained):
        ckpt, ds = trained
        rows, coverage = recon_report(ckpt, ds, seq_index=0, dims=[0, 1])
        assert len(rows) == (ds.t_len - 1) * 2
        assert 0.0 <= coverage <= 1.0

    def test_trained_toy_coverage(self, trained):
        ckpt, ds = trained
        _, coverage = recon_report(ckpt, ds, seq_index=1, dims=list(range(6)))
        assert coverage >= 0.9
        assert prediction_coverage(ckpt, ds, max_seqs=5) >= 0.9

    def test_bad_indices(self, trained):
        ckpt, ds = trained
        with pytest.raises(IndexOutOfRange):
            recon_report(ckpt, ds, seq_index=99, dims=[0])
        with pytest.raises(IndexOutOfRange):
            recon_report(ckpt, ds, seq_index=0, dims=[17])


class TestPcaFeatures:
    def test_shape_and_determinism(self):
        ds = generate_henon(HenonParams(t_len=30, n_seq=8, dx=5, dy=4,
                                        noise_std=0.1, seed=6))
        a = pca_sequence_features(ds.x1, ds.x2, 4)
        b = pca_sequence_features(ds.x1, ds.x2, 4)
        assert a.shape == (8, 4)
        np.testing.assert_array_equal(a, b)

    def test_scores_reproduce_projections(self):
        rng = np.random.default_rng(7)
        x1 = rng.normal(size=(6, 10, 3)).astype(np.float32)
        x2 = rng.normal(size=(6, 10, 2)).astype(np.float32)
        scores = pca_sequence_features(x1, x2, 2)
        flat = np.concatenate([x1, x2], axis=2).reshape(6, -1).astype(np.float64)
        flat -= flat.mean(0)
        # oracle: scores live in the span of the data with matching norms
        _, s, _ = np.linalg.svd(flat, full_matrices=False)
        np.testing.assert_allclose(np.linalg.norm(scores, axis=0), s[:2],
                                   rtol=1e-10)
