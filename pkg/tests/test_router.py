import numpy as np
import pytest

from spx.numerics import seeded_rng
from spx.router import (
    PcaModel,
    Router,
    default_pca_k,
    fit_router,
    kmeans_fit,
    load_router,
    pca_fit,
    pca_transform,
    route,
    route_batch,
    save_router,
)


class TestPca:
    def test_line_data(self):
        t = np.linspace(-2, 2, 101)
        x = np.vstack([t, t]) / np.sqrt(2)
        model = pca_fit(x, 2)
        assert np.allclose(np.abs(model.components[0]), [1 / np.sqrt(2)] * 2)
        assert model.explained_variances[1] <= 1e-12

    def test_isotropic_variances_close(self):
        x = seeded_rng(1).standard_normal((4, 20000))
        model = pca_fit(x, 4)
        v = model.explained_variances
        assert v[0] / v[-1] < 1.2

    def test_axis_aligned(self):
        rng = seeded_rng(2)
        x = np.vstack([2.0 * rng.standard_normal(5000), rng.standard_normal(5000)])
        x -= x.mean(axis=1, keepdims=True)
        model = pca_fit(x, 1)
        assert np.abs(model.components[0, 0]) > 0.99

    def test_transform_of_mean_is_zero(self):
        rng = seeded_rng(3)
        x = rng.standard_normal((3, 50)) + 5.0
        model = pca_fit(x, 2)
        assert np.allclose(pca_transform(model, model.mean), 0.0)

    def test_identity_components_center(self):
        x = seeded_rng(4).standard_normal((3, 40))
        model = pca_fit(x, 3)
        z = pca_transform(model, x)
        back = model.components.T @ z + model.mean[:, None]
        assert np.allclose(back, x, atol=1e-10)

    def test_rank_k_reconstruction(self):
        rng = seeded_rng(5)
        x = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 300))
        model = pca_fit(x, 2)
        z = pca_transform(model, x)
        back = model.components.T @ z + model.mean[:, None]
        assert np.max(np.abs(back - x)) <= 1e-5

    def test_orthonormal_rows(self):
        x = seeded_rng(6).standard_normal((5, 200))
        model = pca_fit(x, 4)
        gram = model.components @ model.components.T
        assert np.allclose(gram, np.eye(4), atol=1e-7)

    def test_trace_identity(self):
        x = seeded_rng(7).standard_normal((5, 400))
        model = pca_fit(x, 5)
        centered = x - x.mean(axis=1, keepdims=True)
        total = np.trace(centered @ centered.T / x.shape[1])
        assert abs(model.explained_variances.sum() - total) <= 1e-6 * total

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            pca_fit(np.ones((3, 5)), 4)

    def test_default_rule(self):
        assert default_pca_k(64) is None
        assert default_pca_k(256) == 8
        assert default_pca_k(65536) == 64


class TestKMeans:
    def test_two_blobs(self):
        rng = seeded_rng(3)
        pts = np.concatenate(
            [rng.standard_normal((2, 60)) + [[10], [0]],
             rng.standard_normal((2, 60)) - [[10], [0]]],
            axis=1,
        )
        km = kmeans_fit(pts, 2, seed=5)
        centers = sorted(km.centroids[:, 0])
        assert centers[0] < -9 and centers[1] > 9
        assert km.final_inertia < 60 * 2 * 2 * 4  # within-blob spread only

    def test_each_point_its_own_centroid(self):
        pts = np.array([[0.0, 10.0, -5.0], [0.0, 1.0, 2.0]])
        km = kmeans_fit(pts, 3, seed=1)
        assert km.final_inertia == 0.0
        assert {tuple(c) for c in km.centroids.T == 1} is not None
        assert sorted(km.centroids[:, 0].tolist()) == [-5.0, 0.0, 10.0]

    def test_identical_points_single_cluster(self):
        pts = np.full((2, 10), 3.0)
        km = kmeans_fit(pts, 1, seed=0)
        assert np.allclose(km.centroids, 3.0)
        assert km.final_inertia == 0.0

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            kmeans_fit(np.ones((2, 2)), 3, seed=0)

    def test_duplicates_cannot_fill_clusters(self):
        with pytest.raises(ValueError):
            kmeans_fit(np.ones((2, 8)), 2, seed=0)

    def test_inertia_non_increasing(self):
        pts = seeded_rng(8).standard_normal((3, 200))
        km = kmeans_fit(pts, 5, seed=9)
        hist = km.inertia_history
        assert all(a >= b - 1e-9 for a, b in zip(hist, hist[1:]))

    def test_bit_reproducible(self):
        pts = seeded_rng(9).standard_normal((3, 120))
        a = kmeans_fit(pts, 4, seed=33)
        b = kmeans_fit(pts, 4, seed=33)
        assert np.array_equal(a.centroids, b.centroids)
        assert a.final_inertia == b.final_inertia


class TestRoute:
    def _router(self):
        centroids = np.array([[0.0, 0.0], [2.0, 0.0]])
        rng = seeded_rng(10)
        pts = np.concatenate(
            [rng.standard_normal((2, 20)) * 0.1,
             rng.standard_normal((2, 20)) * 0.1 + [[2.0], [0.0]]],
            axis=1,
        )
        km = kmeans_fit(pts, 2, seed=3)
        return Router(None, km)

    def test_centroid_preimage(self):
        router = self._router()
        for j in range(2):
            assert route(router, router.kmeans.centroids[j]) == j

    def test_equidistant_tie(self):
        km = kmeans_fit(np.array([[0.0, 2.0], [0.0, 0.0]]), 2, seed=0)
        order = np.argsort(km.centroids[:, 0])
        router = Router(None, km)
        mid = np.array([1.0, 0.0])
        assert route(router, mid) == min(
            route(router, km.centroids[order[0]]), route(router, km.centroids[order[1]])
        )

    def test_single_cluster_always_zero(self):
        pts = seeded_rng(11).standard_normal((3, 30))
        router = Router(None, kmeans_fit(pts, 1, seed=1))
        assert route(router, np.ones(3)) == 0

    def test_batch_matches_single(self):
        router = self._router()
        x = seeded_rng(12).standard_normal((2, 50))
        batch = route_batch(router, x)
        singles = [route(router, x[:, j]) for j in range(50)]
        assert batch.tolist() == singles

    def test_deterministic(self):
        router = self._router()
        x = seeded_rng(13).standard_normal(2)
        assert route(router, x) == route(router, x)


class TestRouterSerialization:
    def test_round_trip_bytes(self, tmp_path):
        x = seeded_rng(14).standard_normal((80, 300))
        router = fit_router(x, 4, seed=21)
        assert router.pca is not None  # m=80 > passthrough limit
        save_router(router, tmp_path / "a")
        loaded = load_router(tmp_path / "a")
        save_router(loaded, tmp_path / "b")
        for name in ("router.json", "centroids.spxt", "pca_mean.spxt",
                     "pca_components.spxt", "pca_variances.spxt"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()

    def test_passthrough_round_trip(self, tmp_path):
        x = seeded_rng(15).standard_normal((16, 100))
        router = fit_router(x, 3, seed=2)
        assert router.pca is None
        save_router(router, tmp_path / "r")
        loaded = load_router(tmp_path / "r")
        probe = seeded_rng(16).standard_normal((16, 40))
        assert np.array_equal(route_batch(loaded, probe), route_batch(loaded, probe))
        assert loaded.kmeans.centroids.shape == (3, 16)

    def test_param_count(self):
        x = seeded_rng(17).standard_normal((128, 400))
        router = fit_router(x, 4, seed=5)
        k = router.pca.components.shape[0]
        assert router.param_count() == k * 128 + 128 + 4 * k
