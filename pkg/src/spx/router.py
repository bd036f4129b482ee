"""Input routing: PCA dimensionality reduction plus K-means clustering.

A fitted router maps an input vector to the expert whose centroid is
nearest in the (optionally reduced) input space. Everything is written
from scratch so that fitting and routing are bit-reproducible from a
seed alone; no library clustering is involved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import seeded_rng, sym_eig, tensor_codec_read, tensor_codec_write

# Reduction rule: inputs of width m route in max(1, m // 32) dims capped at
# 64; at m <= 64 the reduction would destroy cluster structure, so the
# router works on raw inputs instead.
PCA_PASSTHROUGH_DIM = 64
PCA_CAP = 64


def default_pca_k(m: int) -> int | None:
    if m <= PCA_PASSTHROUGH_DIM:
        return None
    return min(max(1, m // 32), PCA_CAP)


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # k x m, orthonormal rows
    explained_variances: np.ndarray  # descending, length k


def pca_fit(x: np.ndarray, k: int) -> PcaModel:
    """Top-k principal axes of the column samples of x.

    Component signs are fixed (largest-magnitude entry positive) so a
    fitted model serializes identically across runs.
    """
    x = np.asarray(x, dtype=np.float64)
    m, s = x.shape
    if not 1 <= k <= min(m, s):
        raise ValueError(f"k={k} out of range for {m}x{s} data")
    mean = x.mean(axis=1)
    centered = x - mean[:, None]
    cov = centered @ centered.T / s
    vals, vecs = sym_eig(cov)
    comps = vecs[:k].copy()
    for row in comps:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    return PcaModel(mean, comps, np.clip(vals[:k], 0.0, None))


def pca_transform(model: PcaModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[:, None]
    if x.shape[0] != model.mean.size:
        raise ValueError("input dimension does not match the PCA model")
    out = model.components @ (x - model.mean[:, None])
    return out[:, 0] if single else out


@dataclass
class KMeansModel:
    centroids: np.ndarray  # c x k
    seed: int
    iterations_run: int
    final_inertia: float
    inertia_history: list[float] = field(default_factory=list)


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # points: s x k. Squared distances, argmin, ties at the lower index.
    d2 = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def _point_costs(points: np.ndarray, centroids: np.ndarray, labels) -> np.ndarray:
    diff = points - centroids[labels]
    return np.sum(diff * diff, axis=1)


def kmeans_fit(
    xr: np.ndarray,
    c: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> KMeansModel:
    """Lloyd's algorithm with k-means++ seeding, single deterministic init.

    xr holds one point per column. Stops when the relative centroid shift
    drops below tol or after max_iter sweeps; an emptied cluster is
    reseeded to the point farthest from its assigned centroid.
    """
    xr = np.asarray(xr, dtype=np.float64)
    points = xr.T.copy()
    s = points.shape[0]
    if c < 1:
        raise ValueError("need at least one cluster")
    if s < c:
        raise ValueError(f"{s} samples cannot fill {c} clusters")

    rng = seeded_rng(seed)
    centroids = np.empty((c, points.shape[1]))
    first = int(rng.integers(s))
    centroids[0] = points[first]
    closest = np.sum((points - centroids[0]) ** 2, axis=1)
    for idx in range(1, c):
        total = float(closest.sum())
        if total == 0.0:
            raise ValueError("fewer distinct points than clusters")
        nxt = int(rng.choice(s, p=closest / total))
        centroids[idx] = points[nxt]
        closest = np.minimum(closest, np.sum((points - centroids[idx]) ** 2, axis=1))

    labels = _assign(points, centroids)
    history: list[float] = [float(_point_costs(points, centroids, labels).sum())]
    iterations = 0
    for _ in range(max_iter):
        new_centroids = centroids.copy()
        for j in range(c):
            members = labels == j
            if members.any():
                new_centroids[j] = points[members].mean(axis=0)
        # Reseed empty clusters to the currently worst-fit points.
        empty = [j for j in range(c) if not (labels == j).any()]
        if empty:
            costs = _point_costs(points, new_centroids, labels).copy()
            for j in empty:
                worst = int(np.argmax(costs))
                new_centroids[j] = points[worst]
                labels[worst] = j
                costs[worst] = -1.0
        shift = np.linalg.norm(new_centroids - centroids)
        scale = np.linalg.norm(centroids)
        centroids = new_centroids
        labels = _assign(points, centroids)
        history.append(float(_point_costs(points, centroids, labels).sum()))
        iterations += 1
        if shift <= tol * max(scale, 1e-30):
            break
    return KMeansModel(
        centroids=centroids,
        seed=seed,
        iterations_run=iterations,
        final_inertia=history[-1],
        inertia_history=history,
    )


@dataclass
class Router:
    """PCA (optional) composed with K-means cluster assignment."""

    pca: PcaModel | None
    kmeans: KMeansModel

    @property
    def n_experts(self) -> int:
        return self.kmeans.centroids.shape[0]

    def reduce(self, x: np.ndarray) -> np.ndarray:
        if self.pca is None:
            return np.asarray(x, dtype=np.float64)
        return pca_transform(self.pca, x)

    def param_count(self) -> int:
        pca = 0
        if self.pca is not None:
            k, m = self.pca.components.shape
            pca = k * m + m
        return pca + self.kmeans.centroids.size


def fit_router(
    x: np.ndarray, c: int, seed: int, pca_k: int | None | str = "auto"
) -> Router:
    """Fit PCA (per the reduction rule) then K-means on the reduced inputs."""
    x = np.asarray(x, dtype=np.float64)
    if pca_k == "auto":
        pca_k = default_pca_k(x.shape[0])
    pca = None
    reduced = x
    if pca_k:
        pca = pca_fit(x, int(pca_k))
        reduced = pca_transform(pca, x)
    kmeans = kmeans_fit(reduced, c, seed)
    return Router(pca, kmeans)


def route(router: Router, x: np.ndarray) -> int:
    """Expert index for one input vector; ties go to the lower index.

    Shares the distance arithmetic with route_batch so batched and
    one-at-a-time routing agree exactly.
    """
    z = router.reduce(np.asarray(x, dtype=np.float64).ravel())
    return int(_assign(z[None, :], router.kmeans.centroids)[0])


def route_batch(router: Router, x: np.ndarray) -> np.ndarray:
    """Expert index per column of x."""
    z = router.reduce(np.asarray(x, dtype=np.float64))
    return _assign(z.T, router.kmeans.centroids)


def save_router(router: Router, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "k": None if router.pca is None else int(router.pca.components.shape[0]),
        "c": router.n_experts,
        "seed": router.kmeans.seed,
        "iterations_run": router.kmeans.iterations_run,
        "final_inertia": router.kmeans.final_inertia,
    }
    if router.pca is not None:
        tensor_codec_write(router.pca.mean[None, :], directory / "pca_mean.spxt")
        tensor_codec_write(router.pca.components, directory / "pca_components.spxt")
        tensor_codec_write(
            router.pca.explained_variances[None, :],
            directory / "pca_variances.spxt",
        )
    tensor_codec_write(router.kmeans.centroids, directory / "centroids.spxt")
    with open(directory / "router.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_router(directory) -> Router:
    directory = Path(directory)
    with open(directory / "router.json") as fh:
        manifest = json.load(fh)
    pca = None
    if manifest["k"] is not None:
        pca = PcaModel(
            mean=tensor_codec_read(directory / "pca_mean.spxt")[0],
            components=tensor_codec_read(directory / "pca_components.spxt"),
            explained_variances=tensor_codec_read(directory / "pca_variances.spxt")[0],
        )
    centroids = tensor_codec_read(directory / "centroids.spxt")
    kmeans = KMeansModel(
        centroids=centroids,
        seed=manifest["seed"],
        iterations_run=manifest["iterations_run"],
        final_inertia=manifest["final_inertia"],
    )
    return Router(pca, kmeans)
