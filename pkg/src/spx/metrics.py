"""Entanglement metrics over neuron output distributions.

A neuron is one row of a weight matrix; its output distribution is the
set of dot products with the calibration inputs (one scalar per input
column). The headline metric is the 1-Wasserstein distance of the
standardized output distribution to the standard Gaussian.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDistributionError, DegeneratePairsError
from .numerics import inv_normal_cdf

DEFAULT_PAIR_BUDGET = 200_000


@dataclass
class NeuronOutputs:
    """Scalar output samples of one neuron over the calibration inputs."""

    neuron_index: int
    samples: np.ndarray


@dataclass
class WdReport:
    """Per-neuron Wasserstein distance to the Gaussian for one layer."""

    layer_id: str
    wd: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["neuron_index", "wd"])
            for i, value in enumerate(self.wd):
                writer.writerow([i, repr(float(value))])


def collect_outputs(w: np.ndarray, x: np.ndarray, bias=None) -> list[NeuronOutputs]:
    """Collect per-neuron output samples for Y = W X (+ bias)."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 2 or x.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ValueError(f"shape mismatch: W {w.shape} vs X {x.shape}")
    if x.shape[1] < 2:
        raise ValueError("need at least 2 calibration inputs")
    y = w @ x
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)[:, None]
    return [NeuronOutputs(i, y[i].copy()) for i in range(y.shape[0])]


def _gaussian_grid(n: int) -> np.ndarray:
    # Midpoint plotting positions avoid the quantile singularities at 0 and 1.
    return inv_normal_cdf((np.arange(1, n + 1) - 0.5) / n)


def wd_to_gaussian(samples) -> float:
    """1-Wasserstein distance of the standardized samples to N(0, 1).

    Both the sorted, z-scored samples and the discrete Gaussian quantile
    grid at the midpoint positions (i - 0.5)/n are standardized before
    the comparison, so a quantile-matched input scores exactly zero at
    any n and the result is invariant under x -> a*x + b with a > 0.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    n = x.size
    if n < 2:
        raise ValueError("need at least 2 samples")
    std = float(np.std(x))
    if std == 0.0:
        raise DegenerateDistributionError("zero-variance output distribution")
    z = np.sort((x - np.mean(x)) / std)
    grid = _gaussian_grid(n)
    # Same standardization ops as the samples, so a quantile-matched input
    # cancels bitwise.
    grid = (grid - np.mean(grid)) / np.std(grid)
    return float(np.mean(np.abs(z - grid)))


def wd_empirical(a, b) -> float:
    """1-Wasserstein distance between two empirical distributions.

    Raw samples, not standardized: location and shape both count. The
    integral of |F^-1 - G^-1| is evaluated exactly on the merged sample
    grid, so the result is symmetric and zero iff the empirical CDFs
    coincide.
    """
    xa = np.sort(np.asarray(a, dtype=np.float64).ravel())
    xb = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if xa.size == 0 or xb.size == 0:
        raise ValueError("empty sample set")
    merged = np.concatenate([xa, xb])
    merged.sort(kind="stable")
    deltas = np.diff(merged)
    cdf_a = np.searchsorted(xa, merged[:-1], side="right") / xa.size
    cdf_b = np.searchsorted(xb, merged[:-1], side="right") / xb.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * deltas))


def _pair_indices(s: int, pair_budget: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Distinct (i < j) column pairs: exhaustive when they fit the budget,
    otherwise uniform without replacement from a seeded generator."""
    total = s * (s - 1) // 2
    if total <= pair_budget:
        return np.triu_indices(s, k=1)
    if rng is None:
        raise ValueError("pair sampling above the budget needs an rng")
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < pair_budget:
        draw = rng.integers(0, total, size=2 * (pair_budget - len(chosen)))
        for code in draw.tolist():
            if code not in seen:
                seen.add(code)
                chosen.append(code)
                if len(chosen) == pair_budget:
                    break
    codes = np.asarray(chosen, dtype=np.int64)
    # Decode linear codes over the upper triangle, row-major with i < j.
    i = (
        (2 * s - 1) - np.sqrt((2 * s - 1) ** 2 - 8.0 * codes)
    ) // 2
    i = i.astype(np.int64)
    # Guard the float sqrt against off-by-one at row boundaries.
    row_start = i * (2 * s - i - 1) // 2
    i = np.where(codes < row_start, i - 1, i)
    row_start = i * (2 * s - i - 1) // 2
    i = np.where(codes >= row_start + (s - 1 - i), i + 1, i)
    row_start = i * (2 * s - i - 1) // 2
    j = codes - row_start + i + 1
    return i, j


_PAIR_CHUNK = 32_768


def _pair_input_distances(x: np.ndarray, ii, jj) -> np.ndarray:
    """Euclidean distance per input pair, chunked to bound memory."""
    out = np.empty(ii.size)
    for lo in range(0, ii.size, _PAIR_CHUNK):
        hi = lo + _PAIR_CHUNK
        diff = x[:, ii[lo:hi]] - x[:, jj[lo:hi]]
        out[lo:hi] = np.sqrt(np.sum(diff * diff, axis=0))
    return out


def mapping_difficulty(
    w, x, pair_budget: int = DEFAULT_PAIR_BUDGET, rng=None
) -> float:
    """How hard the neuron's input-to-output mapping is over input pairs.

    Mean over sampled pairs of (|y_i - y_j| / N_y) / (||x_i - x_j|| / N_x),
    with N_x the max input pair distance and N_y the median output pair
    distance, both over the same sampled pair set. Pairs with identical
    inputs carry no information and are dropped.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != w.size:
        raise ValueError("weight row and input matrix disagree on dimension")
    if x.shape[1] < 2:
        raise ValueError("need at least 2 inputs")
    ii, jj = _pair_indices(x.shape[1], pair_budget, rng)
    dx = _pair_input_distances(x, ii, jj)
    y = w @ x
    dy = np.abs(y[ii] - y[jj])
    keep = dx > 0.0
    dx, dy = dx[keep], dy[keep]
    if dx.size == 0:
        raise DegeneratePairsError("all sampled input pairs coincide")
    n_x = float(np.max(dx))
    n_y = float(np.median(dy))
    if n_y == 0.0:
        raise DegeneratePairsError("median output pair distance is zero")
    return float(np.mean((dy / n_y) / (dx / n_x)))


def io_pairs(
    w, x, pair_budget: int = DEFAULT_PAIR_BUDGET, rng=None
) -> tuple[np.ndarray, int]:
    """(cosine similarity, output L1 distance) per sampled input pair.

    Returns the pairs as an array of shape (k, 2) plus the number of
    pairs skipped because one input had zero norm.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != w.size:
        raise ValueError("weight row and input matrix disagree on dimension")
    ii, jj = _pair_indices(x.shape[1], pair_budget, rng)
    norms = np.linalg.norm(x, axis=0)
    ok = (norms[ii] > 0.0) & (norms[jj] > 0.0)
    skipped = int(np.sum(~ok))
    ii, jj = ii[ok], jj[ok]
    cos = np.empty(ii.size)
    for lo in range(0, ii.size, _PAIR_CHUNK):
        hi = lo + _PAIR_CHUNK
        dots = np.sum(x[:, ii[lo:hi]] * x[:, jj[lo:hi]], axis=0)
        cos[lo:hi] = dots / (norms[ii[lo:hi]] * norms[jj[lo:hi]])
    y = w @ x
    l1 = np.abs(y[ii] - y[jj])
    return np.column_stack([cos, l1]), skipped


def write_io_pairs_csv(pairs: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cos_sim", "l1_dist"])
        for cos, l1 in pairs:
            writer.writerow([repr(float(cos)), repr(float(l1))])


def select_wasserstein_neurons(report, fraction: float) -> np.ndarray:
    """Indices of the top ceil(fraction * n) neurons by WD, ties to the
    lower index; returned sorted ascending."""
    wd = report.wd if isinstance(report, WdReport) else np.asarray(report)
    wd = np.asarray(wd, dtype=np.float64)
    if wd.size == 0:
        raise ValueError("empty report")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    k = math.ceil(fraction * wd.size)
    order = np.lexsort((np.arange(wd.size), -wd))
    return np.sort(order[:k])


def weighted_cluster_average(values, sizes) -> float:
    """Cluster-size weighted mean of a per-cluster metric."""
    values = np.asarray(values, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    if values.shape != sizes.shape:
        raise ValueError("values and sizes must have equal length")
    if (sizes < 0).any():
        raise ValueError("sizes must be nonnegative")
    total = float(np.sum(sizes))
    if total == 0.0:
        raise ValueError("total cluster size is zero")
    return float(np.sum(sizes * values) / total)


def min_components_for_variance(x, threshold: float) -> int:
    """Smallest component count reaching the explained-variance threshold.

    Eigenvalues of the sample covariance of the columns of x, descending;
    returns 0 when the data carries no variance at all.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError("need a matrix with at least 2 sample columns")
    centered = x - x.mean(axis=1, keepdims=True)
    cov = centered @ centered.T / x.shape[1]
    vals = np.linalg.eigvalsh(cov)[::-1]
    vals = np.clip(vals, 0.0, None)
    total = float(vals.sum())
    if total == 0.0:
        return 0  # zero-variance flag: impossible otherwise since threshold > 0
    ratios = np.cumsum(vals) / total
    # Tiny slack so exactly-attained thresholds are not lost to roundoff.
    return int(np.argmax(ratios + 1e-12 >= threshold)) + 1
