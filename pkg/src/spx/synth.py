"""Deterministic generators for calibration data and planted toy models.

Calibration inputs are a mixture of Gaussians whose means come in close
"twin" pairs sitting on well-separated pair centers, with the within-
cluster variation confined to a shared low-dimensional latent subspace.
Planted neurons are built inside the span of the cluster means with
per-cluster signed targets, so they swing between distant output modes
as the input hops between nearby twin clusters: highly non-Gaussian
output distributions from input structure, not from large weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .expansion import Block, ToyModel
from .metrics import wd_to_gaussian
from .numerics import seeded_rng

# Internal geometry of the input mixture. Pair centers sit R_SUPER apart
# on orthonormal axes; twins within a pair are 2*TWIN_DELTA apart along
# their own axis; within-cluster variation is SIGMA_Z over LATENT_DIM
# shared latent directions plus EPS_NOISE of isotropic dust.
R_SUPER = 4.0
TWIN_DELTA = 2.0
LATENT_DIM = 4
SIGMA_Z = 2.0
EPS_NOISE = 0.05
PAIR_SEP_TWO_CLUSTERS = 12.0
CLUSTER_SIGMA_JITTER = (0.9, 1.1)

# Planted-neuron construction.
WD_TARGET = 0.3
MAX_RESEEDS = 100
PLANTED_VAR_JITTER = (0.9, 1.2)
HEAVY_KAPPA = 4.0
HEAVY_SMALL = 0.25
# Downstream weighting of planted outputs: the first down projection reads
# planted neurons with this gain. Their own weights and output statistics
# stay ordinary; what makes them special is how much the rest of the model
# relies on the distinctions they carry.
PLANTED_DOWNSTREAM_GAIN = 3.0

_GEOMETRY_STREAM = 1
_DATA_STREAM = 2
_MODEL_STREAM_BASE = 3


@dataclass
class SynthSpec:
    seed: int = 0
    d: int = 64
    d_ff: int = 256
    depth: int = 2
    n_clusters_true: int = 8
    planted_count: int = 8
    planted_shape: str = "bimodal"
    samples: int = 8192

    def __post_init__(self):
        if self.planted_count > self.d_ff:
            raise ValueError("more planted neurons than rows")
        if self.n_clusters_true < 1:
            raise ValueError("need at least one true cluster")
        if self.planted_shape not in ("bimodal", "heavy-tail", "trimodal"):
            raise ValueError(f"unknown planted shape {self.planted_shape!r}")
        if self.planted_count > 0 and self.n_clusters_true < 2:
            raise ValueError("planted neurons need at least 2 clusters")
        if self.planted_shape == "trimodal" and self.n_clusters_true < 3:
            raise ValueError("trimodal planting needs at least 3 clusters")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "d": self.d,
            "d_ff": self.d_ff,
            "depth": self.depth,
            "n_clusters_true": self.n_clusters_true,
            "planted_count": self.planted_count,
            "planted_shape": self.planted_shape,
            "samples": self.samples,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        return cls(**obj)


@dataclass
class _Geometry:
    means: np.ndarray  # K x d cluster means
    latents: np.ndarray  # d x LATENT_DIM, orthonormal columns
    sigma_scale: np.ndarray  # per-cluster within-spread jitter
    pairs: list[tuple[int, int]]  # twin cluster index pairs


def _geometry(spec: SynthSpec) -> _Geometry:
    rng = seeded_rng(spec.seed, _GEOMETRY_STREAM)
    k = spec.n_clusters_true
    n_pairs = k // 2
    n_axes = n_pairs + (k % 2)  # pair centers, plus one for an odd leftover
    frame_cols = n_axes + n_pairs + LATENT_DIM
    if frame_cols > spec.d:
        raise ValueError(
            f"input dim {spec.d} too small for {k} clusters "
            f"with {LATENT_DIM} latent dims"
        )
    raw = rng.standard_normal((spec.d, frame_cols))
    frame, _ = np.linalg.qr(raw)
    centers_axes = frame[:, :n_axes]
    twin_axes = frame[:, n_axes : n_axes + n_pairs]
    latents = frame[:, n_axes + n_pairs :]

    means = np.zeros((k, spec.d))
    pairs = []
    if k == 1:
        means[0] = R_SUPER * centers_axes[:, 0]
    elif k == 2:
        # Two symmetric, far-separated clusters around the origin.
        means[0] = 0.5 * PAIR_SEP_TWO_CLUSTERS * twin_axes[:, 0]
        means[1] = -means[0]
        pairs.append((0, 1))
    else:
        for p in range(n_pairs):
            center = R_SUPER * centers_axes[:, p]
            means[2 * p] = center + TWIN_DELTA * twin_axes[:, p]
            means[2 * p + 1] = center - TWIN_DELTA * twin_axes[:, p]
            pairs.append((2 * p, 2 * p + 1))
        if k % 2:
            means[k - 1] = R_SUPER * centers_axes[:, n_axes - 1]
    sigma_scale = rng.uniform(*CLUSTER_SIGMA_JITTER, size=k)
    return _Geometry(means, latents, sigma_scale, pairs)


def _cluster_counts(total: int, k: int) -> np.ndarray:
    counts = np.full(k, total // k)
    counts[: total % k] += 1
    return counts


def gen_calibration(spec: SynthSpec) -> np.ndarray:
    """Seeded mixture of Gaussians, one column per sample, columns
    shuffled deterministically."""
    geom = _geometry(spec)
    rng = seeded_rng(spec.seed, _DATA_STREAM)
    counts = _cluster_counts(spec.samples, spec.n_clusters_true)
    columns = []
    for j, count in enumerate(counts):
        z = rng.standard_normal((LATENT_DIM, count))
        dust = rng.standard_normal((spec.d, count))
        block = (
            geom.means[j][:, None]
            + geom.sigma_scale[j] * SIGMA_Z * (geom.latents @ z)
            + EPS_NOISE * dust
        )
        columns.append(block)
    x = np.concatenate(columns, axis=1)
    return x[:, rng.permutation(spec.samples)]


def _planted_targets(spec: SynthSpec, geom: _Geometry, rng) -> np.ndarray:
    """Per-cluster signed output targets for one planted neuron."""
    k = spec.n_clusters_true
    t = np.zeros(k)
    if spec.planted_shape == "bimodal":
        for a, b in geom.pairs:
            sign = 1.0 if rng.integers(2) else -1.0
            t[a], t[b] = sign, -sign
        if k % 2:
            t[k - 1] = 1.0 if rng.integers(2) else -1.0
    elif spec.planted_shape == "trimodal":
        levels = np.array([-1.0, 0.0, 1.0])
        order = rng.permutation(k)
        for rank, j in enumerate(order):
            t[j] = levels[rank % 3]
    else:  # heavy-tail: mostly small swings, one rare far mode
        t[:] = HEAVY_SMALL * np.where(rng.integers(2, size=k) == 1, 1.0, -1.0)
        t[int(rng.integers(k))] = HEAVY_KAPPA
    return t


def gen_planted_model(spec: SynthSpec) -> tuple[ToyModel, np.ndarray]:
    """Toy FFN stack whose first up projection carries planted neurons.

    Planted rows live in the span of the cluster means (no outlier
    weights) and are rescaled so their output variance blends into the
    population; the construction is verified against the generating
    calibration set and reseeded until every planted neuron clears the
    WD floor and ranks above every non-planted neuron.
    """
    geom = _geometry(spec)
    x = gen_calibration(spec)
    trim = min(spec.samples, 4096)  # verification subsample

    for attempt in range(MAX_RESEEDS):
        rng = seeded_rng(spec.seed, _MODEL_STREAM_BASE + attempt)
        planted = np.sort(rng.choice(spec.d_ff, spec.planted_count, replace=False))
        up0 = rng.standard_normal((spec.d_ff, spec.d)) / np.sqrt(spec.d)

        if spec.planted_count:
            probe = up0 @ x[:, :trim]
            pop_var = float(np.median(np.var(probe, axis=1)))
            pinv_means = np.linalg.pinv(geom.means)
            for idx in planted:
                t = _planted_targets(spec, geom, rng)
                w = pinv_means @ t
                var = float(np.var(w @ x[:, :trim]))
                target_var = pop_var * rng.uniform(*PLANTED_VAR_JITTER)
                up0[idx] = w * np.sqrt(target_var / var)

        if spec.planted_count:
            wd = np.array(
                [wd_to_gaussian(row @ x[:, :trim]) for row in up0]
            )
            mask = np.zeros(spec.d_ff, dtype=bool)
            mask[planted] = True
            ok = (
                wd[mask].min() >= WD_TARGET
                and wd[mask].min() > wd[~mask].max()
                and np.median(wd[mask]) >= 3.0 * np.median(wd[~mask])
            )
            if not ok:
                continue

        down0 = rng.standard_normal((spec.d, spec.d_ff)) / np.sqrt(spec.d_ff)
        down0[:, planted] *= PLANTED_DOWNSTREAM_GAIN
        blocks = [Block(up=up0, down=down0)]
        for _ in range(1, spec.depth):
            blocks.append(
                Block(
                    up=rng.standard_normal((spec.d_ff, spec.d)) / np.sqrt(spec.d),
                    down=rng.standard_normal((spec.d, spec.d_ff)) / np.sqrt(spec.d_ff),
                )
            )
        return ToyModel(blocks), planted

    raise RuntimeError(
        f"could not reach WD targets after {MAX_RESEEDS} reseeds"
    )


def save_synth_run(spec: SynthSpec, directory) -> tuple[ToyModel, np.ndarray]:
    """Generate and persist model + calibration in the standard layout."""
    from .expansion import save_dense_model
    from .numerics import tensor_codec_write

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model, planted = gen_planted_model(spec)
    x = gen_calibration(spec)
    save_dense_model(model, directory)
    tensor_codec_write(x, directory / "calibration.spxt")
    with open(directory / "planted.json", "w") as fh:
        json.dump(
            {"spec": spec.to_json(), "planted": [int(i) for i in planted]},
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    return model, planted


def load_synth_run(directory) -> tuple[ToyModel, np.ndarray, np.ndarray, SynthSpec]:
    """Load (model, calibration, planted indices, spec) from a run dir."""
    from .expansion import load_dense_model
    from .numerics import tensor_codec_read

    directory = Path(directory)
    model = load_dense_model(directory)
    x = tensor_codec_read(directory / "calibration.spxt")
    with open(directory / "planted.json") as fh:
        info = json.load(fh)
    return (
        model,
        x,
        np.asarray(info["planted"], dtype=np.int64),
        SynthSpec.from_json(info["spec"]),
    )
