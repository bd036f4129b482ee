"""Reconstruction-error metrics, experiment sweeps, and report emission.

Model quality is measured as output MSE against the dense model on
held-out calibration columns (the last quarter, never used for fitting).
Per-neuron records compare one compressed build against the plain
single-expert build on the same held-out data; their RMSE ratio is the
relative improvement (RI), 1.0 meaning parity.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateDistributionError, DegeneratePairsError
from .expansion import (
    ExpandConfig,
    ExpertLayer,
    ToyModel,
    count_params,
    expand_layer,
    expand_model,
    gelu,
)
from .metrics import (
    _pair_indices,
    _pair_input_distances,
    select_wasserstein_neurons,
    wd_to_gaussian,
    weighted_cluster_average,
)
from .numerics import derive_seed, seeded_rng
from .pruner import (
    HessianState,
    PruneSpec,
    accumulate_hessian,
    allocate_keep_dense,
    prune_neuron_subset,
)

SWEEP_GRIDS = {
    "sparsity": (0.5, 0.6, 0.7, 0.8, 0.9),
    "clusters": (1, 2, 4, 8, 16),
    "bits": (3, 4),
    "keep_dense": (0.0, 0.03, 0.05, 0.07, 0.10),
}

ABLATION_SELECTORS = ("wd", "mean", "variance", "weight_magnitude", "random")


@dataclass
class NeuronEvalRecord:
    neuron_index: int
    dense_wd: float
    md: float
    rmse_sparsegpt: float
    rmse_expansion: float
    ri: float
    weighted_cluster_wd: float
    weighted_cluster_md: float
    mean_abs: float
    variance: float


@dataclass
class EvalConfig:
    clusters: int = 16
    sparsity: float = 0.5
    pattern: str | tuple[int, int] = "unstructured"
    bits: int | None = None
    quant_group: int = 32
    block_size: int = 128
    seed: int = 0
    damping: float = 0.01
    pca_k: int | None | str = "auto"
    pool_alpha: float = 0.1
    threads: int = 1
    holdout_fraction: float = 0.25
    pair_budget: int = 20_000
    analysis_layer: str = "block0.up"

    def to_json(self) -> dict:
        d = asdict(self)
        if isinstance(d["pattern"], tuple):
            d["pattern"] = list(d["pattern"])
        return d


@dataclass
class Report:
    rows: list[dict] = field(default_factory=list)
    neuron_tables: dict[str, list[NeuronEvalRecord]] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def per_neuron_rmse(dense_out, sparse_out) -> float:
    """RMSE between two output sample vectors of one neuron."""
    a = np.asarray(dense_out, dtype=np.float64).ravel()
    b = np.asarray(sparse_out, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError("output sample lengths differ")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def relative_improvement(rmse_sgpt: float, rmse_se: float) -> float:
    """RMSE ratio of the single-expert build over the expanded build.

    Both zero means the layer is exact either way: parity, 1.0. A zero
    expanded error with a nonzero reference is flagged as infinite
    improvement.
    """
    if rmse_se == 0.0:
        return 1.0 if rmse_sgpt == 0.0 else math.inf
    return rmse_sgpt / rmse_se


def split_calibration(x: np.ndarray, holdout_fraction: float = 0.25):
    """Fit/held-out split: the last quarter of columns is never fitted."""
    x = np.asarray(x, dtype=np.float64)
    n_fit = x.shape[1] - int(round(holdout_fraction * x.shape[1]))
    if not 0 < n_fit < x.shape[1]:
        raise ValueError("holdout split leaves an empty side")
    return x[:, :n_fit], x[:, n_fit:]


def layer_mapping_difficulty(
    w: np.ndarray, x: np.ndarray, pair_budget: int, rng
) -> np.ndarray:
    """Mapping difficulty of every row over one shared sampled pair set."""
    ii, jj = _pair_indices(x.shape[1], pair_budget, rng)
    dx = _pair_input_distances(x, ii, jj)
    keep = dx > 0.0
    ii, jj, dx = ii[keep], jj[keep], dx[keep]
    if dx.size == 0:
        raise DegeneratePairsError("all sampled input pairs coincide")
    n_x = float(np.max(dx))
    y = w @ x
    out = np.empty(w.shape[0])
    for i in range(w.shape[0]):
        dy = np.abs(y[i, ii] - y[i, jj])
        n_y = float(np.median(dy))
        out[i] = np.mean((dy / n_y) / (dx / n_x)) if n_y > 0.0 else math.nan
    return out


def _cluster_pairs(cols: np.ndarray, pair_budget: int, rng):
    ii, jj = _pair_indices(cols.size, pair_budget, rng)
    return cols[ii], cols[jj]


def layer_records(
    w: np.ndarray,
    x_held: np.ndarray,
    ref_out: np.ndarray,
    comp_out: np.ndarray,
    labels: np.ndarray | None,
    n_clusters: int,
    pair_budget: int,
    seed: int,
) -> list[NeuronEvalRecord]:
    """Per-neuron evaluation records for one layer on held-out inputs.

    ref_out is the single-expert (plain pipeline) compressed output,
    comp_out the build under evaluation; labels are the router cluster
    assignments of the held-out columns (None for unrouted builds, which
    leaves the weighted cluster metrics undefined).
    """
    dense_out = w @ x_held
    md = layer_mapping_difficulty(w, x_held, pair_budget, seeded_rng(seed, 101))
    cluster_cols = []
    if labels is not None:
        cluster_cols = [np.flatnonzero(labels == j) for j in range(n_clusters)]
        pair_sets = [
            _cluster_pairs(cols, pair_budget // max(n_clusters, 1), seeded_rng(seed, 200 + j))
            if cols.size >= 2
            else (None, None)
            for j, cols in enumerate(cluster_cols)
        ]
        cluster_dx = []
        for (ci, cj) in pair_sets:
            if ci is None:
                cluster_dx.append(None)
                continue
            dx = _pair_input_distances(x_held, ci, cj)
            ok = dx > 0.0
            cluster_dx.append((ci[ok], cj[ok], dx[ok]))

    records = []
    for i in range(w.shape[0]):
        y = dense_out[i]
        rmse_ref = per_neuron_rmse(y, ref_out[i])
        rmse_comp = per_neuron_rmse(y, comp_out[i])
        wcwd = math.nan
        wcmd = math.nan
        if labels is not None:
            wd_vals, wd_sizes = [], []
            md_vals, md_sizes = [], []
            for j, cols in enumerate(cluster_cols):
                if cols.size >= 2:
                    try:
                        wd_vals.append(wd_to_gaussian(y[cols]))
                        wd_sizes.append(cols.size)
                    except DegenerateDistributionError:
                        pass
                    if cluster_dx[j] is not None and cluster_dx[j][2].size:
                        ci, cj, dx = cluster_dx[j]
                        dy = np.abs(y[ci] - y[cj])
                        n_y = float(np.median(dy))
                        if n_y > 0.0:
                            md_vals.append(
                                float(np.mean((dy / n_y) / (dx / np.max(dx))))
                            )
                            md_sizes.append(cols.size)
            if wd_vals:
                wcwd = weighted_cluster_average(wd_vals, wd_sizes)
            if md_vals:
                wcmd = weighted_cluster_average(md_vals, md_sizes)
        records.append(
            NeuronEvalRecord(
                neuron_index=i,
                dense_wd=wd_to_gaussian(y),
                md=float(md[i]),
                rmse_sparsegpt=rmse_ref,
                rmse_expansion=rmse_comp,
                ri=relative_improvement(rmse_ref, rmse_comp),
                weighted_cluster_wd=wcwd,
                weighted_cluster_md=wcmd,
                mean_abs=float(abs(np.mean(y))),
                variance=float(np.var(y)),
            )
        )
    return records


def _model_layer(model: ToyModel, name: str):
    block_idx = int(name.split(".")[0].removeprefix("block"))
    kind = name.split(".")[1]
    block = model.blocks[block_idx]
    return (block.up, block.bias_up) if kind == "up" else (block.down, block.bias_down)


def analysis_layer_eval(
    model: ToyModel,
    x: np.ndarray,
    clusters_grid,
    spec: PruneSpec,
    config: EvalConfig,
) -> dict[int, list[NeuronEvalRecord]]:
    """Per-neuron records for the analysis layer across a cluster grid.

    The layer is expanded standalone on the fit split; the c = 1 build is
    the shared reference, so its own records have RI exactly 1.
    """
    x_fit, x_held = split_calibration(x, config.holdout_fraction)
    w, bias = _model_layer(model, config.analysis_layer)
    if bias is not None:
        raise ValueError("analysis layer records assume a bias-free layer")
    layer_seed = derive_seed(config.seed, 0)
    builds: dict[int, ExpertLayer] = {}
    for c in sorted(set(clusters_grid) | {1}):
        builds[c] = expand_layer(
            w, None, x_fit, c, spec, layer_seed,
            pca_k=config.pca_k, damping=config.damping,
            pool_alpha=config.pool_alpha, threads=config.threads,
        )
    ref_out = builds[1].forward(x_held)
    tables = {}
    for c in clusters_grid:
        comp_out, labels = builds[c].forward_with_labels(x_held)
        if c == 1:
            comp_out = ref_out
        tables[c] = layer_records(
            w, x_held, ref_out, comp_out, labels, c,
            config.pair_budget, config.seed,
        )
    return tables


def model_output_mse(dense_model: ToyModel, compressed, x_held: np.ndarray) -> float:
    dense = dense_model.forward(x_held)
    comp = compressed.forward(x_held)
    return float(np.mean((dense - comp) ** 2))


def _keep_dense_model(
    model: ToyModel, x_fit: np.ndarray, keep_fraction: float,
    target_sparsity: float, config: EvalConfig,
) -> ToyModel:
    """Layer-wise keep-dense build with compressed calibration propagation.

    Propagation goes column by column through the pruned prefix, the same
    path the plain pipeline uses, so the keep-nothing build is bitwise
    the plain pipeline.
    """
    from .expansion import Block, _linear_forward

    x = x_fit
    blocks = []
    for block in model.blocks:
        block_input = x
        new = {}
        for kind, w in (("up", block.up), ("down", block.down)):
            hess = accumulate_hessian(x, config.damping)
            wd = np.array([wd_to_gaussian(row @ x) for row in w])
            pruned = allocate_keep_dense(
                w, hess, wd, keep_fraction, target_sparsity, config.block_size
            )
            new[kind] = pruned
            x = _linear_forward(pruned, None, x)
            if kind == "up":
                x = gelu(x)
        if model.residual:
            x = x + block_input
        blocks.append(Block(up=new["up"], down=new["down"]))
    return ToyModel(blocks, model.residual)


def run_sweep(
    model: ToyModel,
    x: np.ndarray,
    axis: str,
    config: EvalConfig,
    grid=None,
) -> Report:
    """Rebuild and evaluate the model along one compression axis.

    Each grid point gets a report row (model-level MSE vs dense, stored
    parameter counts) plus per-neuron records for the analysis layer;
    build failures are recorded and the sweep continues.
    """
    if axis not in SWEEP_GRIDS:
        raise ValueError(f"unknown sweep axis {axis!r}")
    grid = tuple(grid) if grid is not None else SWEEP_GRIDS[axis]
    x_fit, x_held = split_calibration(x, config.holdout_fraction)
    report = Report()
    report.summary = {
        "axis": axis,
        "grid": list(grid),
        "config": config.to_json(),
    }
    w_analysis, _ = _model_layer(model, config.analysis_layer)
    layer_seed = derive_seed(config.seed, 0)

    ref_layer_cache: dict[tuple, np.ndarray] = {}

    def reference_out(spec: PruneSpec) -> np.ndarray:
        key = (spec.sparsity, str(spec.pattern), spec.bits, spec.quant_group)
        if key not in ref_layer_cache:
            layer = expand_layer(
                w_analysis, None, x_fit, 1, spec, layer_seed,
                pca_k=config.pca_k, damping=config.damping,
                pool_alpha=config.pool_alpha, threads=config.threads,
            )
            ref_layer_cache[key] = layer.forward(x_held)
        return ref_layer_cache[key]

    for value in grid:
        row = {"axis": axis, "value": value}
        try:
            spec = PruneSpec(
                sparsity=config.sparsity,
                pattern=config.pattern,
                block_size=config.block_size,
                bits=config.bits,
                quant_group=config.quant_group,
            )
            clusters = config.clusters
            if axis == "sparsity":
                spec = PruneSpec(
                    sparsity=value, pattern="unstructured",
                    block_size=config.block_size,
                )
            elif axis == "clusters":
                clusters = int(value)
            elif axis == "bits":
                spec = PruneSpec(
                    sparsity=config.sparsity, pattern=(2, 4),
                    block_size=config.block_size, bits=int(value),
                    quant_group=config.quant_group,
                )
            if axis == "keep_dense":
                built = _keep_dense_model(
                    model, x_fit, float(value), config.sparsity, config
                )
                labels, n_clusters = None, 0
                plain_spec = PruneSpec(
                    sparsity=config.sparsity, block_size=config.block_size
                )
                ref = reference_out(plain_spec)
                comp_out = _model_layer(built, config.analysis_layer)[0] @ x_held
            else:
                expand_cfg = ExpandConfig(
                    clusters=clusters, spec=spec, seed=config.seed,
                    pca_k=config.pca_k, damping=config.damping,
                    pool_alpha=config.pool_alpha, threads=config.threads,
                )
                built = expand_model(model, x_fit, expand_cfg)
                analysis = dict(built.layers())[config.analysis_layer]
                comp_out, labels = analysis.forward_with_labels(x_held)
                n_clusters = analysis.n_experts
                ref = reference_out(spec)
                if clusters == 1:
                    comp_out = ref
            records = layer_records(
                w_analysis, x_held, ref, comp_out, labels, n_clusters,
                config.pair_budget, config.seed,
            )
            tag = f"{axis}_{value}"
            report.neuron_tables[tag] = records
            params = count_params(built)
            row.update(
                {
                    "model_mse": model_output_mse(model, built, x_held),
                    "median_ri": float(
                        np.median([r.ri for r in records if math.isfinite(r.ri)])
                    ),
                    "neuron_table": tag,
                    **params,
                }
            )
        except Exception as exc:  # record the failure, keep sweeping
            row["error"] = f"{type(exc).__name__}: {exc}"
        report.rows.append(row)
    return report


def _selector_scores(w: np.ndarray, x_fit: np.ndarray, selector: str) -> np.ndarray:
    y = w @ x_fit
    if selector == "wd":
        return np.array([wd_to_gaussian(row) for row in y])
    if selector == "mean":
        return np.abs(np.mean(y, axis=1))
    if selector == "variance":
        return np.var(y, axis=1)
    if selector == "weight_magnitude":
        return np.mean(np.abs(w), axis=1)
    raise ValueError(f"unknown selector {selector!r}")


def targeted_ablation(
    model: ToyModel,
    x: np.ndarray,
    fraction: float,
    selectors,
    sparsity_grid,
    config: EvalConfig,
    layers: list[str] | None = None,
) -> Report:
    """Prune only a selected neuron subset per layer and measure the harm.

    Every linear layer picks its own top-fraction rows by the selector
    (or a seeded random subset) and only those rows are sparsified; the
    row reports model-level output MSE against the dense model.
    """
    x_fit, x_held = split_calibration(x, config.holdout_fraction)
    dense_out, fit_inputs = model.forward_collect(x_fit)
    held_ref = model.forward(x_held)
    layer_names = model.layer_names() if layers is None else list(layers)
    report = Report()
    report.summary = {
        "fraction": fraction,
        "selectors": list(selectors),
        "sparsity_grid": list(sparsity_grid),
        "layers": layer_names,
        "config": config.to_json(),
    }

    selections: dict[tuple[str, str], np.ndarray] = {}
    hessians: dict[str, HessianState] = {}
    for li, name in enumerate(layer_names):
        w, _ = _model_layer(model, name)
        x_in = fit_inputs[name]
        hessians[name] = accumulate_hessian(x_in, config.damping)
        n_rows = w.shape[0]
        k = int(math.ceil(fraction * n_rows))
        for selector in selectors:
            if fraction == 0.0 or k == 0:
                selections[(name, selector)] = np.array([], dtype=np.int64)
            elif selector == "random":
                rng = seeded_rng(config.seed, 300 + li)
                selections[(name, selector)] = np.sort(
                    rng.choice(n_rows, k, replace=False)
                )
            else:
                scores = _selector_scores(w, x_in, selector)
                selections[(name, selector)] = select_wasserstein_neurons(
                    scores, fraction
                )

    from .expansion import Block

    for selector in selectors:
        for s in sparsity_grid:
            row = {"selector": selector, "sparsity": s}
            try:
                spec = PruneSpec(sparsity=float(s), block_size=config.block_size)
                mats = {}
                for name in model.layer_names():
                    w, _ = _model_layer(model, name)
                    if name in layer_names:
                        idx = selections[(name, selector)]
                        mats[name] = prune_neuron_subset(
                            w, hessians[name], idx, spec
                        )
                    else:
                        mats[name] = w
                ablated = ToyModel(
                    [
                        Block(
                            mats[f"block{bi}.up"],
                            mats[f"block{bi}.down"],
                            block.bias_up,
                            block.bias_down,
                        )
                        for bi, block in enumerate(model.blocks)
                    ],
                    model.residual,
                )
                comp = ablated.forward(x_held)
                row["model_mse"] = float(np.mean((held_ref - comp) ** 2))
            except Exception as exc:
                row["error"] = f"{type(exc).__name__}: {exc}"
            report.rows.append(row)
    return report


def histogram(samples, bin_count: int):
    """Equal-width histogram rows (bin_left, bin_right, count)."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ValueError("empty samples")
    if bin_count < 1:
        raise ValueError("need at least one bin")
    counts, edges = np.histogram(samples, bins=bin_count)
    return [
        (float(edges[i]), float(edges[i + 1]), int(counts[i]))
        for i in range(bin_count)
    ]


def write_histogram_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for left, right, count in rows:
            writer.writerow([repr(left), repr(right), count])


def config_hash(obj: dict) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _format_cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_report(report: Report, out_dir, extra_summary: dict | None = None) -> Path:
    """Write report.csv, per-neuron CSVs, and summary.json into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if report.rows:
        columns: list[str] = []
        for row in report.rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
        with open(out_dir / "report.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in report.rows:
                writer.writerow([_format_cell(row.get(c, "")) for c in columns])
    for tag, records in report.neuron_tables.items():
        with open(out_dir / f"neurons_{tag}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            fields = list(NeuronEvalRecord.__dataclass_fields__)
            writer.writerow(fields)
            for rec in records:
                writer.writerow([_format_cell(getattr(rec, f)) for f in fields])
    summary = dict(report.summary)
    if extra_summary:
        summary.update(extra_summary)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir
