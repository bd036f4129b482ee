"""Command-line pipeline: synth, analyze, prune, expand, eval, bench.

Every run is a pure function of (config, seed, input files) and writes a
summary.json echoing the merged configuration; rerunning a command
reproduces its artifacts byte for byte, timestamps and measured bench
latencies aside. Config precedence is defaults < --config file < flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse

from . import __version__
from .errors import CodecError
from .evalreport import (
    ABLATION_SELECTORS,
    SWEEP_GRIDS,
    EvalConfig,
    config_hash,
    histogram,
    run_sweep,
    targeted_ablation,
    write_histogram_csv,
    write_report,
)
from .expansion import (
    ExpandConfig,
    count_params,
    expand_model,
    load_dense_model,
    prune_model_layerwise,
    save_dense_model,
    save_expanded_model,
)
from .metrics import (
    WdReport,
    io_pairs,
    select_wasserstein_neurons,
    wd_to_gaussian,
    write_io_pairs_csv,
)
from .numerics import seeded_rng, tensor_codec_read
from .pruner import PruneSpec, accumulate_hessian, prune_neuron_subset
from .evalreport import _selector_scores, split_calibration
from .synth import SynthSpec, save_synth_run

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_BAD_CONFIG = 4
EXIT_RUNTIME = 5

BENCH_DEFAULT_SIZES = "4096x12288,4096x22528,11264x4096,8192x10240"


@dataclass
class RunConfig:
    command: str = ""
    model_dir: str = ""
    data_path: str = ""
    output_dir: str = "run"
    seed: int = 0
    sparsity: float = 0.5
    pattern: str = "unstructured"
    bits: int | None = None
    quant_group: int = 32
    block_size: int = 128
    clusters: int = 16
    pca_k: str | int | None = "auto"
    damping: float = 0.01
    pool_alpha: float = 0.1
    thread_count: int = 1
    pair_budget: int = 20_000
    # synth fields
    d: int = 64
    d_ff: int = 256
    depth: int = 2
    n_clusters_true: int = 8
    planted_count: int = 8
    planted_shape: str = "bimodal"
    samples: int = 8192
    # eval fields
    axis: str = "sparsity"
    grid: str = ""
    ablation: bool = False
    fraction: float = 0.03
    selectors: str = "wd,random"
    sparsity_grid: str = "0.9"
    method: str = "sparsegpt"
    subset_fraction: float | None = None
    selector: str = "wd"
    keep_dense_x: float | None = None
    neuron: int | None = None
    # bench fields
    sizes: str = BENCH_DEFAULT_SIZES
    formats: str = "dense,csr,packed24"
    reps: int = 25
    warmup: int = 5


def _merge_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            overrides = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file is not valid JSON: {exc}") from exc
        for key, value in overrides.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
    for key, value in vars(args).items():
        if key in ("config", "func") or value is None:
            continue
        if hasattr(cfg, key):
            setattr(cfg, key, value)
    if getattr(args, "thread_count", None) is None and "SPX_THREADS" in os.environ:
        cfg.thread_count = int(os.environ["SPX_THREADS"])
    if cfg.thread_count == 0:
        cfg.thread_count = os.cpu_count() or 1
    return cfg


def _write_summary(cfg: RunConfig, out_dir: Path, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": cfg.command,
        "config": asdict(cfg),
        "version": __version__,
        "created_unix": time.time(),
    }
    if extra:
        payload.update(extra)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_inputs(cfg: RunConfig):
    model_dir = Path(cfg.model_dir)
    if not (model_dir / "model.json").exists():
        raise FileNotFoundError(f"no model.json under {model_dir}")
    model = load_dense_model(model_dir)
    data_path = Path(cfg.data_path) if cfg.data_path else model_dir / "calibration.spxt"
    if not data_path.exists():
        raise FileNotFoundError(f"calibration data not found: {data_path}")
    return model, tensor_codec_read(data_path)


def _prune_spec(cfg: RunConfig) -> PruneSpec:
    return PruneSpec(
        sparsity=cfg.sparsity,
        pattern=cfg.pattern,
        block_size=cfg.block_size,
        bits=cfg.bits,
        quant_group=cfg.quant_group,
    )


def _norm_pca_k(value):
    """--pca-k accepts "auto", "none", or an integer dimension."""
    if value is None or value == "auto":
        return "auto"
    if isinstance(value, str):
        if value.lower() in ("none", "off"):
            return None
        return int(value)
    return value


def cmd_synth(cfg: RunConfig) -> int:
    spec = SynthSpec(
        seed=cfg.seed,
        d=cfg.d,
        d_ff=cfg.d_ff,
        depth=cfg.depth,
        n_clusters_true=cfg.n_clusters_true,
        planted_count=cfg.planted_count,
        planted_shape=cfg.planted_shape,
        samples=cfg.samples,
    )
    out = Path(cfg.output_dir)
    _, planted = save_synth_run(spec, out)
    _write_summary(cfg, out, {"planted_count": int(planted.size)})
    return EXIT_OK


def cmd_analyze(cfg: RunConfig) -> int:
    model, x = _load_inputs(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, inputs = model.forward_collect(x)
    mats = dict(zip(model.layer_names(), _all_mats(model)))
    top_overall = 0
    for name, w in mats.items():
        y_in = inputs[name]
        wd = np.array([wd_to_gaussian(row @ y_in) for row in w])
        report = WdReport(layer_id=name, wd=wd)
        report.write_csv(out / f"wd_{name.replace('.', '_')}.csv")
        if name == "block0.up":
            top_overall = int(np.argmax(wd))
            from .evalreport import layer_mapping_difficulty

            md = layer_mapping_difficulty(
                w, y_in, cfg.pair_budget, seeded_rng(cfg.seed, 50)
            )
            with open(out / "md_block0_up.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["neuron_index", "md"])
                for i, v in enumerate(md):
                    writer.writerow([i, repr(float(v))])
    neuron = cfg.neuron if cfg.neuron is not None else top_overall
    w0 = model.blocks[0].up
    pairs, skipped = io_pairs(
        w0[neuron], x, cfg.pair_budget, seeded_rng(cfg.seed, 51)
    )
    write_io_pairs_csv(pairs, out / f"io_pairs_neuron{neuron}.csv")
    rows = histogram(w0[neuron] @ x, 60)
    write_histogram_csv(rows, out / f"hist_neuron{neuron}.csv")
    _write_summary(cfg, out, {"io_pairs_neuron": neuron, "io_pairs_skipped": skipped})
    return EXIT_OK


def _all_mats(model):
    mats = []
    for block in model.blocks:
        mats += [block.up, block.down]
    return mats


def cmd_prune(cfg: RunConfig) -> int:
    model, x = _load_inputs(cfg)
    out = Path(cfg.output_dir)
    spec = _prune_spec(cfg)
    if cfg.keep_dense_x is not None:
        from .evalreport import _keep_dense_model

        eval_cfg = EvalConfig(
            sparsity=cfg.sparsity, block_size=cfg.block_size,
            damping=cfg.damping, seed=cfg.seed,
        )
        pruned = _keep_dense_model(model, x, cfg.keep_dense_x, cfg.sparsity, eval_cfg)
    elif cfg.subset_fraction is not None:
        _, inputs = model.forward_collect(x)
        from .expansion import Block, ToyModel

        blocks = []
        for i, block in enumerate(model.blocks):
            new = {}
            for kind, w in (("up", block.up), ("down", block.down)):
                name = f"block{i}.{kind}"
                x_in = inputs[name]
                if cfg.selector == "random":
                    k = int(np.ceil(cfg.subset_fraction * w.shape[0]))
                    idx = np.sort(
                        seeded_rng(cfg.seed, 300 + 2 * i + (kind == "down")).choice(
                            w.shape[0], k, replace=False
                        )
                    )
                else:
                    idx = select_wasserstein_neurons(
                        _selector_scores(w, x_in, cfg.selector), cfg.subset_fraction
                    )
                new[kind] = prune_neuron_subset(
                    w, accumulate_hessian(x_in, cfg.damping), idx, spec
                )
            blocks.append(Block(new["up"], new["down"], block.bias_up, block.bias_down))
        pruned = ToyModel(blocks, model.residual)
    else:
        pruned = prune_model_layerwise(model, x, cfg.method, spec, cfg.damping)
    save_dense_model(pruned, out)
    _write_summary(cfg, out, {"params": count_params(pruned)})
    return EXIT_OK


def cmd_expand(cfg: RunConfig) -> int:
    model, x = _load_inputs(cfg)
    out = Path(cfg.output_dir)
    expand_cfg = ExpandConfig(
        clusters=cfg.clusters,
        spec=_prune_spec(cfg),
        seed=cfg.seed,
        pca_k=_norm_pca_k(cfg.pca_k),
        damping=cfg.damping,
        pool_alpha=cfg.pool_alpha,
        threads=cfg.thread_count,
    )
    expanded = expand_model(model, x, expand_cfg)
    save_expanded_model(expanded, out)
    _write_summary(cfg, out, {"params": count_params(expanded)})
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    model, x = _load_inputs(cfg)
    eval_cfg = EvalConfig(
        clusters=cfg.clusters,
        sparsity=cfg.sparsity,
        pattern=cfg.pattern,
        bits=cfg.bits,
        quant_group=cfg.quant_group,
        block_size=cfg.block_size,
        seed=cfg.seed,
        damping=cfg.damping,
        pca_k=_norm_pca_k(cfg.pca_k),
        pool_alpha=cfg.pool_alpha,
        threads=cfg.thread_count,
        pair_budget=cfg.pair_budget,
    )
    if cfg.ablation:
        selectors = [s for s in cfg.selectors.split(",") if s]
        for s in selectors:
            if s not in ABLATION_SELECTORS:
                raise ValueError(f"unknown selector {s!r}")
        grid = [float(v) for v in cfg.sparsity_grid.split(",") if v]
        report = targeted_ablation(model, x, cfg.fraction, selectors, grid, eval_cfg)
        tag = {"mode": "ablation", "fraction": cfg.fraction, "selectors": selectors}
    else:
        grid = [float(v) for v in cfg.grid.split(",") if v] or None
        if cfg.axis == "clusters" and grid is not None:
            grid = [int(v) for v in grid]
        report = run_sweep(model, x, cfg.axis, eval_cfg, grid)
        tag = {"mode": "sweep", "axis": cfg.axis}
    run_dir = Path(cfg.output_dir) / config_hash({**asdict(cfg), **tag})
    write_report(report, run_dir)
    _write_summary(cfg, run_dir, {"report": tag})
    return EXIT_OK


def _parse_sizes(text: str) -> list[tuple[int, int]]:
    sizes = []
    for part in text.split(","):
        if not part:
            continue
        rows, cols = part.lower().split("x")
        sizes.append((int(rows), int(cols)))
    if not sizes:
        raise ValueError("no bench sizes given")
    return sizes


def _packed24_build(w: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    """2:4-pack a dense matrix: keep 2 random positions per aligned group
    of 4, storing values and absolute column indices."""
    rows, cols = w.shape
    groups = cols // 4
    scores = rng.random((rows, groups, 4))
    order = np.argsort(scores, axis=2)
    kept = np.sort(order[:, :, :2], axis=2)  # (rows, groups, 2)
    col_idx = (np.arange(groups)[None, :, None] * 4 + kept).reshape(rows, -1)
    vals = np.take_along_axis(w, col_idx, axis=1)
    return vals.astype(np.float32), col_idx.astype(np.int32)


def bench_matvec(
    sizes: list[tuple[int, int]],
    formats: list[str],
    sparsity: float,
    reps: int,
    warmup: int,
    seed: int,
) -> list[dict]:
    """Matrix-vector latency per (size, format) with exact MAC counts.

    Measured wall-clock medians and interquartile ranges are reported,
    never asserted; multiply-accumulate counts are exact by construction.
    """
    if reps < 10:
        raise ValueError("need at least 10 reps")
    rows_out = []
    for si, (r, c) in enumerate(sizes):
        rng = seeded_rng(seed, si)
        dense = rng.standard_normal((r, c), dtype=np.float32)
        x = rng.standard_normal(c, dtype=np.float32)
        y = np.empty(r, dtype=np.float32)
        for fmt in formats:
            # Outputs go into preallocated buffers: allocation churn is the
            # main source of latency jitter at these sizes.
            if fmt == "dense":
                op = lambda: np.dot(dense, x, out=y)
                macs = r * c
            elif fmt == "csr":
                mask = rng.random((r, c)) >= sparsity
                sp = scipy.sparse.csr_matrix(np.where(mask, dense, 0.0))
                macs = int(sp.nnz)
                op = lambda: sp @ x
            elif fmt == "packed24":
                if c % 4:
                    raise ValueError("packed24 needs a multiple-of-4 width")
                vals, col_idx = _packed24_build(dense, rng)
                gather = np.empty_like(vals)
                macs = vals.size

                def op(vals=vals, col_idx=col_idx, gather=gather):
                    np.take(x, col_idx, out=gather)
                    return np.einsum("ij,ij->i", vals, gather, out=y)

            else:
                raise ValueError(f"unknown bench format {fmt!r}")
            for _ in range(warmup):
                op()
            lat = np.empty(reps)
            for k in range(reps):
                t0 = time.perf_counter_ns()
                op()
                lat[k] = (time.perf_counter_ns() - t0) / 1e3  # us
            q25, q50, q75 = np.percentile(lat, (25, 50, 75))
            rows_out.append(
                {
                    "rows": r,
                    "cols": c,
                    "format": fmt,
                    "macs": macs,
                    "median_us": float(q50),
                    "iqr_us": float(q75 - q25),
                    "reps": reps,
                }
            )
    return rows_out


def cmd_bench(cfg: RunConfig) -> int:
    sizes = _parse_sizes(cfg.sizes)
    formats = [f for f in cfg.formats.split(",") if f]
    rows = bench_matvec(
        sizes, formats, cfg.sparsity, cfg.reps, cfg.warmup, cfg.seed
    )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        cols = ["rows", "cols", "format", "macs", "median_us", "iqr_us", "reps"]
        writer.writerow(cols)
        for row in rows:
            writer.writerow([row[c] for c in cols])
    _write_summary(cfg, out, {"bench_rows": len(rows)})
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults < file < flags)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--out", dest="output_dir", default=None)
    p.add_argument("--threads", dest="thread_count", type=int, default=None,
                   help="0 means all cores; results do not depend on it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spx",
        description="one-shot compression and neuron-entanglement toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted toy model + calibration")
    _add_common(p)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--dff", dest="d_ff", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--clusters-true", dest="n_clusters_true", type=int, default=None)
    p.add_argument("--planted", dest="planted_count", type=int, default=None)
    p.add_argument("--shape", dest="planted_shape", default=None,
                   choices=("bimodal", "heavy-tail", "trimodal"))
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("analyze", help="WD/MD/io-pair reports for a model")
    _add_common(p)
    p.add_argument("--model-dir", dest="model_dir", default=None, required=True)
    p.add_argument("--data", dest="data_path", default=None)
    p.add_argument("--pair-budget", dest="pair_budget", type=int, default=None)
    p.add_argument("--neuron", type=int, default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("prune", help="baselines, sparsegpt, subset, keep-dense")
    _add_common(p)
    p.add_argument("--model-dir", dest="model_dir", default=None, required=True)
    p.add_argument("--data", dest="data_path", default=None)
    p.add_argument("--method", default=None,
                   choices=("sparsegpt", "magnitude", "wanda"))
    p.add_argument("--sparsity", type=float, default=None)
    p.add_argument("--pattern", default=None)
    p.add_argument("--bits", type=int, default=None)
    p.add_argument("--quant-group", dest="quant_group", type=int, default=None)
    p.add_argument("--block-size", dest="block_size", type=int, default=None)
    p.add_argument("--damping", type=float, default=None)
    p.add_argument("--keep-dense-x", dest="keep_dense_x", type=float, default=None)
    p.add_argument("--subset-fraction", dest="subset_fraction", type=float,
                   default=None)
    p.add_argument("--selector", default=None, choices=ABLATION_SELECTORS)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("expand", help="build a sparse-expert expansion")
    _add_common(p)
    p.add_argument("--model-dir", dest="model_dir", default=None, required=True)
    p.add_argument("--data", dest="data_path", default=None)
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--sparsity", type=float, default=None)
    p.add_argument("--pattern", default=None)
    p.add_argument("--bits", type=int, default=None)
    p.add_argument("--quant-group", dest="quant_group", type=int, default=None)
    p.add_argument("--block-size", dest="block_size", type=int, default=None)
    p.add_argument("--pca-k", dest="pca_k", default=None)
    p.add_argument("--damping", type=float, default=None)
    p.add_argument("--pool-alpha", dest="pool_alpha", type=float, default=None)
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("eval", help="sweeps and targeted ablation")
    _add_common(p)
    p.add_argument("--model-dir", dest="model_dir", default=None, required=True)
    p.add_argument("--data", dest="data_path", default=None)
    p.add_argument("--axis", default=None, choices=tuple(SWEEP_GRIDS))
    p.add_argument("--grid", default=None, help="comma-separated grid override")
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--sparsity", type=float, default=None)
    p.add_argument("--pair-budget", dest="pair_budget", type=int, default=None)
    p.add_argument("--ablation", action="store_true", default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--selectors", default=None)
    p.add_argument("--sparsity-grid", dest="sparsity_grid", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="CPU matvec latency and MAC counts")
    _add_common(p)
    p.add_argument("--sizes", default=None)
    p.add_argument("--formats", default=None)
    p.add_argument("--sparsity", type=float, default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    try:
        cfg = _merge_config(args)
        cfg.command = args.command
        return args.func(cfg)
    except FileNotFoundError as exc:
        _emit_error("missing_file", str(exc))
        return EXIT_MISSING_FILE
    except (ValueError, KeyError, CodecError) as exc:
        _emit_error("invalid_config", str(exc))
        return EXIT_BAD_CONFIG
    except Exception as exc:  # pragma: no cover - defensive
        _emit_error(type(exc).__name__, str(exc))
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
