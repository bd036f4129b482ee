"""Sparse Expansion: build cluster-routed sparse expert layers and run them.

A dense linear layer is replaced by a router (PCA + K-means over the
layer's inputs) plus c sparse copies of the layer, each pruned against
the Hessian of one input cluster only. Layers of a model are expanded
sequentially, with each layer's calibration inputs produced by the
already-compressed prefix.

All forward passes run column by column so that batched and streamed
inference are bitwise identical and zero-sparsity expansion reproduces
the dense model exactly.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.special

from .errors import PropagationError
from .numerics import derive_seed, tensor_codec_read, tensor_codec_write
from .pruner import (
    DEFAULT_DAMPING,
    HessianState,
    PruneSpec,
    accumulate_hessian,
    rtn_quantize,
    sparsegpt_prune,
)
from .router import Router, fit_router, load_router, route, route_batch, save_router

POOL_ALPHA = 0.1


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU; elementwise, so batching cannot change it."""
    return 0.5 * x * (1.0 + scipy.special.erf(x / np.sqrt(2.0)))


def _linear_forward(w: np.ndarray, bias, x: np.ndarray) -> np.ndarray:
    """Column-by-column W @ x + b. One matvec per input keeps results
    independent of batch shape."""
    out = np.empty((w.shape[0], x.shape[1]))
    for j in range(x.shape[1]):
        col = w @ x[:, j]
        if bias is not None:
            col = col + bias
        out[:, j] = col
    return out


@dataclass
class Block:
    up: np.ndarray  # d_ff x d
    down: np.ndarray  # d x d_ff
    bias_up: np.ndarray | None = None
    bias_down: np.ndarray | None = None


@dataclass
class ToyModel:
    """A stack of FFN blocks: up projection, GELU, down projection."""

    blocks: list[Block]
    residual: bool = False

    @property
    def d(self) -> int:
        return self.blocks[0].up.shape[1]

    @property
    def d_ff(self) -> int:
        return self.blocks[0].up.shape[0]

    def layer_names(self) -> list[str]:
        names = []
        for i in range(len(self.blocks)):
            names += [f"block{i}.up", f"block{i}.down"]
        return names

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_collect(x)[0]

    def forward_collect(
        self, x: np.ndarray
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Model output plus the input matrix seen by every linear layer."""
        x = np.asarray(x, dtype=np.float64)
        inputs: dict[str, np.ndarray] = {}
        for i, block in enumerate(self.blocks):
            inputs[f"block{i}.up"] = x
            h = gelu(_linear_forward(block.up, block.bias_up, x))
            inputs[f"block{i}.down"] = h
            y = _linear_forward(block.down, block.bias_down, h)
            x = y + x if self.residual else y
        return x, inputs


@dataclass
class ExpertLayer:
    """Router plus c sparse (optionally quantized) copies of one layer."""

    router: Router
    experts: list[np.ndarray]
    bias: np.ndarray | None = None
    scales: list[np.ndarray] | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return expert_layer_forward(self, x)

    def forward_with_labels(
        self, x: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        out = np.empty((self.experts[0].shape[0], x.shape[1]))
        labels = np.empty(x.shape[1], dtype=np.int64)
        for j in range(x.shape[1]):
            e = route(self.router, x[:, j])
            labels[j] = e
            col = self.experts[e] @ x[:, j]
            if self.bias is not None:
                col = col + self.bias
            out[:, j] = col
        return out, labels


def expert_layer_forward(layer: ExpertLayer, x: np.ndarray) -> np.ndarray:
    """Route each input column to its expert and apply it.

    Processes one column at a time, so feeding columns individually gives
    bitwise the same result as one batched call.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != layer.experts[0].shape[1]:
        raise ValueError("input dimension does not match the expert layer")
    return layer.forward_with_labels(x)[0]


def build_cluster_experts(
    w: np.ndarray,
    x: np.ndarray,
    labels: np.ndarray,
    c: int,
    spec: PruneSpec,
    damping: float = DEFAULT_DAMPING,
    pool_alpha: float = POOL_ALPHA,
    threads: int = 1,
) -> tuple[list[np.ndarray], list[np.ndarray] | None, dict]:
    """Prune one expert per cluster from its own columns of x.

    A cluster with fewer samples than the layer width would give a
    rank-deficient Hessian, so it pools H_j + pool_alpha * H_global
    (skipped when the cluster already is the whole calibration set).
    """
    m = w.shape[1]
    global_h = accumulate_hessian(x, damping)
    cluster_cols = [np.flatnonzero(labels == j) for j in range(c)]
    pooled_flags = []

    def build_one(j: int) -> tuple[np.ndarray, np.ndarray | None]:
        cols = cluster_cols[j]
        h = accumulate_hessian(x[:, cols], damping)
        if cols.size < m and cols.size < x.shape[1]:
            h = h.pooled(global_h, pool_alpha)
        pruned = sparsegpt_prune(w, h, spec)
        if spec.bits is not None:
            return rtn_quantize(pruned, spec.bits, spec.quant_group)
        return pruned, None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(build_one, range(c)))
    else:
        results = [build_one(j) for j in range(c)]
    pooled_flags = [
        bool(cluster_cols[j].size < m and cluster_cols[j].size < x.shape[1])
        for j in range(c)
    ]
    experts = [r[0] for r in results]
    scales = [r[1] for r in results] if spec.bits is not None else None
    info = {
        "cluster_sizes": [int(cols.size) for cols in cluster_cols],
        "pooled": pooled_flags,
    }
    return experts, scales, info


def expand_layer(
    w: np.ndarray,
    bias: np.ndarray | None,
    x_layer: np.ndarray,
    c: int,
    spec: PruneSpec,
    seed: int,
    pca_k: int | None | str = "auto",
    damping: float = DEFAULT_DAMPING,
    pool_alpha: float = POOL_ALPHA,
    threads: int = 1,
    layer_name: str = "",
) -> ExpertLayer:
    """Replace one dense layer by a routed mixture of sparse experts."""
    w = np.asarray(w, dtype=np.float64)
    x_layer = np.asarray(x_layer, dtype=np.float64)
    if x_layer.shape[1] < c:
        raise ValueError(f"{x_layer.shape[1]} calibration inputs for {c} clusters")
    router = fit_router(x_layer, c, seed, pca_k=pca_k)
    labels = route_batch(router, x_layer)
    experts, scales, info = build_cluster_experts(
        w, x_layer, labels, c, spec, damping, pool_alpha, threads
    )
    provenance = {
        "layer": layer_name,
        "seed": seed,
        "spec": spec.to_json(),
        **info,
    }
    return ExpertLayer(router, experts, bias, scales, provenance)


@dataclass
class ExpandedBlock:
    up: ExpertLayer
    down: ExpertLayer


@dataclass
class ExpandedModel:
    blocks: list[ExpandedBlock]
    residual: bool = False
    config: dict = field(default_factory=dict)

    def layers(self) -> list[tuple[str, ExpertLayer]]:
        out = []
        for i, block in enumerate(self.blocks):
            out += [(f"block{i}.up", block.up), (f"block{i}.down", block.down)]
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        for block in self.blocks:
            h = gelu(block.up.forward(x))
            y = block.down.forward(h)
            x = y + x if self.residual else y
        return x


@dataclass
class ExpandConfig:
    clusters: int = 16
    spec: PruneSpec = field(default_factory=PruneSpec)
    seed: int = 0
    pca_k: int | None | str = "auto"
    damping: float = DEFAULT_DAMPING
    pool_alpha: float = POOL_ALPHA
    threads: int = 1


def expand_model(
    model: ToyModel, x0: np.ndarray, config: ExpandConfig
) -> ExpandedModel:
    """Expand every linear layer, propagating calibration data through the
    already-compressed prefix (layer ordering follows execution order)."""
    x = np.asarray(x0, dtype=np.float64)
    if x.shape[1] == 0:
        raise ValueError("empty calibration set")
    blocks: list[ExpandedBlock] = []
    layer_index = 0
    for i, block in enumerate(model.blocks):
        block_input = x
        expanded = {}
        for kind, w, bias in (
            ("up", block.up, block.bias_up),
            ("down", block.down, block.bias_down),
        ):
            name = f"block{i}.{kind}"
            if not np.isfinite(x).all():
                raise PropagationError(name)
            layer = expand_layer(
                w,
                bias,
                x,
                config.clusters,
                config.spec,
                derive_seed(config.seed, layer_index),
                pca_k=config.pca_k,
                damping=config.damping,
                pool_alpha=config.pool_alpha,
                threads=config.threads,
                layer_name=name,
            )
            expanded[kind] = layer
            x = layer.forward(x)
            if kind == "up":
                x = gelu(x)
            layer_index += 1
        if model.residual:
            x = x + block_input
        blocks.append(ExpandedBlock(expanded["up"], expanded["down"]))
    return ExpandedModel(
        blocks,
        model.residual,
        config={
            "clusters": config.clusters,
            "spec": config.spec.to_json(),
            "seed": config.seed,
            "pca_k": config.pca_k,
            "damping": config.damping,
            "pool_alpha": config.pool_alpha,
            "propagation": "compressed",
        },
    )


def prune_model_layerwise(
    model: ToyModel,
    x0: np.ndarray,
    method: str,
    spec: PruneSpec,
    damping: float = DEFAULT_DAMPING,
) -> ToyModel:
    """One-shot prune every layer, propagating calibration data through
    the already-pruned prefix.

    method is "sparsegpt", "magnitude", or "wanda". The sparsegpt path
    walks exactly the single-expert expansion route, so its tensors match
    a clusters=1 expansion bitwise.
    """
    from .pruner import baseline_prune

    x = np.asarray(x0, dtype=np.float64)
    blocks = []
    for i, block in enumerate(model.blocks):
        block_input = x
        new = {}
        for kind, w, bias in (
            ("up", block.up, block.bias_up),
            ("down", block.down, block.bias_down),
        ):
            if not np.isfinite(x).all():
                raise PropagationError(f"block{i}.{kind}")
            if method == "sparsegpt":
                pruned = sparsegpt_prune(w, accumulate_hessian(x, damping), spec)
            else:
                pruned = baseline_prune(w, x, method, spec)
            if spec.bits is not None:
                pruned = rtn_quantize(pruned, spec.bits, spec.quant_group)[0]
            new[kind] = pruned
            x = _linear_forward(pruned, bias, x)
            if kind == "up":
                x = gelu(x)
        if model.residual:
            x = x + block_input
        blocks.append(
            Block(new["up"], new["down"], block.bias_up, block.bias_down)
        )
    return ToyModel(blocks, model.residual)


def count_params(model) -> dict:
    """Stored nonzero weights, router parameters, and their sum."""
    nonzero = 0
    router_params = 0
    if isinstance(model, ToyModel):
        for block in model.blocks:
            nonzero += int(np.count_nonzero(block.up))
            nonzero += int(np.count_nonzero(block.down))
    else:
        for _, layer in model.layers():
            for expert in layer.experts:
                nonzero += int(np.count_nonzero(expert))
            router_params += layer.router.param_count()
    return {
        "nonzero_weights": nonzero,
        "router_params": router_params,
        "total_effective": nonzero + router_params,
    }


def _write_optional_vector(vec, path) -> bool:
    if vec is None:
        return False
    tensor_codec_write(np.asarray(vec)[None, :], path)
    return True


def save_dense_model(model: ToyModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"type": "dense", "residual": model.residual, "blocks": []}
    for i, block in enumerate(model.blocks):
        entry = {"up": f"block{i}_up.spxt", "down": f"block{i}_down.spxt"}
        tensor_codec_write(block.up, directory / entry["up"])
        tensor_codec_write(block.down, directory / entry["down"])
        for kind, vec in (("bias_up", block.bias_up), ("bias_down", block.bias_down)):
            fname = f"block{i}_{kind}.spxt"
            entry[kind] = fname if _write_optional_vector(
                vec, directory / fname
            ) else None
        manifest["blocks"].append(entry)
    with open(directory / "model.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dense_model(directory) -> ToyModel:
    directory = Path(directory)
    with open(directory / "model.json") as fh:
        manifest = json.load(fh)
    if manifest["type"] != "dense":
        raise ValueError(f"not a dense model dir: {directory}")
    blocks = []
    for entry in manifest["blocks"]:
        kwargs = {}
        for kind in ("bias_up", "bias_down"):
            if entry.get(kind):
                kwargs[kind] = tensor_codec_read(directory / entry[kind])[0]
        blocks.append(
            Block(
                up=tensor_codec_read(directory / entry["up"]),
                down=tensor_codec_read(directory / entry["down"]),
                **kwargs,
            )
        )
    return ToyModel(blocks, residual=manifest["residual"])


def save_expanded_model(model: ExpandedModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "type": "expanded",
        "residual": model.residual,
        "config": model.config,
        "blocks": [],
    }
    for i, block in enumerate(model.blocks):
        entry = {}
        for kind, layer in (("up", block.up), ("down", block.down)):
            sub = f"block{i}_{kind}"
            entry[kind] = sub
            layer_dir = directory / sub
            layer_dir.mkdir(parents=True, exist_ok=True)
            save_router(layer.router, layer_dir)
            for e, expert in enumerate(layer.experts):
                tensor_codec_write(expert, layer_dir / f"expert_{e:03d}.spxt")
            scales_paths = None
            if layer.scales is not None:
                scales_paths = []
                for e, sc in enumerate(layer.scales):
                    fname = f"scales_{e:03d}.spxt"
                    tensor_codec_write(sc, layer_dir / fname)
                    scales_paths.append(fname)
            has_bias = _write_optional_vector(layer.bias, layer_dir / "bias.spxt")
            meta = dict(layer.provenance)
            meta.update(
                {
                    "n_experts": layer.n_experts,
                    "bias": has_bias,
                    "scales_paths": scales_paths,
                }
            )
            with open(layer_dir / "meta.json", "w") as fh:
                json.dump(meta, fh, indent=2, sort_keys=True)
                fh.write("\n")
        manifest["blocks"].append(entry)
    with open(directory / "model.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_expanded_model(directory) -> ExpandedModel:
    directory = Path(directory)
    with open(directory / "model.json") as fh:
        manifest = json.load(fh)
    if manifest["type"] != "expanded":
        raise ValueError(f"not an expanded model dir: {directory}")
    blocks = []
    for entry in manifest["blocks"]:
        layers = {}
        for kind in ("up", "down"):
            layer_dir = directory / entry[kind]
            with open(layer_dir / "meta.json") as fh:
                meta = json.load(fh)
            router = load_router(layer_dir)
            experts = [
                tensor_codec_read(layer_dir / f"expert_{e:03d}.spxt")
                for e in range(meta["n_experts"])
            ]
            scales = None
            if meta.get("scales_paths"):
                scales = [
                    tensor_codec_read(layer_dir / p) for p in meta["scales_paths"]
                ]
            bias = None
            if meta.get("bias"):
                bias = tensor_codec_read(layer_dir / "bias.spxt")[0]
            layers[kind] = ExpertLayer(router, experts, bias, scales, meta)
        blocks.append(ExpandedBlock(layers["up"], layers["down"]))
    return ExpandedModel(blocks, manifest["residual"], manifest.get("config", {}))
