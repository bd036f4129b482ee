"""Input-aware one-shot sparsification and round-to-nearest quantization.

The central routine prunes each weight row by greedy optimal-brain-surgeon
elimination against the calibration Hessian H = X X^T: weights are removed
in batches by ascending saliency w_j^2 / [H^-1]_jj, every removal applies
the exact closed-form compensation to the surviving weights, and the
active-set inverse is downdated exactly between batches. With a batch
(block) size of 1 this is the textbook greedy OBS loop; larger blocks
freeze the saliency ranking for a whole batch of removals at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InfeasibleAllocationError
from .metrics import WdReport, select_wasserstein_neurons
from .numerics import chol_inverse

DEFAULT_DAMPING = 0.01
DEFAULT_BLOCK_SIZE = 128


@dataclass
class HessianState:
    """Accumulated calibration Hessian H = X X^T plus damping metadata."""

    hessian: np.ndarray
    sample_count: int
    damping_fraction: float = DEFAULT_DAMPING

    def damped(self) -> np.ndarray:
        """H + lam*I with lam = damping_fraction * mean(diag H); dead
        dimensions (zero diagonal) end up floored at exactly lam."""
        h = self.hessian
        lam = self.damping_fraction * float(np.mean(np.diag(h)))
        if lam == 0.0:
            return h.copy()
        return h + lam * np.eye(h.shape[0])

    def pooled(self, other: "HessianState", alpha: float) -> "HessianState":
        """Blend in a fallback Hessian: H + alpha * H_other."""
        return HessianState(
            self.hessian + alpha * other.hessian,
            self.sample_count + other.sample_count,
            self.damping_fraction,
        )


def accumulate_hessian(
    x: np.ndarray, damping_fraction: float = DEFAULT_DAMPING
) -> HessianState:
    """Hessian of the layer reconstruction error over calibration inputs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError("need an m x s input matrix with s >= 1")
    return HessianState(x @ x.T, x.shape[1], damping_fraction)


@dataclass
class PruneSpec:
    """What to remove and how to quantize what survives.

    pattern is either "unstructured" (per-row zero count floor(sparsity*m))
    or (zeros_per_group, group_size) for structured n:m sparsity; "2:4" in
    the usual notation means 2 nonzeros kept per aligned group of 4, i.e.
    (2, 4) here.
    """

    sparsity: float = 0.5
    pattern: str | tuple[int, int] = "unstructured"
    block_size: int = DEFAULT_BLOCK_SIZE
    bits: int | None = None
    quant_group: int = 32

    def __post_init__(self):
        if isinstance(self.pattern, str) and self.pattern != "unstructured":
            self.pattern = parse_nm_pattern(self.pattern)
        if self.pattern == "unstructured":
            if not 0.0 <= self.sparsity < 1.0:
                raise ValueError("sparsity must be in [0, 1)")
        else:
            zeros, group = self.pattern
            if not 0 <= zeros < group:
                raise ValueError("need zeros_per_group < group_size")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")
        if self.bits is not None and not 2 <= self.bits <= 8:
            raise ValueError("bits must be in 2..8")
        if self.quant_group < 1:
            raise ValueError("quant_group must be positive")

    def zeros_per_row(self, m: int) -> int:
        if self.pattern == "unstructured":
            return int(math.floor(self.sparsity * m))
        zeros, group = self.pattern
        if m % group != 0:
            raise ValueError(f"group size {group} does not divide width {m}")
        return zeros * (m // group)

    def to_json(self) -> dict:
        pattern = (
            self.pattern if isinstance(self.pattern, str) else list(self.pattern)
        )
        return {
            "sparsity": self.sparsity,
            "pattern": pattern,
            "block_size": self.block_size,
            "bits": self.bits,
            "quant_group": self.quant_group,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PruneSpec":
        pattern = obj.get("pattern", "unstructured")
        if isinstance(pattern, list):
            pattern = tuple(pattern)
        return cls(
            sparsity=obj.get("sparsity", 0.5),
            pattern=pattern,
            block_size=obj.get("block_size", DEFAULT_BLOCK_SIZE),
            bits=obj.get("bits"),
            quant_group=obj.get("quant_group", 32),
        )


def parse_nm_pattern(text: str) -> tuple[int, int]:
    """Parse "n:m" (n nonzeros kept per group of m) into (zeros, group)."""
    try:
        kept, group = (int(part) for part in text.split(":"))
    except ValueError as exc:
        raise ValueError(f"bad n:m pattern {text!r}") from exc
    if not 0 < kept <= group:
        raise ValueError(f"bad n:m pattern {text!r}")
    return group - kept, group


def _solve_spd(b: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    # Principal submatrices of the PD inverse stay PD; fall back if
    # roundoff has eaten the margin.
    try:
        c, low = scipy.linalg.cho_factor(b, lower=True, check_finite=False)
        return scipy.linalg.cho_solve((c, low), rhs, check_finite=False)
    except scipy.linalg.LinAlgError:
        return np.linalg.solve(b, rhs)


def _saliency_order(sal: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Ascending saliency order with ties at the lower column index.

    Saliencies are snapped to a 1e-9 relative grid first: mathematically
    tied candidates otherwise split on the last ulp of the inverse and
    the tie rule would never fire.
    """
    scale = float(np.max(sal))
    if scale <= 0.0:
        keys = np.zeros(sal.size, dtype=np.int64)
    else:
        keys = np.round(sal * (1e9 / scale)).astype(np.int64)
    return np.lexsort((cols, keys))


def _greedy_obs_row(
    w: np.ndarray,
    hinv: np.ndarray,
    phases: list[tuple[np.ndarray, int]],
    block_size: int,
) -> np.ndarray:
    """Prune one row by batched greedy OBS elimination.

    `phases` lists (candidate column ids, zero budget); candidates are
    restricted per phase (whole row for unstructured, one aligned group
    for n:m) while compensation updates and inverse downdates always act
    on every still-active column. Ties in saliency zero the lowest
    column index first.
    """
    m = w.size
    w = w.copy()
    active = np.arange(m)
    hi = hinv.copy()
    for candidates, budget in phases:
        cand_mask = np.zeros(m, dtype=bool)
        cand_mask[candidates] = True
        remaining = budget
        while remaining > 0:
            k = min(block_size, remaining)
            pos_cand = np.flatnonzero(cand_mask[active])
            sal = w[active[pos_cand]] ** 2 / np.diag(hi)[pos_cand]
            order = _saliency_order(sal, active[pos_cand])
            s_pos = np.sort(pos_cand[order[:k]])
            r_pos = np.setdiff1d(np.arange(active.size), s_pos, assume_unique=True)

            b = hi[np.ix_(s_pos, s_pos)]
            a_r = hi[np.ix_(r_pos, s_pos)]
            # Closed-form multi-weight OBS update zeroing the batch.
            x = _solve_spd(b, w[active[s_pos]])
            w[active[r_pos]] -= a_r @ x
            w[active[s_pos]] = 0.0
            # Exact downdate of the active-set inverse.
            hi = hi[np.ix_(r_pos, r_pos)] - a_r @ _solve_spd(b, a_r.T)
            hi = 0.5 * (hi + hi.T)
            active = active[r_pos]
            remaining -= k
    return w


def _row_phases(spec: PruneSpec, m: int) -> list[tuple[np.ndarray, int]]:
    if spec.pattern == "unstructured":
        return [(np.arange(m), spec.zeros_per_row(m))]
    zeros, group = spec.pattern
    if m % group != 0:
        raise ValueError(f"group size {group} does not divide width {m}")
    return [
        (np.arange(start, start + group), zeros) for start in range(0, m, group)
    ]


def sparsegpt_prune(
    w: np.ndarray, hessian: HessianState, spec: PruneSpec
) -> np.ndarray:
    """Prune every row of w against the calibration Hessian."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("weight matrix must be 2-D")
    m = w.shape[1]
    if hessian.hessian.shape != (m, m):
        raise ValueError("Hessian does not match weight width")
    phases = _row_phases(spec, m)
    if all(budget == 0 for _, budget in phases):
        return w.copy()
    hinv = chol_inverse(hessian.damped())
    out = np.empty_like(w)
    for i in range(w.shape[0]):
        out[i] = _greedy_obs_row(w[i], hinv, phases, spec.block_size)
    return out


def prune_neuron_subset(
    w: np.ndarray, hessian: HessianState, indices, spec: PruneSpec
) -> np.ndarray:
    """Prune only the listed rows; every other row is returned untouched."""
    w = np.asarray(w, dtype=np.float64)
    indices = np.asarray(sorted(set(int(i) for i in np.atleast_1d(indices))))
    if indices.size and (indices.min() < 0 or indices.max() >= w.shape[0]):
        raise IndexError("row index out of range")
    out = w.copy()
    if indices.size == 0:
        return out
    phases = _row_phases(spec, w.shape[1])
    if all(budget == 0 for _, budget in phases):
        return out
    hinv = chol_inverse(hessian.damped())
    for i in indices:
        out[i] = _greedy_obs_row(w[i], hinv, phases, spec.block_size)
    return out


def _mask_from_scores(scores: np.ndarray, spec: PruneSpec) -> np.ndarray:
    """Keep mask per row from per-weight scores; low scores are zeroed
    first, ties at the lowest column index."""
    n, m = scores.shape
    keep = np.ones((n, m), dtype=bool)
    if spec.pattern == "unstructured":
        budget = spec.zeros_per_row(m)
        if budget == 0:
            return keep
        for i in range(n):
            order = np.lexsort((np.arange(m), scores[i]))
            keep[i, order[:budget]] = False
        return keep
    zeros, group = spec.pattern
    if m % group != 0:
        raise ValueError(f"group size {group} does not divide width {m}")
    for i in range(n):
        for start in range(0, m, group):
            seg = scores[i, start : start + group]
            order = np.lexsort((np.arange(group), seg))
            keep[i, start + order[:zeros]] = False
    return keep


def baseline_prune(
    w: np.ndarray,
    x: np.ndarray | None,
    method: str,
    spec: PruneSpec,
) -> np.ndarray:
    """Magnitude or Wanda pruning: mask only, no weight updates."""
    w = np.asarray(w, dtype=np.float64)
    if method == "magnitude":
        scores = np.abs(w)
    elif method == "wanda":
        if x is None:
            raise ValueError("wanda needs calibration inputs")
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != w.shape[1]:
            raise ValueError("calibration inputs do not match weight width")
        scores = np.abs(w) * np.linalg.norm(x, axis=1)[None, :]
    else:
        raise ValueError(f"unknown baseline method {method!r}")
    return np.where(_mask_from_scores(scores, spec), w, 0.0)


def allocate_keep_dense(
    w: np.ndarray,
    hessian: HessianState,
    wd: WdReport | np.ndarray,
    keep_fraction: float,
    target_sparsity: float,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> np.ndarray:
    """Keep the top WD rows dense, over-prune the rest to hold the target.

    With keep fraction x and overall target s the surviving rows are
    pruned to s / (1 - x); x = 0 is plain same-sparsity-per-neuron
    pruning.
    """
    w = np.asarray(w, dtype=np.float64)
    if not 0.0 <= keep_fraction < 1.0:
        raise ValueError("keep_fraction must be in [0, 1)")
    rest_sparsity = target_sparsity / (1.0 - keep_fraction)
    if rest_sparsity >= 1.0:
        raise InfeasibleAllocationError(
            f"residual sparsity {rest_sparsity:.3f} is infeasible"
        )
    spec = PruneSpec(sparsity=rest_sparsity, block_size=block_size)
    if keep_fraction == 0.0:
        return sparsegpt_prune(w, hessian, spec)
    dense_rows = select_wasserstein_neurons(wd, keep_fraction)
    pruned_rows = np.setdiff1d(np.arange(w.shape[0]), dense_rows)
    return prune_neuron_subset(w, hessian, pruned_rows, spec)


def rtn_quantize(
    w: np.ndarray, bits: int, quant_group: int
) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric round-to-nearest per group of quant_group weights in a row.

    Returns (quantized weights, scales of shape (rows, groups)). The scale
    is max|w| in the group over the top signed level; an all-zero group
    keeps scale 0 and passes through unchanged. Existing zeros stay
    exactly zero.
    """
    if not 2 <= bits <= 8:
        raise ValueError("bits must be in 2..8")
    if quant_group < 1:
        raise ValueError("quant_group must be positive")
    w = np.asarray(w, dtype=np.float64)
    n, m = w.shape
    qmax = float(2 ** (bits - 1) - 1)
    n_groups = (m + quant_group - 1) // quant_group
    out = np.empty_like(w)
    scales = np.zeros((n, n_groups))
    for g in range(n_groups):
        lo, hi = g * quant_group, min((g + 1) * quant_group, m)
        seg = w[:, lo:hi]
        top = np.max(np.abs(seg), axis=1)
        scale = top / qmax
        scales[:, g] = scale
        safe = np.where(scale > 0.0, scale, 1.0)[:, None]
        q = np.clip(np.round(seg / safe), -qmax, qmax) * safe
        out[:, lo:hi] = np.where(scale[:, None] > 0.0, q, 0.0)
    return out, scales
