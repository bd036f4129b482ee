"""Deterministic numeric kernels and the tensor file codec.

Matrices are plain 2-D float64 numpy arrays, row-major, one neuron per row
for weight matrices and one sample per column for input matrices. All
internal arithmetic is float64; the on-disk format stores float32.
"""

from __future__ import annotations

import logging
import math
import struct

import numpy as np
import scipy.linalg
import scipy.special

from .errors import (
    BadMagicError,
    NotPositiveDefiniteError,
    ShapeOverflowError,
    TruncatedPayloadError,
    UnsupportedFormatError,
)

log = logging.getLogger("spx.numerics")

MAGIC = b"SPXT"
CODEC_VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIBBQQ")  # magic, version, dtype, ndim, rows, cols
# Refuse shapes that cannot be a real desk-scale tensor before allocating.
MAX_ELEMENTS = 1 << 40


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array, rejecting non-finite data."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={m.ndim}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return m


def tensor_codec_write(m: np.ndarray, path) -> None:
    """Write a matrix as a float32 SPXT tensor file."""
    m = as_matrix(m)
    header = _HEADER.pack(MAGIC, CODEC_VERSION, DTYPE_F32, 2, m.shape[0], m.shape[1])
    payload = np.asarray(m, dtype="<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def tensor_codec_read(path) -> np.ndarray:
    """Read an SPXT tensor file back as a float64 matrix."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC:
            raise BadMagicError(f"not an SPXT file: {path}")
        raise TruncatedPayloadError(f"header truncated: {path}")
    magic, version, dtype, ndim, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r} in {path}")
    if version != CODEC_VERSION or dtype != DTYPE_F32 or ndim != 2:
        raise UnsupportedFormatError(
            f"unsupported header (version={version}, dtype={dtype}, ndim={ndim})"
        )
    if rows * cols > MAX_ELEMENTS:
        raise ShapeOverflowError(f"declared shape {rows}x{cols} overflows")
    expected = rows * cols * 4
    body = raw[_HEADER.size :]
    if len(body) < expected:
        raise TruncatedPayloadError(
            f"payload has {len(body)} bytes, expected {expected}"
        )
    if len(body) > expected:
        raise TruncatedPayloadError(f"trailing bytes after payload in {path}")
    data = np.frombuffer(body, dtype="<f4").reshape(rows, cols)
    return data.astype(np.float64)


def cholesky_spd(
    m: np.ndarray, jitter: float = 0.0, escalations: int = 6
) -> np.ndarray:
    """Lower Cholesky factor of (m + jitter*I), escalating jitter on failure.

    The jitter is multiplied by 10 up to `escalations` times before giving
    up; an all-zero starting jitter escalates from an eps-scaled floor.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("cholesky_spd needs a square matrix")
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    if not np.allclose(m, m.T, rtol=1e-8, atol=1e-8 * max(1.0, np.abs(m).max())):
        raise ValueError("matrix is not symmetric")
    scale = float(np.mean(np.abs(np.diag(m)))) or 1.0
    current = jitter
    for attempt in range(escalations + 1):
        try:
            shifted = m if current == 0.0 else m + current * np.eye(m.shape[0])
            return np.linalg.cholesky(shifted)
        except np.linalg.LinAlgError:
            if attempt == escalations:
                break
            current = current * 10.0 if current > 0.0 else 1e-12 * scale
            log.warning(
                "cholesky failed, escalating jitter to %.3e (attempt %d)",
                current,
                attempt + 1,
            )
    raise NotPositiveDefiniteError(
        f"not positive definite after {escalations} jitter escalations"
    )


def sym_eig(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues descending, eigenvectors as rows matching them).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("sym_eig needs a square matrix")
    try:
        vals, vecs = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:  # iteration cap inside LAPACK
        raise RuntimeError("eigendecomposition did not converge") from exc
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order].T.copy()


# Acklam's rational approximation to the standard normal quantile.
_ACKLAM_A = (
    -3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
    1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00,
)
_ACKLAM_B = (
    -5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
    6.680131188771972e01, -1.328068155288572e01,
)
_ACKLAM_C = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
    -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00,
)
_ACKLAM_D = (
    7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
    3.754408661907416e00,
)
_P_LOW = 0.02425


def normal_cdf(z):
    """Standard normal CDF, accurate in both tails."""
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * scipy.special.erfc(-z / math.sqrt(2.0))


def inv_normal_cdf(p):
    """Standard normal quantile for p in (0, 1).

    Acklam's rational approximation refined by one Halley step against
    an erfc-based CDF; the refined result satisfies |CDF(z) - p| <= 1e-8.
    Accepts scalars or arrays.
    """
    arr = np.asarray(p, dtype=np.float64)
    if arr.size and not ((arr > 0.0) & (arr < 1.0)).all():
        raise ValueError("p must lie strictly inside (0, 1)")
    x = np.empty_like(arr)

    lo = arr < _P_LOW
    hi = arr > 1.0 - _P_LOW
    mid = ~(lo | hi)

    if mid.any():
        q = arr[mid] - 0.5
        r = q * q
        a, b = _ACKLAM_A, _ACKLAM_B
        num = ((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]
        den = ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        x[mid] = num * q / den

    def _tail(q):
        c, d = _ACKLAM_C, _ACKLAM_D
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        return num / den

    if lo.any():
        x[lo] = _tail(np.sqrt(-2.0 * np.log(arr[lo])))
    if hi.any():
        x[hi] = -_tail(np.sqrt(-2.0 * np.log(1.0 - arr[hi])))

    # One Halley refinement step against the erfc-based CDF.
    err = normal_cdf(x) - arr
    u = err * math.sqrt(2.0 * math.pi) * np.exp(0.5 * x * x)
    x = x - u / (1.0 + 0.5 * x * u)
    if np.isscalar(p) or np.asarray(p).ndim == 0:
        return float(x)
    return x


def seeded_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Deterministic generator: PCG64 keyed by (seed, stream).

    The generator family is pinned per release; identical (seed, stream)
    reproduces the identical draw sequence on every platform. Parallel
    code takes one stream id per worker instead of sharing a generator.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, stream: int) -> int:
    """Fold (seed, stream) into a single 63-bit child seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def chol_inverse(m: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Inverse of an SPD matrix via Cholesky and two triangular solves."""
    ell = cholesky_spd(m, jitter)
    eye = np.eye(m.shape[0])
    y = scipy.linalg.solve_triangular(ell, eye, lower=True)
    inv = scipy.linalg.solve_triangular(ell.T, y, lower=False)
    return 0.5 * (inv + inv.T)
