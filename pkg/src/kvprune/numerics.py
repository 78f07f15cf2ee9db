"""Dense linear algebra and sampling primitives for the forward pass.

All kernels are deterministic: reductions run in float64 with a fixed
(row-major) order and results are truncated back to the caller's dtype.
Matrices are plain 2-D numpy arrays; the package-wide convention is
float32 row-major, with float64 accepted for oracle/test paths.

Randomness goes through numpy's PCG64 generator (``make_rng``), which is
specified to produce identical streams for identical seeds on every
platform.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

__all__ = [
    "make_rng",
    "matmul",
    "softmax_row",
    "rope_apply",
    "sample_top_p",
]


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic RNG: PCG64 seeded through numpy's SeedSequence."""
    return np.random.Generator(np.random.PCG64(seed))


def _as_float_array(x, ndim: int, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != ndim:
        raise ContractViolation(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, truncated to the input dtype.

    Accumulating in float64 makes the float32 result insensitive to
    summation order at these scales, so outputs are reproducible across
    BLAS builds.
    """
    a = _as_float_array(a, 2, "a")
    b = _as_float_array(b, 2, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )
    out = a.astype(np.float64, copy=False) @ b.astype(np.float64, copy=False)
    return out.astype(np.result_type(a, b), copy=False)


def softmax_row(logits) -> np.ndarray:
    """Numerically stable softmax of a single row (max-subtraction form)."""
    row = _as_float_array(logits, 1, "logits")
    if row.size == 0:
        raise ContractViolation("softmax_row: empty input")
    if not np.all(np.isfinite(row)):
        raise ContractViolation("softmax_row: non-finite input")
    z = row.astype(np.float64, copy=False)
    z = np.exp(z - z.max())
    return (z / z.sum()).astype(row.dtype, copy=False)


def rope_apply(vec, position: int, head_dim: int, base: float = 10000.0) -> np.ndarray:
    """Rotary position encoding: rotate adjacent pairs by position-dependent angles.

    Pair ``(x[2i], x[2i+1])`` within each ``head_dim`` block is rotated by
    ``position / base**(2i / head_dim)``. Vectors spanning several heads
    (``len(vec) == n * head_dim``) get the same rotation per block, so a
    full d-wide key row can be rotated in one call. Rotation is
    norm-preserving and the identity at position 0.
    """
    v = _as_float_array(vec, 1, "vec")
    if head_dim % 2 != 0:
        raise ContractViolation(f"rope_apply: head_dim must be even, got {head_dim}")
    if position < 0:
        raise ContractViolation(f"rope_apply: position must be >= 0, got {position}")
    if v.size % head_dim != 0:
        raise ContractViolation(
            f"rope_apply: vector length {v.size} not a multiple of head_dim {head_dim}"
        )
    half = head_dim // 2
    angles = position / base ** (np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    cos = np.cos(angles)
    sin = np.sin(angles)
    x = v.astype(np.float64, copy=False).reshape(-1, half, 2)
    out = np.empty_like(x)
    out[..., 0] = x[..., 0] * cos - x[..., 1] * sin
    out[..., 1] = x[..., 0] * sin + x[..., 1] * cos
    return out.reshape(v.size).astype(v.dtype, copy=False)


def sample_top_p(probs, p: float, rng: np.random.Generator) -> int:
    """Nucleus sampling: draw from the smallest top-mass prefix covering ``p``.

    Tokens are ranked by descending probability (ties resolved toward the
    lower index); the shortest prefix whose mass reaches ``p`` is
    renormalized and sampled. ``p=1`` degenerates to sampling the full
    distribution.
    """
    q = _as_float_array(probs, 1, "probs")
    if not 0.0 < p <= 1.0:
        raise ContractViolation(f"sample_top_p: p must be in (0, 1], got {p}")
    total = float(q.sum(dtype=np.float64))
    if abs(total - 1.0) > 1e-5:
        raise ContractViolation(f"sample_top_p: probs sum to {total}, expected 1")
    # Stable sort on negated values keeps equal-probability ties in index order.
    order = np.argsort(-q.astype(np.float64), kind="stable")
    sorted_p = q[order].astype(np.float64)
    cum = np.cumsum(sorted_p)
    # First position where the prefix mass covers p; fall back to the full
    # distribution when float loss keeps cum below p.
    covered = np.nonzero(cum >= p - 1e-12)[0]
    cut = int(covered[0]) + 1 if covered.size else q.size
    prefix = sorted_p[:cut]
    u = rng.random() * prefix.sum()
    pick = int(np.searchsorted(np.cumsum(prefix), u, side="right"))
    pick = min(pick, cut - 1)
    return int(order[pick])
