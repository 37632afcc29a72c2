"""Deterministic float32 array primitives shared by every stage.

Arrays are plain numpy ndarrays in C (row-major) order with float32
storage. Every reduction or product accumulates in float64 and rounds
back to float32 once, so results never depend on summation chunking or
BLAS thread counts (matrix products go through einsum, not BLAS). -inf
is admitted only as the masking sentinel of relation matrices fed to
softmax_rows; NaN and +inf are rejected at every public boundary.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .hashing import fnv1a64

F32 = np.float32
NEG_INF = np.float32(-np.inf)


def as_f32(x, name: str = "array", allow_neg_inf: bool = False) -> np.ndarray:
    """Validate and return a C-contiguous float32 view of `x`."""
    arr = np.ascontiguousarray(x, dtype=F32)
    bad = ~np.isfinite(arr)
    if allow_neg_inf:
        bad &= ~np.isneginf(arr)
    if bad.any():
        raise NumericError(f"{name} contains non-finite values")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with float64 accumulation."""
    a = as_f32(a, "matmul lhs")
    b = as_f32(b, "matmul rhs")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DataError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.einsum("ij,jk->ik", a.astype(np.float64), b.astype(np.float64))
    return out.astype(F32)


def transpose(a) -> np.ndarray:
    a = as_f32(a, "transpose input")
    return np.ascontiguousarray(a.T)


def concat(arrays, axis: int = 0) -> np.ndarray:
    arrays = [as_f32(a, f"concat input {i}") for i, a in enumerate(arrays)]
    if not arrays:
        raise DataError("concat: no inputs")
    ref = list(arrays[0].shape)
    for i, a in enumerate(arrays[1:], start=1):
        got = list(a.shape)
        if len(got) != len(ref) or any(
            g != r for ax, (g, r) in enumerate(zip(got, ref)) if ax != axis % len(ref)
        ):
            raise DataError(f"concat shape mismatch along axis {axis}: {ref} vs {got}")
    return np.ascontiguousarray(np.concatenate(arrays, axis=axis))


def mean(a, axis=None):
    """Mean with float64 accumulation; scalar for axis=None, float32 array otherwise."""
    a = as_f32(a, "mean input")
    out = a.astype(np.float64).mean(axis=axis)
    if axis is None:
        return float(out)
    return out.astype(F32)


_SIGMOID_LO = np.nextafter(np.float32(0.0), np.float32(1.0))
_SIGMOID_HI = np.nextafter(np.float32(1.0), np.float32(0.0))


def sigmoid(a) -> np.ndarray:
    """Numerically stable elementwise logistic function.

    Outputs stay strictly inside (0, 1): saturated values clamp to the
    nearest representable float32 neighbors of 0 and 1.
    """
    a = as_f32(a, "sigmoid input")
    x = a.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out.astype(F32), _SIGMOID_LO, _SIGMOID_HI)


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    -inf entries are masking sentinels and map to exactly 0. A row that is
    entirely -inf has no admissible distribution and raises.
    """
    m = as_f32(m, "softmax input", allow_neg_inf=True)
    if m.ndim != 2:
        raise DataError(f"softmax_rows expects a matrix, got shape {m.shape}")
    x = m.astype(np.float64)
    row_max = np.max(x, axis=1)
    dead = np.isneginf(row_max)
    if dead.any():
        raise NumericError(f"degenerate attention row {int(np.argmax(dead))}")
    e = np.exp(x - row_max[:, None])  # exp(-inf) == 0 exactly
    out = e / e.sum(axis=1)[:, None]
    return out.astype(F32)


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarity between columns of `a` (d x n) and `b` (d x m)."""
    a = as_f32(a, "cosine lhs")
    b = as_f32(b, "cosine rhs")
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DataError(f"cosine shape mismatch: {a.shape} vs {b.shape}")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    na = np.sqrt(np.einsum("di,di->i", a64, a64))
    nb = np.sqrt(np.einsum("dj,dj->j", b64, b64))
    for side, norms in (("lhs", na), ("rhs", nb)):
        if norms.min(initial=np.inf) < 1e-12:
            raise NumericError(f"zero-norm column {int(np.argmin(norms))} in cosine {side}")
    sim = np.einsum("di,dj->ij", a64 / na, b64 / nb)
    return sim.astype(F32)


def minmax_norm(v) -> np.ndarray:
    """Affine rescale to [0, 1]; a constant input maps to all zeros."""
    v = as_f32(v, "minmax input")
    if v.size == 0:
        raise DataError("minmax_norm: empty input")
    x = v.astype(np.float64)
    lo = x.min()
    hi = x.max()
    if hi == lo:
        return np.zeros_like(v)
    return ((x - lo) / (hi - lo)).astype(F32)


@dataclass(frozen=True)
class Rng:
    """Named deterministic random stream.

    Wraps numpy's PCG64 bit generator, whose stream for a given seed is
    pinned across platforms and numpy releases. `child` derives an
    independent substream from a tag, so separate pipeline stages never
    share or reorder draws.
    """

    seed: int
    algorithm: str = "pcg64"

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)

    def generator(self) -> np.random.Generator:
        """Fresh generator at the start of this stream."""
        return np.random.Generator(np.random.PCG64(self.seed))

    def child(self, tag: str) -> "Rng":
        return Rng(seed=fnv1a64(f"{self.seed}:{tag}".encode("utf-8")))
