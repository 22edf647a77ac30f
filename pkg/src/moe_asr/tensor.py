"""Dense float64 tensor primitives with hand-derived backward passes.

Arrays are plain C-order numpy ndarrays (rank 1/2/3), which is exactly the
flat row-major 64-bit storage the rest of the package assumes. Forward ops
report their cost to the active FLOP counter; backward passes are separate
functions (one per primitive) so each gradient formula can be checked
against finite differences in isolation. All functions are pure: no shared
mutable state, safe to call from multiple threads.
"""

from __future__ import annotations

import numpy as np

from . import flops
from .errors import DimensionError, EmptySequenceError


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


# ----------------------------------------------------------------------
# matmul

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix/vector product for rank-1 and rank-2 operands.

    Uses einsum rather than BLAS: each output row is reduced in a fixed
    k-order independent of the batch size, so evaluating one frame, a
    routed subset, or the whole utterance gives bit-identical rows (the
    top-1 dense-oracle and dispatch contracts are exact, not approximate).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ka = a.shape[-1]
    kb = b.shape[0]
    if ka != kb:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    m = 1 if a.ndim == 1 else a.shape[0]
    n = 1 if b.ndim == 1 else b.shape[1]
    flops.add(2 * m * ka * n)
    spec = {(1, 2): "k,kj->j", (2, 1): "ik,k->i",
            (1, 1): "k,k->", (2, 2): "ik,kj->ij"}[(a.ndim, b.ndim)]
    return np.einsum(spec, a, b)


def matmul_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of `matmul(a, b)` w.r.t. both operands."""
    grad = np.asarray(grad, dtype=np.float64)
    if a.ndim == 1 and b.ndim == 2:
        return b @ grad, np.outer(a, grad)
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(grad, b), a.T @ grad
    if a.ndim == 1 and b.ndim == 1:
        return grad * b, grad * a
    return grad @ b.T, a.T @ grad


# ----------------------------------------------------------------------
# softmax / log-softmax (max-subtraction stabilized)

def _check_softmax_input(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2):
        raise DimensionError(f"softmax expects rank 1 or 2, got shape {x.shape}")
    if x.shape[-1] == 0:
        raise DimensionError("softmax over an empty axis")
    return x


def softmax(x: np.ndarray) -> np.ndarray:
    x = _check_softmax_input(x)
    n = x.shape[-1]
    rows = 1 if x.ndim == 1 else x.shape[0]
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    flops.add(rows * (4 * n - 1))
    return out


def softmax_backward(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    """dX for y = softmax(x): y * (g - <g, y>), row-wise for rank 2."""
    dot = np.sum(grad * out, axis=-1, keepdims=(out.ndim == 2))
    return out * (grad - dot)


def log_softmax(x: np.ndarray) -> np.ndarray:
    x = _check_softmax_input(x)
    n = x.shape[-1]
    rows = 1 if x.ndim == 1 else x.shape[0]
    z = x - x.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    flops.add(rows * (4 * n + 1))
    return out


def log_softmax_backward(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    total = grad.sum(axis=-1, keepdims=(out.ndim == 2))
    return grad - np.exp(out) * total


# ----------------------------------------------------------------------
# concat / slicing

def concat(parts, axis: int = 0) -> np.ndarray:
    parts = [np.asarray(p, dtype=np.float64) for p in parts]
    if not parts:
        raise DimensionError("concat of zero parts")
    base = list(parts[0].shape)
    for p in parts[1:]:
        if p.ndim != parts[0].ndim:
            raise DimensionError(
                f"concat rank mismatch: {parts[0].shape} vs {p.shape}")
        for d in range(p.ndim):
            if d != axis and p.shape[d] != base[d]:
                raise DimensionError(
                    f"concat off-axis shapes disagree on axis {d}: "
                    f"{tuple(base)} vs {p.shape}")
    return np.concatenate(parts, axis=axis)


def concat_backward(grad: np.ndarray, sizes, axis: int = 0):
    """Split `grad` back into pieces matching the concatenated part sizes."""
    offsets = np.cumsum(sizes)[:-1]
    return np.split(grad, offsets, axis=axis)


# ----------------------------------------------------------------------
# temporal mean

def mean_over_time(seq: np.ndarray) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2:
        raise DimensionError(f"mean_over_time expects T x d, got {seq.shape}")
    t, d = seq.shape
    if t == 0:
        raise EmptySequenceError("mean_over_time over zero frames")
    flops.add(t * d)
    return seq.mean(axis=0)


def mean_over_time_backward(grad: np.ndarray, t: int) -> np.ndarray:
    """Each frame receives 1/T of the pooled gradient."""
    return np.tile(grad / t, (t, 1))


# ----------------------------------------------------------------------
# elementwise

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    flops.add(a.size)
    return a + b


def add_backward(grad: np.ndarray):
    return grad, grad


def scale(a: np.ndarray, c: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    flops.add(a.size)
    return a * c


def scale_backward(grad: np.ndarray, a: np.ndarray, c: float):
    return grad * c, float(np.sum(grad * a))
