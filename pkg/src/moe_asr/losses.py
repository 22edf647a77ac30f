"""The six training loss terms and their gradients: CTC (used for both the
recognition loss and the embedding-network loss), the sparsity L1 penalty
on L2-unit-normalized router distributions, the mean importance penalty on
squared per-expert mean probabilities, softmax cross-entropy for the
accent/domain heads, and the weighted combination.

All functions are pure and return (value, gradient) pairs; the weighted
combination distributes the scales multiplicatively onto the gradients of
its parts, which callers apply themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import tensor
from .errors import (ConfigError, DegenerateDistributionError, DimensionError,
                     InfeasibleAlignmentError, LabelError, NumericError)


@dataclass
class LossWeights:
    """Scales for the auxiliary terms: total = l_c + alpha*l_s + beta*l_m
    + gamma*l_e + eta*l_a + theta*l_d."""

    alpha: float = 0.05
    beta: float = 0.05
    gamma: float = 0.01
    eta: float = 0.1
    theta: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "eta", "theta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")


@dataclass
class RouterBatch:
    """Router probabilities for all k frames of a batch at one layer,
    frame-major: probs[j, i] is frame j's probability on expert i."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise DimensionError(
                f"router batch must be k x n with k,n >= 1, got {p.shape}")
        if np.any(np.all(p == 0.0, axis=1)):
            raise DegenerateDistributionError(
                "router batch contains an all-zero row")
        sums = p.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-10):
            raise NumericError("router batch rows must each sum to 1")
        self.probs = p

    @property
    def k(self) -> int:
        return self.probs.shape[0]

    @property
    def n(self) -> int:
        return self.probs.shape[1]


@dataclass
class LossBreakdown:
    l_c: float
    l_s: float
    l_m: float
    l_e: float
    l_a: float
    l_d: float
    total: float

    FIELDS = ("l_c", "l_s", "l_m", "l_e", "l_a", "l_d", "total")


# ----------------------------------------------------------------------
# CTC

@njit(cache=True)
def _ctc_alpha_beta(lp_ext, can_skip):
    """Forward/backward recursions in log space over the blank-interleaved
    label sequence. lp_ext[t, s] is the log-prob of extended symbol s at
    time t; can_skip[s] marks states reachable by the skip transition."""
    t_len, s_len = lp_ext.shape
    neg = -np.inf
    alpha = np.full((t_len, s_len), neg)
    alpha[0, 0] = lp_ext[0, 0]
    if s_len > 1:
        alpha[0, 1] = lp_ext[0, 1]
    for t in range(1, t_len):
        for s in range(s_len):
            a = alpha[t - 1, s]
            if s >= 1:
                a = np.logaddexp(a, alpha[t - 1, s - 1])
            if can_skip[s]:
                a = np.logaddexp(a, alpha[t - 1, s - 2])
            alpha[t, s] = a + lp_ext[t, s]
    beta = np.full((t_len, s_len), neg)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        for s in range(s_len):
            b = beta[t + 1, s] + lp_ext[t + 1, s]
            if s + 1 < s_len:
                b = np.logaddexp(b, beta[t + 1, s + 1] + lp_ext[t + 1, s + 1])
            if s + 2 < s_len and can_skip[s + 2]:
                b = np.logaddexp(b, beta[t + 1, s + 2] + lp_ext[t + 1, s + 2])
            beta[t, s] = b
    return alpha, beta


@njit(cache=True)
def _ctc_scatter_grad(alpha, beta, loglik, ext, n_classes):
    t_len, s_len = alpha.shape
    grad = np.zeros((t_len, n_classes))
    for t in range(t_len):
        for s in range(s_len):
            g = alpha[t, s] + beta[t, s] - loglik
            if g > -745.0:          # exp underflows to 0 below this anyway
                grad[t, ext[s]] -= math.exp(g)
    return grad


def extended_labels(labels, blank: int) -> np.ndarray:
    """Blank-interleaved label sequence: [b, l1, b, l2, ..., b]."""
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def ctc_min_frames(labels) -> int:
    """Minimum T that admits an alignment: one frame per label plus a
    separating blank between adjacent repeats."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_loss(log_probs: np.ndarray, labels):
    """-log P(labels | log_probs) for the blank-augmented alignment model,
    with the blank as the last class. Returns (loss, d loss / d log_probs);
    the gradient is the negated state posterior (-gamma).

    `log_probs` rows need not be normalized; the recursion and its gradient
    are well-defined for any finite values."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.ndim != 2 or log_probs.shape[0] < 1:
        raise DimensionError(
            f"ctc_loss expects T x (V+1) with T >= 1, got {log_probs.shape}")
    t_len, n_classes = log_probs.shape
    vocab = n_classes - 1
    if vocab < 1:
        raise DimensionError("ctc_loss needs at least one non-blank class")
    labels = np.asarray(list(labels), dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= vocab):
        raise LabelError(
            f"labels must lie in [0, {vocab}), got {labels.tolist()}")
    need = ctc_min_frames(labels)
    if t_len < need:
        raise InfeasibleAlignmentError(
            f"{len(labels)} labels (min {need} frames) cannot align "
            f"within {t_len} frames")
    ext = extended_labels(labels, blank=vocab)
    s_len = ext.size
    can_skip = np.zeros(s_len, dtype=np.bool_)
    for s in range(2, s_len):
        can_skip[s] = ext[s] != vocab and ext[s] != ext[s - 2]
    lp_ext = np.ascontiguousarray(log_probs[:, ext])
    alpha, beta = _ctc_alpha_beta(lp_ext, can_skip)
    if s_len > 1:
        loglik = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        loglik = alpha[-1, -1]
    grad = _ctc_scatter_grad(alpha, beta, float(loglik), ext, n_classes)
    return float(-loglik), grad


# ----------------------------------------------------------------------
# router auxiliary losses

def sparsity_loss(batch: RouterBatch):
    """Mean L1 norm of the L2-unit-normalized per-frame router
    distributions: 1.0 for one-hot rows, sqrt(n) for uniform rows."""
    p = batch.probs
    k = batch.k
    norms = np.sqrt(np.sum(p * p, axis=1))
    if np.any(norms == 0.0):
        raise DegenerateDistributionError(
            "router batch contains an all-zero row")
    l1 = np.sum(np.abs(p), axis=1)
    value = float(np.mean(l1 / norms))
    grad = (np.sign(p) / norms[:, None]
            - (l1 / norms ** 3)[:, None] * p) / k
    return value, grad


def mean_importance_loss(batch: RouterBatch):
    """n * sum_i (mean_j p_ij)^2: 1.0 when the per-expert means are
    uniform, n when all mass sits on one expert."""
    p = batch.probs
    k, n = p.shape
    means = p.mean(axis=0)
    value = float(n * np.sum(means ** 2))
    grad = np.tile(2.0 * n * means / k, (k, 1))
    return value, grad


# ----------------------------------------------------------------------
# classification + combination

def cross_entropy(logits: np.ndarray, target: int):
    """-log softmax(logits)[target]. Returns (loss, d loss / d logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise DimensionError(f"cross_entropy expects a vector, got "
                             f"{logits.shape}")
    if not 0 <= target < logits.shape[0]:
        raise LabelError(
            f"target {target} outside [0, {logits.shape[0]})")
    ls = tensor.log_softmax(logits)
    grad = np.exp(ls)
    grad[target] -= 1.0
    return float(-ls[target]), grad


def combine(l_c: float, l_s: float, l_m: float, l_e: float,
            l_a: float, l_d: float, w: LossWeights) -> LossBreakdown:
    """Weighted sum of the six parts. Setting eta = theta = 0 reproduces
    the baseline objective without accent/domain supervision."""
    parts = {"l_c": l_c, "l_s": l_s, "l_m": l_m, "l_e": l_e,
             "l_a": l_a, "l_d": l_d}
    for name, val in parts.items():
        if not math.isfinite(val):
            raise NumericError(f"loss term {name} is non-finite: {val}")
    total = (l_c + w.alpha * l_s + w.beta * l_m + w.gamma * l_e
             + w.eta * l_a + w.theta * l_d)
    return LossBreakdown(l_c, l_s, l_m, l_e, l_a, l_d, total)
