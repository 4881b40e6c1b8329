"""Channel-correlation objective and its building blocks.

A mini-batch contributes two terms: softmax cross-entropy on the
attention-gated logits, and a penalty on the pairwise squared Euclidean
distances between the per-sample channel-attention vectors. Distances
between same-label pairs (`intra`) should shrink, distances between
different-label pairs (`inter`) should grow, so the composite objective is

    total = ce + lam * intra / (inter + eps)

with gradient flowing through both the numerator and the denominator.

All distances are SQUARED Euclidean: the penalty sums (c_i - c_j)^2 with
no square root. That is what makes the Gram identity

    dist(i, j) = |c_i|^2 + |c_j|^2 - 2 <c_i, c_j>

exact, which the batched kernel exploits: with s the vector of row square
sums and G = C C^T, the full matrix is s[i] + s[j] - 2 G[i, j].

Everything here is a pure function of its inputs; calls on distinct
batches are safe to run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, apply_op, matmul, reduce_sum, square, transpose


class LabelError(ValueError):
    """A label is outside [0, class_count) or label count mismatches the batch."""


def _check_labels(labels: np.ndarray, n: int, k: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and labels.min() < 0:
        raise LabelError("negative label")
    if k is not None and labels.size and labels.max() >= k:
        raise LabelError(f"label {int(labels.max())} out of range for {k} classes")
    return labels.astype(np.int64)


def softmax_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Computed through log-sum-exp with max subtraction, so saturated logits
    stay finite. Backward is the usual (softmax - onehot) / N.
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_probs = shifted - lse
    ce = -log_probs[np.arange(n), labels].mean()

    def backward_fn(g, logits=logits, labels=labels, log_probs=log_probs, n=n):
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return apply_op(np.asarray(ce, dtype=logits.dtype), (logits,), backward_fn, "softmax_ce")


def pairwise_sq_dist_naive(c) -> np.ndarray:
    """Squared-distance matrix by the direct definition: a double loop over rows.

    O(N^2 D) scalar work. Accumulates in float64 and returns the input
    dtype; serves as the oracle for the batched kernel.
    """
    arr = c.data if isinstance(c, Tensor) else np.asarray(c)
    if arr.ndim != 2:
        raise ValueError(f"expected N x D matrix, got {arr.shape}")
    n = arr.shape[0]
    wide = arr.astype(np.float64, copy=False)
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            diff = wide[i] - wide[j]
            out[i, j] = np.dot(diff, diff)
    return out.astype(arr.dtype, copy=False)


def pairwise_sq_dist_gram(c) -> np.ndarray:
    """Squared-distance matrix via row square sums and the Gram matrix C C^T.

    Three matrix operations replace the per-pair loop. Cancellation can
    leave tiny negatives, which are clamped to zero; accumulates in
    float64 and returns the input dtype.
    """
    arr = c.data if isinstance(c, Tensor) else np.asarray(c)
    if arr.ndim != 2:
        raise ValueError(f"expected N x D matrix, got {arr.shape}")
    wide = arr.astype(np.float64, copy=False)
    s = np.einsum("ij,ij->i", wide, wide)
    g = wide @ wide.T
    dist = s[:, None] + s[None, :] - 2.0 * g
    np.maximum(dist, 0.0, out=dist)
    return dist.astype(arr.dtype, copy=False)


def _clamp_nonneg(t: Tensor) -> Tensor:
    # Not relu: the input is a squared distance, mathematically >= 0 with
    # zero gradient wherever it touches 0, so the clamp only strips
    # float-cancellation noise and must not register as a kink.
    def backward_fn(g, t=t):
        return (np.where(t.data > 0, g, 0.0).astype(t.dtype),)

    return apply_op(np.maximum(t.data, 0.0).astype(t.dtype), (t,), backward_fn, "clamp_nonneg")


def attention_distances(c: Tensor) -> Tensor:
    """Differentiable N x N squared-distance matrix of attention rows.

    Same Gram-identity route as `pairwise_sq_dist_gram`, expressed in taped
    ops so the loss gradient reaches the attention module: the row square
    sums are replicated into a matrix through products with all-ones
    vectors, and cancellation negatives are clamped to zero.
    """
    if c.ndim != 2:
        raise ValueError(f"expected N x D tensor, got {c.shape}")
    n = c.shape[0]
    ones_row = Tensor(np.ones((1, n), dtype=c.dtype))
    s = reduce_sum(square(c), axis=1).reshape((n, 1))
    e = matmul(s, ones_row)
    g = matmul(c, transpose(c))
    return _clamp_nonneg(e + transpose(e) - 2.0 * g)


def pair_masks(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Strict-upper-triangle indicator masks: (same-label, different-label).

    The diagonal never enters either mask; self-distance is zero, and each
    unordered pair is counted once.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    same = labels[:, None] == labels[None, :]
    return upper & same, upper & ~same


def intra_inter(dist: Tensor, labels: np.ndarray) -> tuple[Tensor, Tensor]:
    """Sum the distance matrix over same-label and different-label pairs."""
    n = dist.shape[0]
    labels = _check_labels(labels, n)
    mask_intra, mask_inter = pair_masks(labels)
    intra = reduce_sum(dist * Tensor(mask_intra.astype(dist.dtype)))
    inter = reduce_sum(dist * Tensor(mask_inter.astype(dist.dtype)))
    return intra, inter


def pair_stats(dist: np.ndarray, labels: np.ndarray) -> tuple[float, float, int, int]:
    """(intra sum, inter sum, intra pair count, inter pair count) of a plain matrix."""
    mask_intra, mask_inter = pair_masks(np.asarray(labels))
    return (
        float(dist[mask_intra].sum()),
        float(dist[mask_inter].sum()),
        int(mask_intra.sum()),
        int(mask_inter.sum()),
    )


@dataclass
class LossBreakdown:
    """Composite loss with its pieces, each still attached to the graph."""

    total: Tensor
    ce: Tensor
    intra: Tensor
    inter: Tensor
    ratio: Tensor

    def scalars(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "ce": self.ce.item(),
            "intra": self.intra.item(),
            "inter": self.inter.item(),
            "ratio": self.ratio.item(),
        }


def cc_loss(
    logits: Tensor,
    attention: Tensor,
    labels: np.ndarray,
    lam: float = 1.0,
    eps: float = 1e-6,
) -> LossBreakdown:
    """Channel-correlation loss: ce + lam * intra / (inter + eps).

    `attention` is the N x D matrix of per-sample attention vectors from
    the same forward pass as `logits`; the penalty gradient flows back into
    it (and through both sides of the ratio). With lam == 0 the total is
    exactly the cross-entropy tensor, so such a run is indistinguishable
    from plain CE training.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if logits.shape[0] != attention.shape[0]:
        raise ValueError("logits and attention disagree on batch size")
    ce = softmax_ce(logits, labels)
    dist = attention_distances(attention)
    intra, inter = intra_inter(dist, labels)
    ratio = intra / (inter + eps)
    total = ce if lam == 0 else ce + lam * ratio
    return LossBreakdown(total=total, ce=ce, intra=intra, inter=inter, ratio=ratio)
