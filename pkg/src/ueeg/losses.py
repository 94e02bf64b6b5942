"""Cross-entropy losses on the tape."""
from __future__ import annotations

import numpy as np

from .errors import LabelOutOfRange, ShapeMismatch
from .tensor import Tensor, as_tensor, clip, log, log_softmax, mul, neg, reduce

BCE_CLAMP = 1e-7


def one_hot(labels, k: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeMismatch(f"labels must be 1-D, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    out = np.zeros((labels.size, k), dtype=dtype)
    out[np.arange(labels.size), labels.astype(np.intp)] = 1
    return out


def categorical_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``.

    ``labels`` is either one-hot (B, K) or integer class ids (B,).
    """
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be (B, K), got {logits.shape}")
    B, K = logits.shape
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if y.ndim == 1:
        y = one_hot(y, K, logits.dtype)
    if y.shape != (B, K):
        raise ShapeMismatch(f"labels {y.shape} do not match logits {logits.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise LabelOutOfRange("each row of a one-hot label must hold exactly one 1")
    picked = reduce("sum", mul(log_softmax(logits, axis=1), Tensor(y, dtype=logits.dtype)), axis=1)
    return neg(reduce("mean", picked))


def binary_cross_entropy(pred: Tensor, target) -> Tensor:
    """Elementwise ``-[t ln p + (1-t) ln(1-p)]`` averaged over every element.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]`` first; clamped elements
    pass no gradient.
    """
    t = as_tensor(target, like=pred)
    if t.shape != pred.shape:
        raise ShapeMismatch(f"target {t.shape} does not match prediction {pred.shape}")
    p = clip(pred, BCE_CLAMP, 1 - BCE_CLAMP)
    ll = mul(t, log(p)) + mul(1 - t, log(1 - p))
    return neg(reduce("mean", ll))
