"""Linear identity classifier and the cross-entropy losses built on it.

The rendered 16-channel identity features are decoded per pixel by one
shared linear layer into 256 class logits. ``cross_entropy_hard`` scores
predictions against integer masks, ``cross_entropy_soft`` scores two
predictions against each other (used when both branches are renders).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .core import IDENTITY_DIM, InputError

NUM_CLASSES = 256


class ClassifierShapeError(InputError):
    pass


@dataclass(frozen=True)
class Classifier:
    """Shared linear decoder from identity features to class logits."""

    weights: np.ndarray  # (256, 16)
    bias: np.ndarray     # (256,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.shape != (NUM_CLASSES, IDENTITY_DIM):
            raise ClassifierShapeError(f"weights must be {(NUM_CLASSES, IDENTITY_DIM)}, got {w.shape}")
        if b.shape != (NUM_CLASSES,):
            raise ClassifierShapeError(f"bias must be {(NUM_CLASSES,)}, got {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ClassifierShapeError("classifier parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @staticmethod
    def initialize(seed: int = 0, scale: float = 0.01) -> "Classifier":
        rng = np.random.default_rng(seed)
        return Classifier(rng.normal(0.0, scale, (NUM_CLASSES, IDENTITY_DIM)), np.zeros(NUM_CLASSES))


@dataclass
class ClassifierGradients:
    weights: np.ndarray
    bias: np.ndarray

    @staticmethod
    def zeros() -> "ClassifierGradients":
        return ClassifierGradients(np.zeros((NUM_CLASSES, IDENTITY_DIM)), np.zeros(NUM_CLASSES))

    def add_(self, other: "ClassifierGradients", scale: float = 1.0) -> "ClassifierGradients":
        self.weights += scale * other.weights
        self.bias += scale * other.bias
        return self


def classify(feature_image: np.ndarray, clf: Classifier) -> np.ndarray:
    """Per-pixel logits W f + b; (H, W, 16) -> (H, W, 256).

    Runs in the dtype of the feature image (single precision is plenty for
    the training path and roughly twice as fast).
    """
    feature_image = np.asarray(feature_image)
    if feature_image.shape[-1] != IDENTITY_DIM:
        raise InputError(f"feature image must have {IDENTITY_DIM} channels")
    w = clf.weights.astype(feature_image.dtype, copy=False)
    b = clf.bias.astype(feature_image.dtype, copy=False)
    return feature_image @ w.T + b


def classify_backward(feature_image: np.ndarray, clf: Classifier,
                      grad_logits: np.ndarray) -> Tuple[np.ndarray, ClassifierGradients]:
    """Adjoint of classify: gradients for the feature image and the classifier."""
    feature_image = np.asarray(feature_image)
    flat_f = feature_image.reshape(-1, IDENTITY_DIM)
    flat_g = np.asarray(grad_logits).reshape(-1, NUM_CLASSES)
    w = clf.weights.astype(flat_g.dtype, copy=False)
    grad_feature = (flat_g @ w).reshape(feature_image.shape)
    return grad_feature, ClassifierGradients(weights=(flat_g.T @ flat_f).astype(np.float64),
                                             bias=flat_g.sum(axis=0, dtype=np.float64))


def _softmax_parts(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(log_softmax, softmax) in the dtype of the input, one exp pass."""
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=-1, keepdims=True)
    return logits - m - np.log(s), e / s


def softmax(logits: np.ndarray) -> np.ndarray:
    return _softmax_parts(np.asarray(logits))[1]


def cross_entropy_hard(logits: np.ndarray, target: np.ndarray,
                       valid_mask: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """Mean NLL of integer targets over valid pixels, with gradient w.r.t. logits.

    An empty valid set yields loss 0 and a zero gradient. Computation stays
    in the dtype of ``logits``.
    """
    logits = np.asarray(logits)
    target = np.asarray(target)
    if logits.shape[:-1] != target.shape:
        raise InputError(f"target shape {target.shape} does not match logits {logits.shape[:-1]}")
    if target.size and (target.min() < 0 or target.max() >= logits.shape[-1]):
        raise InputError("target ids must lie in [0, num_classes)")
    if valid_mask is None:
        valid_mask = np.ones(target.shape, dtype=bool)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    n_valid = int(valid_mask.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(logits)

    # one exp pass; the full log-softmax volume is never materialized
    m = logits.max(axis=-1)
    grad = np.exp(logits - m[..., None])
    s = grad.sum(axis=-1)
    grad /= s[..., None]
    onehot_idx = target[..., None].astype(np.int64)
    picked = np.take_along_axis(logits, onehot_idx, axis=-1)[..., 0]
    log_p_target = picked - m - np.log(s)
    loss = float(-(log_p_target * valid_mask).sum() / n_valid)

    np.put_along_axis(grad, onehot_idx, np.take_along_axis(grad, onehot_idx, axis=-1) - 1.0, axis=-1)
    grad *= valid_mask[..., None].astype(grad.dtype) / n_valid
    return loss, grad


def cross_entropy_soft(logits_a: np.ndarray, logits_b: np.ndarray,
                       symmetric: bool = True,
                       temperature: float = 1.0) -> Tuple[float, np.ndarray, np.ndarray]:
    """Cross-entropy between two predicted distributions, averaged over pixels.

    Symmetric form 0.5 [H(softmax(a), b) + H(softmax(b), a)] by default so
    neither branch is privileged as the target; ``symmetric=False`` keeps
    only H(softmax(a), b) (a provides the target distribution). Gradients
    flow to both arguments either way. ``temperature`` > 1 softens both
    distributions (logits are scaled by 1/T before the softmax); gradients
    are exact for any temperature.
    """
    logits_a = np.asarray(logits_a)
    logits_b = np.asarray(logits_b)
    if logits_a.shape != logits_b.shape:
        raise InputError("logit volumes must have matching shapes")
    if temperature <= 0:
        raise InputError("temperature must be positive")
    n = int(np.prod(logits_a.shape[:-1])) or 1
    inv_t = 1.0 / temperature

    lp_a, p_a = _softmax_parts(logits_a * inv_t)
    lp_b, p_b = _softmax_parts(logits_b * inv_t)

    # H(p_a, b): d/da_i = -p_a_i (lp_b_i - <p_a, lp_b>) / T;  d/db_i = (p_b_i - p_a_i) / T
    inner_ab = np.einsum("...k,...k->...", p_a, lp_b)[..., None]
    loss_ab = float(-inner_ab.sum() / n)
    g_a = -p_a * (lp_b - inner_ab) * inv_t
    g_b = (p_b - p_a) * inv_t
    if not symmetric:
        return loss_ab, g_a / n, g_b / n

    inner_ba = np.einsum("...k,...k->...", p_b, lp_a)[..., None]
    loss_ba = float(-inner_ba.sum() / n)
    g_b2 = -p_b * (lp_a - inner_ba) * inv_t
    g_a2 = (p_a - p_b) * inv_t
    return (0.5 * (loss_ab + loss_ba),
            0.5 * (g_a + g_a2) / n,
            0.5 * (g_b + g_b2) / n)
