"""Symmetric contrastive losses, their analytic gradients, and gradient checks.

The normalized variant computes batch biases with Sinkhorn scaling, adds
them to the similarity scores, and evaluates the same symmetric
cross-entropy. Biases are treated as constants during differentiation
(stop-gradient): the fixed point itself is not differentiated through.

Gradients are plain ambient-space derivatives with respect to the (unit)
embedding rows; keeping iterates on the sphere is the optimizer's job.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import log_softmax

from .embeddings import EmbeddingSet, SimilarityMatrix, _frozen, cosine_similarity_matrix
from .errors import BatchTooSmall, DimensionMismatch, NonFinite
from .evaluation import Direction, RetrievalDistribution
from .sinkhorn import BiasVectors, MarginalPrior, SinkhornOptions, adjust_similarity, compute_biases


@dataclass(frozen=True)
class LossValue:
    """Total loss and its two directional halves: total == (t2v + v2t) / 2."""

    total: float
    t2v: float
    v2t: float

    def __post_init__(self):
        if abs(self.total - (self.t2v + self.v2t) / 2.0) > 1e-12:
            raise ValueError("total must equal the mean of the directional losses")


@dataclass(frozen=True)
class GradientSet:
    """Loss gradients w.r.t. every text and video embedding component."""

    d_text: np.ndarray
    d_video: np.ndarray

    def __post_init__(self):
        d_text = _frozen(self.d_text)
        d_video = _frozen(self.d_video)
        if not (np.isfinite(d_text).all() and np.isfinite(d_video).all()):
            raise NonFinite("gradients contain non-finite entries")
        object.__setattr__(self, "d_text", d_text)
        object.__setattr__(self, "d_video", d_video)


def _check_batch(texts: EmbeddingSet, videos: EmbeddingSet) -> int:
    if texts.n != videos.n:
        raise DimensionMismatch(f"batch sizes differ: {texts.n} texts vs {videos.n} videos")
    if texts.dim != videos.dim:
        raise DimensionMismatch(f"embedding dims differ: {texts.dim} vs {videos.dim}")
    if texts.n < 2:
        raise BatchTooSmall(f"contrastive batches need >= 2 pairs, got {texts.n}")
    return texts.n


def _loss_and_grad(scores: np.ndarray, texts: EmbeddingSet, videos: EmbeddingSet, gamma: float):
    """Symmetric cross-entropy on a score matrix whose (i, i) entries are positives.

    Only the inner-product part of the scores depends on the embeddings, so
    the chain rule through any additive constants (biases) is the identity.
    """
    b = scores.shape[0]
    logits = scores / gamma
    log_p = log_softmax(logits, axis=1)
    log_q = log_softmax(logits, axis=0)
    diag = np.arange(b)
    l_t2v = float(-log_p[diag, diag].mean())
    l_v2t = float(-log_q[diag, diag].mean())
    loss = LossValue(total=(l_t2v + l_v2t) / 2.0, t2v=l_t2v, v2t=l_v2t)
    d_scores = np.exp(log_p) + np.exp(log_q)
    d_scores[diag, diag] -= 2.0
    d_scores /= 2.0 * b * gamma
    grads = GradientSet(d_text=d_scores @ videos.vectors, d_video=d_scores.T @ texts.vectors)
    return loss, grads


def contrastive_loss(
    texts: EmbeddingSet, videos: EmbeddingSet, gamma: float
) -> tuple[LossValue, GradientSet]:
    """Mean of text-to-video and video-to-text cross-entropy with diagonal targets."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma!r}")
    _check_batch(texts, videos)
    scores = cosine_similarity_matrix(texts, videos).values
    return _loss_and_grad(scores, texts, videos, gamma)


def ncl_loss(
    texts: EmbeddingSet,
    videos: EmbeddingSet,
    gamma: float,
    opts: SinkhornOptions = SinkhornOptions(),
    prior: MarginalPrior | None = None,
) -> tuple[LossValue, GradientSet, BiasVectors]:
    """Contrastive loss on bias-adjusted scores; biases are recomputed per batch.

    The returned gradients treat the biases as constants evaluated at the
    current embeddings.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma!r}")
    _check_batch(texts, videos)
    sims = cosine_similarity_matrix(texts, videos)
    biases = compute_biases(sims, gamma, prior=prior, opts=opts)
    adjusted = adjust_similarity(sims, biases)
    loss, grads = _loss_and_grad(adjusted.values, texts, videos, gamma)
    return loss, grads, biases


def bias_gradient(dist: RetrievalDistribution) -> np.ndarray:
    """Derivative of the symmetric loss w.r.t. an additive per-item bias.

    For a square text-to-video distribution over B pairs the j-th component
    is ``-(1 - sum_i P[i][j]) / (2B)``: items whose summed retrieval
    probability exceeds 1 get pushed down, under-represented items up.
    """
    if dist.direction is not Direction.T2V:
        raise ValueError("bias_gradient expects a T2V distribution")
    b, n = dist.probs.shape
    if b != n:
        raise DimensionMismatch(f"expected a square batch distribution, got {dist.probs.shape}")
    return -(1.0 - dist.probs.sum(axis=0)) / (2.0 * b)


def finite_difference_check(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``objective(x)`` must return ``(value, gradient)`` with the gradient
    shaped like ``x``. The relative error of coordinate k is
    ``|numeric_k - analytic_k| / (|analytic_k| + 1e-8)``.
    """
    params = np.asarray(params, dtype=np.float64)
    _, analytic = objective(params)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != params.shape:
        raise DimensionMismatch(f"gradient shape {analytic.shape} != params shape {params.shape}")
    worst = 0.0
    flat = params.ravel()
    for k in range(flat.size):
        bumped = flat.copy()
        bumped[k] += eps
        up, _ = objective(bumped.reshape(params.shape))
        bumped[k] -= 2 * eps
        down, _ = objective(bumped.reshape(params.shape))
        numeric = (up - down) / (2.0 * eps)
        rel = abs(numeric - analytic.ravel()[k]) / (abs(analytic.ravel()[k]) + 1e-8)
        worst = max(worst, rel)
    return worst
