"""Modal-mean decomposition of cross-modal similarities.

Splitting each embedding into its modality mean plus a displacement
rewrites every inner product as four terms; the per-column term acts as an
implicit item bias that turns the retrieval softmax into a weighted
softmax. These identities hold for any embedding sets, clustered or not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from .embeddings import EmbeddingSet, _frozen


@dataclass(frozen=True)
class ModalMeans:
    """Arithmetic mean vector of each modality; generally not unit-norm."""

    text_mean: np.ndarray
    video_mean: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "text_mean", _frozen(self.text_mean))
        object.__setattr__(self, "video_mean", _frozen(self.video_mean))


@dataclass(frozen=True)
class Displacements:
    """Embeddings minus their modal mean; each column averages to zero."""

    text_offsets: np.ndarray
    video_offsets: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "text_offsets", _frozen(self.text_offsets))
        object.__setattr__(self, "video_offsets", _frozen(self.video_offsets))


@dataclass(frozen=True)
class SimilarityTerms:
    """The four addends of every cross-modal inner product, broadcast to (m, n).

    ``mean_mean`` is constant, ``text_offset_term`` varies per row (an
    implicit query bias), ``video_offset_term`` per column (an implicit item
    bias), and ``offset_offset`` is the alignment of the displacements.
    Their sum reproduces the raw similarity exactly.
    """

    mean_mean: np.ndarray
    text_offset_term: np.ndarray
    video_offset_term: np.ndarray
    offset_offset: np.ndarray

    def total(self) -> np.ndarray:
        return self.mean_mean + self.text_offset_term + self.video_offset_term + self.offset_offset


def modal_decompose(texts: EmbeddingSet, videos: EmbeddingSet) -> tuple[ModalMeans, Displacements]:
    """Per-modality means and the zero-mean displacements around them."""
    mu_text = texts.vectors.mean(axis=0)
    mu_video = videos.vectors.mean(axis=0)
    return (
        ModalMeans(text_mean=mu_text, video_mean=mu_video),
        Displacements(
            text_offsets=texts.vectors - mu_text,
            video_offsets=videos.vectors - mu_video,
        ),
    )


def similarity_decomposition(texts: EmbeddingSet, videos: EmbeddingSet) -> SimilarityTerms:
    """Split every inner product into mean/mean, mean/offset, and offset/offset terms."""
    means, offs = modal_decompose(texts, videos)
    m, n = texts.n, videos.n
    const = float(means.text_mean @ means.video_mean)
    row_term = offs.text_offsets @ means.video_mean  # (m,)
    col_term = offs.video_offsets @ means.text_mean  # (n,)
    return SimilarityTerms(
        mean_mean=np.full((m, n), const),
        text_offset_term=np.broadcast_to(row_term[:, None], (m, n)).copy(),
        video_offset_term=np.broadcast_to(col_term[None, :], (m, n)).copy(),
        offset_offset=offs.text_offsets @ offs.video_offsets.T,
    )


def weighted_softmax_check(texts: EmbeddingSet, videos: EmbeddingSet, gamma: float) -> float:
    """Max deviation between the direct softmax and its weighted-softmax form.

    The weighted form drops the constant and per-row terms (they cancel in a
    row softmax) and folds the per-column term into item weights
    ``exp(<mu_text, v_offset_j> / gamma)``. Algebraically identical; the
    returned deviation is pure floating-point error.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma!r}")
    terms = similarity_decomposition(texts, videos)
    direct = np.exp(log_softmax((texts.vectors @ videos.vectors.T) / gamma, axis=1))
    weighted_logits = (terms.video_offset_term + terms.offset_offset) / gamma
    weighted = np.exp(log_softmax(weighted_logits, axis=1))
    return float(np.abs(direct - weighted).max())


def modality_similarity_stats(texts: EmbeddingSet, videos: EmbeddingSet) -> dict[str, float]:
    """Mean off-diagonal within-modality and mean cross-modality similarities."""

    def off_diagonal_mean(vectors: np.ndarray) -> float:
        k = vectors.shape[0]
        if k < 2:
            return float("nan")
        gram = vectors @ vectors.T
        return float((gram.sum() - np.trace(gram)) / (k * (k - 1)))

    return {
        "text_text": off_diagonal_mean(texts.vectors),
        "video_video": off_diagonal_mean(videos.vectors),
        "text_video": float((texts.vectors @ videos.vectors.T).mean()),
    }
