"""Retrieval distributions, rank metrics, and normalization diagnostics.

Rank ties are broken by ascending item index so every metric is
deterministic; the median of an even number of ranks is the lower of the
two middle values. Temperatures are always recorded alongside
normalization errors because the errors depend on them.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .embeddings import SimilarityMatrix, _frozen
from .errors import MissingGroundTruth
from .sinkhorn import MarginalPrior

DEFAULT_GAMMA = 0.05
DEFAULT_KS = (1, 5, 10)


class Direction(enum.Enum):
    """Which axis of the similarity matrix acts as the query axis."""

    T2V = "t2v"  # rows are queries
    V2T = "v2t"  # columns are queries (computed on the transpose)


@dataclass(frozen=True)
class RetrievalDistribution:
    """Row-stochastic retrieval probabilities: rows are queries."""

    probs: np.ndarray
    direction: Direction
    gamma: float

    def __post_init__(self):
        p = _frozen(self.probs)
        if (p < 0).any() or (p > 1).any():
            raise ValueError("probabilities must lie in [0, 1]")
        if np.abs(p.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("each row must sum to 1 within 1e-9")
        object.__setattr__(self, "probs", p)

    @property
    def n_queries(self) -> int:
        return self.probs.shape[0]

    @property
    def n_items(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class GroundTruth:
    """For each query index, the nonempty set of correct item indices."""

    pairs: tuple[tuple[int, ...], ...]
    n_items: int

    def __post_init__(self):
        cleaned = []
        for q, items in enumerate(self.pairs):
            items = tuple(sorted(int(j) for j in items))
            if not items:
                raise MissingGroundTruth(f"query {q} has no ground-truth items")
            if items[0] < 0 or items[-1] >= self.n_items:
                raise ValueError(f"query {q} references an out-of-range item")
            cleaned.append(items)
        object.__setattr__(self, "pairs", tuple(cleaned))

    @property
    def n_queries(self) -> int:
        return len(self.pairs)

    @classmethod
    def diagonal(cls, n: int) -> "GroundTruth":
        return cls(tuple((i,) for i in range(n)), n_items=n)

    def inverted(self) -> "GroundTruth":
        """Swap query and item roles; every item must be matched at least once."""
        back: list[list[int]] = [[] for _ in range(self.n_items)]
        for q, items in enumerate(self.pairs):
            for j in items:
                back[j].append(q)
        return GroundTruth(tuple(tuple(qs) for qs in back), n_items=self.n_queries)


@dataclass(frozen=True)
class MetricsReport:
    """Recall@K, median/mean rank, and directional normalization errors.

    ``t2v_norm_error`` refers to the row-query direction of the matrix the
    report was computed from; ``v2t_norm_error`` to its transpose.
    """

    recall_at: dict[int, float]
    median_rank: float
    mean_rank: float
    t2v_norm_error: float
    v2t_norm_error: float
    gamma: float

    def to_csv(self) -> str:
        """One header row, one value row."""
        buf = io.StringIO()
        ks = list(self.recall_at)
        header = [f"r{k}" for k in ks] + [
            "median_rank",
            "mean_rank",
            "t2v_norm_error",
            "v2t_norm_error",
            "gamma",
        ]
        values = [self.recall_at[k] for k in ks] + [
            self.median_rank,
            self.mean_rank,
            self.t2v_norm_error,
            self.v2t_norm_error,
            self.gamma,
        ]
        buf.write(",".join(header) + "\n")
        buf.write(",".join(repr(float(v)) for v in values) + "\n")
        return buf.getvalue()


@dataclass(frozen=True)
class FalseRateProfile:
    """False negative/positive rates of items binned by summed retrieval probability."""

    bin_edges: np.ndarray
    counts: np.ndarray
    false_negative_rate: np.ndarray
    false_positive_rate: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bin_edges", _frozen(self.bin_edges))
        counts = np.asarray(self.counts, dtype=np.int64).copy()
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "false_negative_rate", _frozen(self.false_negative_rate))
        object.__setattr__(self, "false_positive_rate", _frozen(self.false_positive_rate))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bin_lo,bin_hi,count,fnr,fpr\n")
        for b in range(len(self.counts)):
            buf.write(
                f"{float(self.bin_edges[b])!r},{float(self.bin_edges[b + 1])!r},{int(self.counts[b])},"
                f"{float(self.false_negative_rate[b])!r},{float(self.false_positive_rate[b])!r}\n"
            )
        return buf.getvalue()


def retrieval_distribution(
    sims: SimilarityMatrix, gamma: float, direction: Direction = Direction.T2V
) -> RetrievalDistribution:
    """Row-wise softmax of ``S / gamma``; V2T is computed on the transpose."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma!r}")
    values = sims.values if direction is Direction.T2V else sims.values.T
    probs = np.exp(log_softmax(values / gamma, axis=1))
    return RetrievalDistribution(probs, direction=direction, gamma=gamma)


def normalization_error(dist: RetrievalDistribution, item_prior: np.ndarray | None = None) -> float:
    """Mean absolute deviation of each item's summed probability from its target.

    With one query per item (square case) the target is 1 for every item;
    otherwise pass the item-side marginal prior and the target becomes
    ``n_queries * item_prior[j]``.
    """
    m, n = dist.probs.shape
    if item_prior is None:
        if m != n:
            raise ValueError(
                f"{m} queries vs {n} items: pass item_prior to set per-item target masses"
            )
        target = np.ones(n)
    else:
        item_prior = np.asarray(item_prior, dtype=np.float64).ravel()
        if item_prior.size != n:
            raise ValueError(f"item_prior has {item_prior.size} entries for {n} items")
        target = m * item_prior
    return float(np.abs(target - dist.probs.sum(axis=0)).mean())


def rank_matrix(sims: SimilarityMatrix, gt: GroundTruth) -> np.ndarray:
    """1-based rank of each query's best ground-truth item.

    The rank is the position of the highest-scoring correct item when all
    items are sorted by descending score, ties broken by ascending index.
    """
    m, n = sims.shape
    if gt.n_queries != m:
        raise MissingGroundTruth(f"ground truth covers {gt.n_queries} queries, matrix has {m}")
    if gt.n_items != n:
        raise MissingGroundTruth(f"ground truth indexes {gt.n_items} items, matrix has {n}")
    order = np.argsort(-sims.values, axis=1, kind="stable")
    ranks_by_item = np.empty((m, n), dtype=np.int64)
    rows = np.arange(m)[:, None]
    ranks_by_item[rows, order] = np.arange(1, n + 1)[None, :]
    return np.array([min(ranks_by_item[q, list(items)]) for q, items in enumerate(gt.pairs)])


def compute_metrics(
    sims: SimilarityMatrix,
    gt: GroundTruth,
    gamma: float = DEFAULT_GAMMA,
    ks=DEFAULT_KS,
    prior: MarginalPrior | None = None,
) -> MetricsReport:
    """Rank metrics for the row-query direction plus both normalization errors."""
    ranks = rank_matrix(sims, gt)
    recall_at = {int(k): float(np.mean(ranks <= k)) for k in ks}
    median = float(np.sort(ranks)[(len(ranks) - 1) // 2])  # lower middle on even counts
    mean = float(ranks.mean())
    m, n = sims.shape
    if prior is None:
        prior = MarginalPrior.uniform(m, n)
    t2v = retrieval_distribution(sims, gamma, Direction.T2V)
    v2t = retrieval_distribution(sims, gamma, Direction.V2T)
    return MetricsReport(
        recall_at=recall_at,
        median_rank=median,
        mean_rank=mean,
        t2v_norm_error=normalization_error(t2v, item_prior=prior.col_marginals),
        v2t_norm_error=normalization_error(v2t, item_prior=prior.row_marginals),
        gamma=gamma,
    )


def false_rate_profile(dist: RetrievalDistribution, gt: GroundTruth, bins: int = 10) -> FalseRateProfile:
    """Bin items by summed retrieval probability; rate top-1 mistakes per bin.

    Per bin: the false-negative rate is the fraction of its items never
    top-1-retrieved by any of their true queries; the false-positive rate is
    the fraction of (query, item) pairs in the bin where the item is a
    wrong top-1.
    """
    if isinstance(bins, (int, np.integer)):
        if bins < 2:
            raise ValueError("bins must be >= 2")
        n_bins = int(bins)
        edges = None
    else:
        edges = np.asarray(bins, dtype=np.float64)
        if edges.size < 3 or (np.diff(edges) <= 0).any():
            raise ValueError("explicit bin edges must be increasing with >= 2 bins")
        n_bins = edges.size - 1

    m, n = dist.probs.shape
    if gt.n_queries != m or gt.n_items != n:
        raise MissingGroundTruth(
            f"ground truth shape ({gt.n_queries}, {gt.n_items}) does not match ({m}, {n})"
        )
    sums = dist.probs.sum(axis=0)
    if edges is None:
        edges = np.linspace(sums.min(), sums.max(), n_bins + 1)
    bin_of = np.clip(np.searchsorted(edges, sums, side="right") - 1, 0, n_bins - 1)

    top1 = np.argmax(dist.probs, axis=1)  # first occurrence == lowest index on ties
    true_queries: list[list[int]] = [[] for _ in range(n)]
    for q, items in enumerate(gt.pairs):
        for j in items:
            true_queries[j].append(q)
    is_fn = np.zeros(n, dtype=bool)
    has_query = np.zeros(n, dtype=bool)
    for j, qs in enumerate(true_queries):
        if qs:
            has_query[j] = True
            is_fn[j] = not any(top1[q] == j for q in qs)
    fp_hits = np.zeros(n, dtype=np.int64)
    for q in range(m):
        j = int(top1[q])
        if j not in gt.pairs[q]:
            fp_hits[j] += 1

    counts = np.bincount(bin_of, minlength=n_bins)
    fnr = np.zeros(n_bins)
    fpr = np.zeros(n_bins)
    for b in range(n_bins):
        members = bin_of == b
        with_query = int((members & has_query).sum())
        if with_query:
            fnr[b] = float((members & is_fn).sum()) / with_query
        if counts[b]:
            fpr[b] = float(fp_hits[members].sum()) / (m * counts[b])
    return FalseRateProfile(
        bin_edges=edges, counts=counts, false_negative_rate=fnr, false_positive_rate=fpr
    )
