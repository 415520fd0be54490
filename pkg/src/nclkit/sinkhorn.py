"""Sinkhorn-Knopp matrix scaling and instance-bias derivation.

Alternating row/column rescaling drives a nonnegative matrix toward
prescribed marginals (a transportation polytope). From the scaling vectors
of ``exp(S / gamma)`` we derive additive per-query and per-item biases that
normalize both directional retrieval distributions of a similarity matrix.

The default computation runs in the log domain: at temperatures around
0.01-0.07 the entries of ``exp(S / gamma)`` span hundreds of orders of
magnitude and multiplicative updates overflow float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, logsumexp

from .embeddings import SimilarityMatrix, _frozen
from .errors import DegenerateMatrix, DimensionMismatch, NonFinite


@dataclass(frozen=True)
class MarginalPrior:
    """Strictly positive simplex weights for the row and column marginals."""

    row_marginals: np.ndarray
    col_marginals: np.ndarray

    def __post_init__(self):
        r = _frozen(np.asarray(self.row_marginals, dtype=np.float64).ravel())
        c = _frozen(np.asarray(self.col_marginals, dtype=np.float64).ravel())
        for name, v in (("row_marginals", r), ("col_marginals", c)):
            if v.size < 1 or not np.isfinite(v).all() or (v <= 0).any():
                raise ValueError(f"{name} must be strictly positive and finite")
            if abs(v.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must sum to 1 within 1e-9, got {v.sum()!r}")
        object.__setattr__(self, "row_marginals", r)
        object.__setattr__(self, "col_marginals", c)

    @property
    def shape(self) -> tuple[int, int]:
        return self.row_marginals.size, self.col_marginals.size

    @classmethod
    def uniform(cls, m: int, n: int) -> "MarginalPrior":
        return cls(np.full(m, 1.0 / m), np.full(n, 1.0 / n))

    @classmethod
    def from_match_counts(cls, n_queries: int, item_match_counts) -> "MarginalPrior":
        """Uniform query weights; item weights proportional to match counts.

        Models many-captions-per-item ground truth: an item matched by k
        queries receives k times the marginal mass of a singly-matched item.
        """
        counts = np.asarray(item_match_counts, dtype=np.float64).ravel()
        if (counts <= 0).any():
            raise ValueError("match counts must be strictly positive")
        return cls(np.full(n_queries, 1.0 / n_queries), counts / counts.sum())


@dataclass(frozen=True)
class SinkhornOptions:
    """Iteration controls.

    With ``tol`` unset the loop runs exactly ``n_iters`` fixed-point
    iterations (one iteration = a row update followed by a column update).
    With ``tol`` set it runs until the marginal residual drops below ``tol``,
    capped at ``max_iters_cap``.
    """

    n_iters: int = 4
    tol: float | None = None
    log_domain: bool = True
    max_iters_cap: int = 10000

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if self.max_iters_cap < 1:
            raise ValueError("max_iters_cap must be >= 1")
        if self.tol is not None and self.tol <= 0:
            raise ValueError("tol must be positive when set")


@dataclass(frozen=True)
class ScalingVectors:
    """Positive row/column scales and the residual they achieved."""

    row_scales: np.ndarray
    col_scales: np.ndarray
    residual: float
    iterations_run: int

    def __post_init__(self):
        row = _frozen(self.row_scales)
        col = _frozen(self.col_scales)
        for name, v in (("row_scales", row), ("col_scales", col)):
            if not np.isfinite(v).all() or (v <= 0).any():
                raise NonFinite(f"{name} must be strictly positive and finite")
        object.__setattr__(self, "row_scales", row)
        object.__setattr__(self, "col_scales", col)


@dataclass(frozen=True)
class BiasVectors:
    """Additive per-query and per-item score offsets at a given temperature.

    By construction ``sum_i exp(query_biases[i] / gamma) == 1`` and likewise
    for the item biases: the underlying scaling vectors are normalized to
    unit sum before the log is taken.
    """

    query_biases: np.ndarray
    item_biases: np.ndarray
    gamma: float

    def __post_init__(self):
        q = _frozen(self.query_biases)
        i = _frozen(self.item_biases)
        if not (np.isfinite(q).all() and np.isfinite(i).all()):
            raise NonFinite("bias vectors must be finite")
        object.__setattr__(self, "query_biases", q)
        object.__setattr__(self, "item_biases", i)


@dataclass(frozen=True)
class TransportPlan:
    """Nonnegative matrix whose marginals approach the prior within ``residual``."""

    plan: np.ndarray
    prior: MarginalPrior
    residual: float

    def __post_init__(self):
        p = _frozen(self.plan)
        if (p < 0).any() or not np.isfinite(p).all():
            raise ValueError("plan entries must be nonnegative and finite")
        object.__setattr__(self, "plan", p)


def _marginal_residual(plan: np.ndarray, r: np.ndarray, c: np.ndarray) -> float:
    row_dev = np.abs(plan.sum(axis=1) - r).max()
    col_dev = np.abs(plan.sum(axis=0) - c).max()
    return float(max(row_dev, col_dev))


def _scale_log(log_m: np.ndarray, prior: MarginalPrior, opts: SinkhornOptions):
    """Log-domain fixed-point loop; returns (log_row, log_col, residual, iterations)."""
    r = prior.row_marginals
    c = prior.col_marginals
    log_r = np.log(r)
    log_c = np.log(c)
    # Column-sum initialization of the column scales, as in the multiplicative loop.
    g = log_c - logsumexp(log_m, axis=0)
    f = np.zeros(log_m.shape[0])
    iters = 0
    residual = np.inf
    while True:
        f = log_r - logsumexp(log_m + g[None, :], axis=1)
        g = log_c - logsumexp(log_m + f[:, None], axis=0)
        iters += 1
        log_plan = f[:, None] + log_m + g[None, :]
        residual = _marginal_residual(np.exp(log_plan), r, c)
        if opts.tol is None:
            if iters >= opts.n_iters:
                break
        elif residual < opts.tol or iters >= opts.max_iters_cap:
            break
    if not (np.isfinite(f).all() and np.isfinite(g).all()):
        raise NonFinite("scaling diverged; check the matrix for empty support")
    return f, g, residual, iters


def _scale_linear(m_mat: np.ndarray, prior: MarginalPrior, opts: SinkhornOptions):
    """Multiplicative fixed-point loop; raises NonFinite on overflow."""
    r = prior.row_marginals
    c = prior.col_marginals
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        beta = c / m_mat.sum(axis=0)
        alpha = np.ones(m_mat.shape[0])
        iters = 0
        residual = np.inf
        while True:
            alpha = r / (m_mat @ beta)
            beta = c / (alpha @ m_mat)
            iters += 1
            if not (np.isfinite(alpha).all() and np.isfinite(beta).all()):
                raise NonFinite(
                    f"multiplicative scaling overflowed at iteration {iters}; use log_domain=True"
                )
            plan = alpha[:, None] * m_mat * beta[None, :]
            residual = _marginal_residual(plan, r, c)
            if opts.tol is None:
                if iters >= opts.n_iters:
                    break
            elif residual < opts.tol or iters >= opts.max_iters_cap:
                break
    return alpha, beta, residual, iters


def scale_matrix(
    m_mat: np.ndarray,
    prior: MarginalPrior | None = None,
    opts: SinkhornOptions = SinkhornOptions(),
) -> tuple[ScalingVectors, TransportPlan]:
    """Scale a nonnegative matrix so its marginals approach the prior.

    Returns scaling vectors (alpha, beta) with
    ``plan = diag(alpha) @ m_mat @ diag(beta)`` and the plan itself. Every
    row and column of the input must contain a strictly positive entry.
    """
    m_mat = np.atleast_2d(np.asarray(m_mat, dtype=np.float64))
    if (m_mat < 0).any() or not np.isfinite(m_mat).all():
        raise ValueError("matrix must be nonnegative and finite")
    if prior is None:
        prior = MarginalPrior.uniform(*m_mat.shape)
    if prior.shape != m_mat.shape:
        raise DimensionMismatch(f"prior shape {prior.shape} != matrix shape {m_mat.shape}")
    row_support = m_mat.max(axis=1)
    col_support = m_mat.max(axis=0)
    if (row_support <= 0).any():
        raise DegenerateMatrix(f"row {int(np.argmin(row_support))} is all zero")
    if (col_support <= 0).any():
        raise DegenerateMatrix(f"column {int(np.argmin(col_support))} is all zero")

    if opts.log_domain:
        with np.errstate(divide="ignore"):
            log_m = np.log(m_mat)
        f, g, residual, iters = _scale_log(log_m, prior, opts)
        alpha = np.exp(f)
        beta = np.exp(g)
        with np.errstate(invalid="ignore"):
            plan = np.exp(f[:, None] + log_m + g[None, :])
        plan = np.where(m_mat == 0.0, 0.0, plan)
    else:
        alpha, beta, residual, iters = _scale_linear(m_mat, prior, opts)
        plan = alpha[:, None] * m_mat * beta[None, :]
    scales = ScalingVectors(alpha, beta, residual=residual, iterations_run=iters)
    return scales, TransportPlan(plan, prior=prior, residual=residual)


def _compute_biases_stats(
    sims: SimilarityMatrix,
    gamma: float,
    prior: MarginalPrior | None,
    opts: SinkhornOptions,
) -> tuple[BiasVectors, int]:
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma!r}")
    if prior is None:
        prior = MarginalPrior.uniform(*sims.shape)
    if prior.shape != sims.shape:
        raise DimensionMismatch(f"prior shape {prior.shape} != similarity shape {sims.shape}")
    log_m = sims.values / gamma
    if opts.log_domain:
        f, g, _residual, iters = _scale_log(log_m, prior, opts)
        query_biases = gamma * (f - logsumexp(f))
        item_biases = gamma * (g - logsumexp(g))
    else:
        with np.errstate(over="ignore"):
            m_mat = np.exp(log_m)
        if not np.isfinite(m_mat).all():
            raise NonFinite("exp(S / gamma) overflowed; use log_domain=True")
        alpha, beta, _residual, iters = _scale_linear(m_mat, prior, opts)
        query_biases = gamma * np.log(alpha / alpha.sum())
        item_biases = gamma * np.log(beta / beta.sum())
    return BiasVectors(query_biases, item_biases, gamma=gamma), iters


def compute_biases(
    sims: SimilarityMatrix,
    gamma: float,
    prior: MarginalPrior | None = None,
    opts: SinkhornOptions = SinkhornOptions(),
) -> BiasVectors:
    """Optimal additive biases for a similarity matrix at temperature ``gamma``.

    Runs the scaling loop on ``exp(S / gamma)`` (held implicitly in the log
    domain by default) and converts the normalized scaling vectors through
    ``gamma * log``. Adding the biases to ``S`` normalizes each instance's
    summed retrieval probability; see :func:`verify_normalization`.
    """
    return _compute_biases_stats(sims, gamma, prior, opts)[0]


def adjust_similarity(sims: SimilarityMatrix, biases: BiasVectors) -> SimilarityMatrix:
    """Add per-query and per-item biases: ``out[i, j] = a[i] + b[j] + S[i, j]``."""
    m, n = sims.shape
    if biases.query_biases.size != m or biases.item_biases.size != n:
        raise DimensionMismatch(
            f"bias lengths ({biases.query_biases.size}, {biases.item_biases.size}) "
            f"do not match similarity shape {sims.shape}"
        )
    values = sims.values + biases.query_biases[:, None] + biases.item_biases[None, :]
    return SimilarityMatrix(values, row_ids=sims.row_ids, col_ids=sims.col_ids)


def verify_normalization(
    sims_adjusted: SimilarityMatrix,
    gamma: float,
    prior: MarginalPrior | None = None,
) -> tuple[float, float]:
    """Max deviation of each instance's summed retrieval probability from its target.

    For the query->item direction, item j's target mass is
    ``n_queries * col_marginals[j]`` (1 in the square uniform case); the
    item->query direction is symmetric. Both checks are exact at convergence
    when the query-side marginals of the checked direction are uniform.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma!r}")
    m, n = sims_adjusted.shape
    if prior is None:
        prior = MarginalPrior.uniform(m, n)
    p_t2v = np.exp(log_softmax(sims_adjusted.values / gamma, axis=1))
    t2v_error = float(np.abs(p_t2v.sum(axis=0) - m * prior.col_marginals).max())
    p_v2t = np.exp(log_softmax(sims_adjusted.values.T / gamma, axis=1))
    v2t_error = float(np.abs(p_v2t.sum(axis=0) - n * prior.row_marginals).max())
    return t2v_error, v2t_error
