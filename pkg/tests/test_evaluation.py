import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nclkit import (
    Direction,
    GroundTruth,
    MissingGroundTruth,
    RetrievalDistribution,
    SimilarityMatrix,
    SinkhornOptions,
    adjust_similarity,
    compute_biases,
    compute_metrics,
    false_rate_profile,
    normalization_error,
    rank_matrix,
    retrieval_distribution,
)

from test_sinkhorn import random_sims


def sort_oracle_ranks(values, gt):
    """Independent full-sort oracle for best ground-truth ranks."""
    out = []
    for q, items in enumerate(gt.pairs):
        row = values[q]
        # order by descending score, ties by ascending index
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        position = {j: rank + 1 for rank, j in enumerate(order)}
        out.append(min(position[j] for j in items))
    return np.array(out)


class TestRetrievalDistribution:
    def test_equal_scores_give_uniform_row(self):
        dist = retrieval_distribution(SimilarityMatrix(np.array([[0.0, 0.0]])), 1.0)
        np.testing.assert_allclose(dist.probs, [[0.5, 0.5]])

    def test_saturation_at_small_gamma(self):
        dist = retrieval_distribution(SimilarityMatrix(np.array([[10.0, 0.0]])), 0.1)
        # first entry within 1e-40 of 1: all competing mass is below 1e-40
        assert dist.probs[0, 0] >= 1 - 1e-40
        assert 0 < dist.probs[0, 1] < 1e-40
        assert dist.probs[0].sum() == pytest.approx(1.0, abs=1e-12)

    def test_matches_direct_softmax_oracle(self, rng):
        values = rng.normal(size=(6, 6))
        dist = retrieval_distribution(SimilarityMatrix(values), 1.0)
        raw = np.exp(values)  # direct exp-then-normalize, safe at gamma=1
        np.testing.assert_allclose(dist.probs, raw / raw.sum(axis=1, keepdims=True), atol=1e-12)

    def test_v2t_uses_transpose(self, rng):
        sims = random_sims(rng, 4, 7)
        fwd = retrieval_distribution(sims, 0.5, Direction.T2V)
        rev = retrieval_distribution(sims, 0.5, Direction.V2T)
        assert fwd.probs.shape == (4, 7)
        assert rev.probs.shape == (7, 4)
        np.testing.assert_allclose(
            rev.probs,
            retrieval_distribution(sims.transposed(), 0.5, Direction.T2V).probs,
        )

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 2.0))
    def test_property_rows_sum_to_one(self, seed, gamma):
        rng = np.random.default_rng(seed)
        dist = retrieval_distribution(SimilarityMatrix(rng.uniform(-1, 1, (5, 8))), gamma)
        assert np.abs(dist.probs.sum(axis=1) - 1.0).max() < 1e-9
        assert (dist.probs >= 0).all() and (dist.probs <= 1).all()


class TestNormalizationError:
    def test_doubly_stochastic_is_zero(self):
        dist = RetrievalDistribution(np.full((3, 3), 1 / 3), Direction.T2V, gamma=1.0)
        assert normalization_error(dist) == pytest.approx(0.0)

    def test_direct_formula(self):
        probs = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        dist = RetrievalDistribution(probs, Direction.T2V, gamma=1.0)
        # column sums (2, 0, 1) -> (1 + 1 + 0) / 3
        assert normalization_error(dist) == pytest.approx(2 / 3)

    def test_adjusted_similarities_have_tiny_error(self, rng):
        sims = random_sims(rng, 9, 9)
        gamma = 0.1
        biases = compute_biases(sims, gamma, opts=SinkhornOptions(tol=1e-12, max_iters_cap=20000))
        dist = retrieval_distribution(adjust_similarity(sims, biases), gamma)
        assert normalization_error(dist) < 1e-6

    def test_rectangular_requires_item_prior(self, rng):
        dist = retrieval_distribution(random_sims(rng, 4, 6), 0.5)
        with pytest.raises(ValueError, match="item_prior"):
            normalization_error(dist)
        err = normalization_error(dist, item_prior=np.full(6, 1 / 6))
        assert err >= 0.0

    def test_invariant_under_query_permutation(self, rng):
        probs = retrieval_distribution(random_sims(rng, 7, 7), 0.2).probs
        dist = RetrievalDistribution(probs, Direction.T2V, 0.2)
        shuffled = RetrievalDistribution(probs[rng.permutation(7)], Direction.T2V, 0.2)
        assert normalization_error(dist) == pytest.approx(normalization_error(shuffled), abs=1e-15)


class TestGroundTruth:
    def test_diagonal(self):
        gt = GroundTruth.diagonal(3)
        assert gt.pairs == ((0,), (1,), (2,))
        assert gt.n_items == 3

    def test_empty_set_rejected(self):
        with pytest.raises(MissingGroundTruth):
            GroundTruth(((0,), ()), n_items=2)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            GroundTruth(((0,), (5,)), n_items=2)

    def test_inverted_multi_caption(self):
        gt = GroundTruth(((0,), (0,), (1,)), n_items=2)
        inv = gt.inverted()
        assert inv.pairs == ((0, 1), (2,))
        assert inv.n_items == 3


class TestRankMatrix:
    def test_diagonal_dominant_gives_rank_one(self):
        sims = SimilarityMatrix(np.eye(4))
        ranks = rank_matrix(sims, GroundTruth.diagonal(4))
        np.testing.assert_array_equal(ranks, [1, 1, 1, 1])

    def test_direct_ordering(self):
        sims = SimilarityMatrix(np.array([[0.1, 0.9, 0.5]]))
        ranks = rank_matrix(sims, GroundTruth(((0,),), n_items=3))
        assert ranks[0] == 3

    def test_ties_broken_by_ascending_index(self):
        sims = SimilarityMatrix(np.array([[0.5, 0.5, 0.5]]))
        assert rank_matrix(sims, GroundTruth(((1,),), n_items=3))[0] == 2
        assert rank_matrix(sims, GroundTruth(((0,),), n_items=3))[0] == 1

    def test_matches_sort_oracle(self, rng):
        sims = random_sims(rng, 20, 20)
        gt = GroundTruth.diagonal(20)
        np.testing.assert_array_equal(
            rank_matrix(sims, gt), sort_oracle_ranks(sims.values, gt)
        )

    def test_multi_caption_uses_best_rank(self):
        sims = SimilarityMatrix(np.array([[0.9, 0.1, 0.5]]))
        ranks = rank_matrix(sims, GroundTruth(((1, 2),), n_items=3))
        assert ranks[0] == 2  # item 2 at rank 2 beats item 1 at rank 3

    def test_coverage_mismatch_raises(self, rng):
        sims = random_sims(rng, 4, 4)
        with pytest.raises(MissingGroundTruth):
            rank_matrix(sims, GroundTruth.diagonal(3))


class TestComputeMetrics:
    def test_perfect_diagonal(self):
        sims = SimilarityMatrix(np.eye(5) * 0.9)
        report = compute_metrics(sims, GroundTruth.diagonal(5), gamma=0.5, ks=(1, 5))
        assert report.recall_at[1] == 1.0
        assert report.median_rank == 1.0
        assert report.mean_rank == 1.0

    def test_reversed_order(self):
        # every query's true item scores lowest
        values = np.full((4, 4), 0.5) - np.eye(4)
        report = compute_metrics(SimilarityMatrix(values), GroundTruth.diagonal(4), ks=(1,))
        assert report.recall_at[1] == 0.0
        assert report.mean_rank == 4.0

    def test_matches_sort_oracle_on_random(self, rng):
        sims = random_sims(rng, 50, 50)
        gt = GroundTruth.diagonal(50)
        report = compute_metrics(sims, gt, gamma=0.05, ks=(1, 5, 10))
        oracle = sort_oracle_ranks(sims.values, gt)
        assert report.recall_at[1] == pytest.approx(np.mean(oracle <= 1))
        assert report.recall_at[5] == pytest.approx(np.mean(oracle <= 5))
        assert report.recall_at[10] == pytest.approx(np.mean(oracle <= 10))
        assert report.mean_rank == pytest.approx(oracle.mean())
        assert report.median_rank == np.sort(oracle)[24]

    def test_median_is_lower_middle_on_even_counts(self):
        values = np.array(
            [
                [0.9, 0.1, 0.2, 0.3],
                [0.9, 0.8, 0.2, 0.3],
                [0.9, 0.8, 0.7, 0.3],
                [0.9, 0.8, 0.7, 0.6],
            ]
        )
        report = compute_metrics(SimilarityMatrix(values), GroundTruth.diagonal(4), ks=(1,))
        # ranks are (1, 2, 3, 4); lower middle is 2
        assert report.median_rank == 2.0

    def test_recall_non_decreasing_and_total(self, rng):
        sims = random_sims(rng, 30, 30)
        report = compute_metrics(sims, GroundTruth.diagonal(30), ks=(1, 5, 10, 30))
        values = list(report.recall_at.values())
        assert all(a <= b for a, b in zip(values, values[1:]))
        assert report.recall_at[30] == 1.0

    def test_row_shift_leaves_ranks_unchanged(self, rng):
        sims = random_sims(rng, 10, 10)
        gt = GroundTruth.diagonal(10)
        shifted = SimilarityMatrix(sims.values + rng.normal(size=(10, 1)))
        np.testing.assert_array_equal(rank_matrix(sims, gt), rank_matrix(shifted, gt))

    def test_csv_round_shape(self, rng):
        report = compute_metrics(random_sims(rng, 5, 5), GroundTruth.diagonal(5))
        lines = report.to_csv().strip().split("\n")
        assert len(lines) == 2
        assert lines[0].split(",")[0] == "r1"
        assert len(lines[0].split(",")) == len(lines[1].split(","))


class TestFalseRateProfile:
    def test_uniform_distribution_lands_in_one_bin(self):
        dist = RetrievalDistribution(np.full((4, 4), 0.25), Direction.T2V, 1.0)
        profile = false_rate_profile(dist, GroundTruth.diagonal(4), bins=3)
        assert profile.counts.sum() == 4
        assert (profile.counts > 0).sum() == 1

    def test_concentrated_mass_pattern(self):
        probs = np.zeros((4, 4))
        probs[:, 0] = 1.0
        dist = RetrievalDistribution(probs, Direction.T2V, 1.0)
        profile = false_rate_profile(dist, GroundTruth.diagonal(4), bins=2)
        # item 0 (sum 4) is alone in the top bin: wrong top-1 for 3 of 4 queries
        assert profile.counts[1] == 1
        assert profile.false_positive_rate[1] == pytest.approx(3 / 4)
        # items 1..3 (sum 0) are never retrieved by their true query
        assert profile.counts[0] == 3
        assert profile.false_negative_rate[0] == 1.0

    def test_rates_bounded(self, rng):
        dist = retrieval_distribution(random_sims(rng, 25, 25), 0.05)
        profile = false_rate_profile(dist, GroundTruth.diagonal(25), bins=6)
        assert profile.counts.sum() == 25
        assert (profile.false_negative_rate >= 0).all() and (profile.false_negative_rate <= 1).all()
        assert (profile.false_positive_rate >= 0).all() and (profile.false_positive_rate <= 1).all()

    def test_bins_validation(self, rng):
        dist = retrieval_distribution(random_sims(rng, 4, 4), 1.0)
        with pytest.raises(ValueError):
            false_rate_profile(dist, GroundTruth.diagonal(4), bins=1)

    def test_csv_shape(self, rng):
        dist = retrieval_distribution(random_sims(rng, 6, 6), 0.1)
        profile = false_rate_profile(dist, GroundTruth.diagonal(6), bins=4)
        lines = profile.to_csv().strip().split("\n")
        assert lines[0] == "bin_lo,bin_hi,count,fnr,fpr"
        assert len(lines) == 5
