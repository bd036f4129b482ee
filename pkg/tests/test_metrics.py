import numpy as np
import pytest
import scipy.integrate
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from spx.errors import DegenerateDistributionError, DegeneratePairsError
from spx.metrics import (
    collect_outputs,
    io_pairs,
    mapping_difficulty,
    min_components_for_variance,
    select_wasserstein_neurons,
    wd_empirical,
    wd_to_gaussian,
    weighted_cluster_average,
)
from spx.numerics import inv_normal_cdf, normal_cdf, seeded_rng


class TestCollectOutputs:
    def test_identity_weights(self):
        outs = collect_outputs(np.eye(2), np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert np.array_equal(outs[0].samples, [1.0, 2.0])
        assert np.array_equal(outs[1].samples, [3.0, 4.0])

    def test_zero_weights(self):
        outs = collect_outputs(np.zeros((3, 2)), np.ones((2, 5)))
        assert all(np.array_equal(o.samples, np.zeros(5)) for o in outs)

    def test_one_by_one(self):
        outs = collect_outputs(np.array([[2.0]]), np.array([[5.0, -1.0]]))
        assert np.array_equal(outs[0].samples, [10.0, -2.0])

    def test_bias(self):
        outs = collect_outputs(np.eye(2), np.zeros((2, 3)), bias=[1.0, -1.0])
        assert np.array_equal(outs[0].samples, np.ones(3))
        assert np.array_equal(outs[1].samples, -np.ones(3))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            collect_outputs(np.eye(2), np.ones((3, 4)))


def two_point_wd_oracle() -> float:
    """Quadrature of the quantile-distance integral for the +-1 two-point
    distribution (already zero mean, unit variance) against N(0, 1)."""

    def integrand(z):
        f_inv = -1.0 if z < 0.5 else 1.0
        return abs(f_inv - inv_normal_cdf(z))

    lo = normal_cdf(-1.0)
    total = 0.0
    for a, b in [(1e-12, lo), (lo, 0.5), (0.5, 1 - lo), (1 - lo, 1 - 1e-12)]:
        total += scipy.integrate.quad(integrand, a, b, limit=200)[0]
    return total


class TestWdToGaussian:
    @pytest.mark.parametrize("n", [2, 3, 7, 64, 1001])
    def test_quantile_matched_exactly_zero(self, n):
        samples = inv_normal_cdf((np.arange(1, n + 1) - 0.5) / n)
        assert wd_to_gaussian(samples) == 0.0

    def test_two_point_matches_quadrature_oracle(self):
        oracle = two_point_wd_oracle()
        samples = np.concatenate([np.full(5000, -1.0), np.full(5000, 1.0)])
        measured = wd_to_gaussian(samples)
        assert abs(measured - oracle) <= 0.01
        assert abs(measured - 0.535) <= 0.01

    def test_large_normal_sample_is_small(self):
        draws = seeded_rng(2024).standard_normal(100_000)
        assert wd_to_gaussian(draws) <= 0.02

    def test_degenerate_raises(self):
        with pytest.raises(DegenerateDistributionError):
            wd_to_gaussian(np.full(10, 3.0))

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            wd_to_gaussian([1.0])

    @settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        a=st.floats(0.01, 100.0),
        b=st.floats(-50.0, 50.0),
    )
    def test_affine_invariance(self, seed, a, b):
        x = seeded_rng(seed).standard_normal(257)
        assert abs(wd_to_gaussian(a * x + b) - wd_to_gaussian(x)) <= 1e-9

    def test_nonnegative(self):
        rng = seeded_rng(5)
        for _ in range(20):
            assert wd_to_gaussian(rng.standard_normal(33)) >= 0.0


class TestWdEmpirical:
    def test_identical_sets(self):
        assert wd_empirical([1.0, 2.0, 3.0], [3.0, 1.0, 2.0]) == 0.0

    def test_pure_translation(self):
        assert wd_empirical([0.0, 0.0], [1.0, 1.0]) == 1.0

    def test_quantile_integral_example(self):
        # integral of |F^-1 - G^-1|: 0 on the lower half, 2 on the upper.
        assert wd_empirical([0.0, 1.0], [0.0, 3.0]) == 1.0

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            wd_empirical([], [1.0])

    def test_matches_scipy_oracle(self):
        rng = seeded_rng(77)
        for _ in range(25):
            a = rng.standard_normal(int(rng.integers(2, 60)))
            b = 2.0 * rng.standard_normal(int(rng.integers(2, 60))) + 1.0
            want = scipy.stats.wasserstein_distance(a, b)
            assert abs(wd_empirical(a, b) - want) <= 1e-10

    def test_symmetry_bitwise(self):
        rng = seeded_rng(78)
        a, b = rng.standard_normal(31), rng.standard_normal(17)
        assert wd_empirical(a, b) == wd_empirical(b, a)

    def test_triangle_inequality(self):
        rng = seeded_rng(79)
        for _ in range(25):
            a, b, c = (rng.standard_normal(20) for _ in range(3))
            assert wd_empirical(a, c) <= wd_empirical(a, b) + wd_empirical(b, c) + 1e-9

    def test_resampled_multiset_is_zero(self):
        assert wd_empirical([0.0, 1.0], [0.0, 0.0, 1.0, 1.0]) == 0.0


class TestMappingDifficulty:
    def test_hand_enumerated(self):
        # pairs (0,1), (0,2), (1,2): dx = 1, 2, 1; dy identical; N_x = 2,
        # N_y = 1, every ratio is 2.
        assert mapping_difficulty([1.0], np.array([[0.0, 1.0, 2.0]])) == 2.0

    def test_two_inputs_self_normalize(self):
        assert mapping_difficulty([1.0, 2.0], np.array([[0.0, 1.0], [1.0, 3.0]])) == 1.0

    def test_weight_scale_invariance(self):
        rng = seeded_rng(3)
        x = rng.standard_normal((4, 40))
        w = rng.standard_normal(4)
        base = mapping_difficulty(w, x)
        for c in (-3.0, 0.5, 100.0):
            assert abs(mapping_difficulty(c * w, x) - base) <= 1e-9

    def test_input_scale_invariance(self):
        rng = seeded_rng(4)
        x = rng.standard_normal((4, 30))
        w = rng.standard_normal(4)
        base = mapping_difficulty(w, x)
        assert abs(mapping_difficulty(w, 2.5 * x) - base) <= 1e-9

    def test_degenerate_outputs(self):
        with pytest.raises(DegeneratePairsError):
            mapping_difficulty([0.0], np.array([[0.0, 1.0, 2.0]]))

    def test_sampled_close_to_exhaustive(self):
        rng = seeded_rng(6)
        x = rng.standard_normal((8, 300))
        w = rng.standard_normal(8)
        full = mapping_difficulty(w, x)
        sampled = mapping_difficulty(w, x, pair_budget=8000, rng=seeded_rng(1))
        assert abs(sampled - full) / full <= 0.05

    def test_sampling_deterministic(self):
        rng = seeded_rng(6)
        x = rng.standard_normal((8, 300))
        w = rng.standard_normal(8)
        a = mapping_difficulty(w, x, pair_budget=5000, rng=seeded_rng(9))
        b = mapping_difficulty(w, x, pair_budget=5000, rng=seeded_rng(9))
        assert a == b


class TestIoPairs:
    def test_identical_inputs(self):
        pairs, skipped = io_pairs([1.0, 0.0], np.array([[1.0, 1.0], [2.0, 2.0]]))
        assert skipped == 0
        assert np.allclose(pairs, [[1.0, 0.0]])

    def test_orthogonal_inputs(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        pairs, _ = io_pairs([1.0, 0.0], x)
        assert np.allclose(pairs, [[0.0, 1.0]])

    def test_antipodal(self):
        rng = seeded_rng(8)
        v = rng.standard_normal(5)
        w = rng.standard_normal(5)
        pairs, _ = io_pairs(w, np.column_stack([v, -v]))
        assert abs(pairs[0, 0] + 1.0) <= 1e-12
        assert abs(pairs[0, 1] - 2 * abs(w @ v)) <= 1e-12

    def test_zero_norm_skipped_and_counted(self):
        x = np.array([[0.0, 1.0, 2.0], [0.0, 0.0, 0.0]])
        pairs, skipped = io_pairs([1.0, 1.0], x)
        assert skipped == 2  # both pairs touching the zero column
        assert pairs.shape == (1, 2)


class TestSelectWasserstein:
    def test_top_third(self):
        assert select_wasserstein_neurons(np.array([0.1, 0.9, 0.5]), 1 / 3).tolist() == [1]

    def test_full_fraction(self):
        assert select_wasserstein_neurons(np.array([0.2, 0.1]), 1.0).tolist() == [0, 1]

    def test_tie_prefers_lower_index(self):
        assert select_wasserstein_neurons(np.array([0.5, 0.5]), 0.5).tolist() == [0]

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            select_wasserstein_neurons(np.array([0.5]), 0.0)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 5000), frac=st.floats(0.05, 1.0))
    def test_monotone_transform_invariance(self, seed, frac):
        wd = seeded_rng(seed).random(23)
        a = select_wasserstein_neurons(wd, frac)
        b = select_wasserstein_neurons(np.exp(3.0 * wd) + 1.0, frac)
        assert np.array_equal(a, b)


class TestWeightedClusterAverage:
    def test_uniform(self):
        assert weighted_cluster_average([1.0, 3.0], [1.0, 1.0]) == 2.0

    def test_weighted(self):
        assert weighted_cluster_average([1.0, 3.0], [3.0, 1.0]) == 1.5

    def test_single_cluster(self):
        assert weighted_cluster_average([4.2], [17.0]) == 4.2

    def test_zero_total(self):
        with pytest.raises(ValueError):
            weighted_cluster_average([1.0], [0.0])


class TestMinComponents:
    def test_rank_two(self):
        rng = seeded_rng(10)
        x = (rng.standard_normal((200, 2)) @ rng.standard_normal((2, 12))).T
        assert min_components_for_variance(x, 0.9) == 2

    def test_isotropic_equal_eigenvalues(self):
        # Exactly equal covariance eigenvalues: scaled orthonormal columns
        # repeated symmetrically around zero.
        q, _ = np.linalg.qr(seeded_rng(11).standard_normal((10, 10)))
        x = np.concatenate([q, -q], axis=1)  # covariance = I/10 * const
        assert min_components_for_variance(x, 0.9) == 9

    def test_threshold_one_full_rank(self):
        rng = seeded_rng(12)
        x = rng.standard_normal((6, 300))
        assert min_components_for_variance(x, 1.0) == 6

    def test_zero_variance_flag(self):
        assert min_components_for_variance(np.ones((4, 9)), 0.9) == 0

    def test_monotone_in_threshold(self):
        rng = seeded_rng(13)
        x = rng.standard_normal((8, 100)) * np.linspace(1, 4, 8)[:, None]
        thresholds = np.linspace(0.05, 1.0, 25)
        ks = [min_components_for_variance(x, float(t)) for t in thresholds]
        assert all(a <= b for a, b in zip(ks, ks[1:]))
