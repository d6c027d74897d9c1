import pytest
from hypothesis import given
from hypothesis import strategies as st

from codedcollage.metrics import (
    LatencySummary,
    RecoveryLedger,
    mean,
    percentile,
    recovery_accuracy,
    redundancy_overhead,
    stddev,
    summarize,
)


class TestPercentile:
    def test_hundred_distinct_values(self):
        samples = list(range(1, 101))
        assert percentile(samples, 99) == 99
        assert percentile(samples, 50) == 50
        assert percentile(samples, 1) == 1
        assert percentile(samples, 100) == 100

    def test_singleton(self):
        assert percentile([0.42], 50) == 0.42
        assert percentile([0.42], 99) == 0.42

    def test_rank_rounds_up(self):
        # n=4, q=50: rank ceil(2) = 2 -> second smallest.
        assert percentile([0.1, 0.2, 0.7, 0.15], 50) == 0.15
        # n=4, q=60: rank ceil(2.4) = 3.
        assert percentile([0.1, 0.2, 0.7, 0.15], 60) == 0.2

    def test_rank_arithmetic_is_exact(self):
        # 0.7 * 10 is 7.000000000000001 in floats; the rank must still be 7.
        samples = list(range(1, 11))
        assert percentile(samples, 70) == 7

    def test_input_order_irrelevant(self):
        assert percentile([5, 1, 4, 2, 3], 40) == percentile([1, 2, 3, 4, 5], 40) == 2

    def test_bounds(self):
        with pytest.raises(ValueError):
            percentile([], 50)
        with pytest.raises(ValueError):
            percentile([1.0], 0)
        with pytest.raises(ValueError):
            percentile([1.0], 100.5)

    @given(
        st.lists(st.floats(min_value=0.001, max_value=100, allow_nan=False), min_size=1),
        st.floats(min_value=0.01, max_value=100),
        st.floats(min_value=0.01, max_value=100),
    )
    def test_monotone_in_q(self, samples, q1, q2):
        lo, hi = sorted((q1, q2))
        assert percentile(samples, lo) <= percentile(samples, hi)

    @given(st.lists(st.floats(min_value=0.001, max_value=100, allow_nan=False), min_size=1))
    def test_returns_an_observed_value(self, samples):
        for q in (1, 37.5, 50, 99, 100):
            assert percentile(samples, q) in samples


class TestMoments:
    def test_mean_and_stddev_pair(self):
        assert mean([0.1, 0.2]) == pytest.approx(0.15)
        assert stddev([0.1, 0.2]) == pytest.approx(0.05)

    def test_constant_sample_has_zero_spread(self):
        assert stddev([3.3] * 7) == 0.0

    def test_population_not_sample_variance(self):
        # [0, 2]: population stddev 1, sample stddev sqrt(2).
        assert stddev([0.0, 2.0]) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mean([])
        with pytest.raises(ValueError):
            stddev([])
        with pytest.raises(ValueError):
            summarize([])


class TestSummarize:
    def test_fields(self):
        s = summarize([0.4, 0.1, 0.3, 0.2])
        assert s == LatencySummary(
            count=4,
            mean_s=mean([0.4, 0.1, 0.3, 0.2]),
            stddev_s=stddev([0.4, 0.1, 0.3, 0.2]),
            p50_s=0.2,
            p99_s=0.4,
            min_s=0.1,
            max_s=0.4,
        )

    @given(st.lists(st.floats(min_value=0.001, max_value=100, allow_nan=False), min_size=1))
    def test_permutation_invariant(self, samples):
        assert summarize(samples) == summarize(sorted(samples, reverse=True))

    @given(st.lists(st.floats(min_value=0.001, max_value=100, allow_nan=False), min_size=1))
    def test_ordering_invariants(self, samples):
        s = summarize(samples)
        assert s.min_s <= s.p50_s <= s.p99_s <= s.max_s
        # fsum-then-divide can land one ulp outside [min, max] for
        # constant samples, so compare with a hair of slack.
        slack = 1e-12 * max(abs(s.min_s), abs(s.max_s))
        assert s.min_s - slack <= s.mean_s <= s.max_s + slack
        assert s.stddev_s >= 0


class TestLedger:
    def test_recovery_accuracy_published_operating_points(self):
        # The two operating points quoted for the detector-assisted
        # recovery path: 1119/1280 and 563/689.
        busy = RecoveryLedger(
            total_requests=10_000,
            slowdown_requests=1280,
            collage_used=1280,
            collage_correct=1119,
        )
        assert recovery_accuracy(busy) == pytest.approx(0.874, abs=0.0005)
        lean = RecoveryLedger(
            total_requests=10_000,
            slowdown_requests=689,
            collage_used=689,
            collage_correct=563,
        )
        assert recovery_accuracy(lean) == pytest.approx(0.8171, abs=0.0005)

    def test_accuracy_undefined_when_unused(self):
        ledger = RecoveryLedger(total_requests=10, slowdown_requests=0)
        with pytest.raises(ValueError, match="undefined"):
            recovery_accuracy(ledger)

    def test_validate_accepts_balanced_counts(self):
        RecoveryLedger(
            total_requests=100,
            slowdown_requests=30,
            collage_used=25,
            collage_unavailable=5,
            collage_correct=20,
            collage_straggler_batches=1,
        ).validate()

    def test_validate_rejects_imbalance(self):
        bad = RecoveryLedger(total_requests=100, slowdown_requests=30, collage_used=25)
        with pytest.raises(ValueError, match="imbalance"):
            bad.validate()

    def test_validate_rejects_negative(self):
        with pytest.raises(ValueError, match="negative"):
            RecoveryLedger(total_requests=-1).validate()

    def test_validate_rejects_correct_above_used(self):
        bad = RecoveryLedger(
            total_requests=10, slowdown_requests=2, collage_used=2, collage_correct=3
        )
        with pytest.raises(ValueError, match="exceeds"):
            bad.validate()

    def test_validate_rejects_slowdowns_above_total(self):
        bad = RecoveryLedger(total_requests=5, slowdown_requests=6, collage_used=6)
        with pytest.raises(ValueError):
            bad.validate()

    def test_merge_adds_fieldwise(self):
        a = RecoveryLedger(9, 3, 1, 2, 2, 0)
        b = RecoveryLedger(18, 5, 2, 3, 1, 1)
        merged = a.merge(b)
        assert merged == RecoveryLedger(27, 8, 3, 5, 3, 1)
        merged.validate()


def test_redundancy_overhead():
    assert redundancy_overhead(4) == 0.25
    assert redundancy_overhead(9) == 1 / 9
    assert redundancy_overhead(25) == 0.04
    with pytest.raises(ValueError):
        redundancy_overhead(0)
