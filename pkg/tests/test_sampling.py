"""Sampler distribution checks: instance frequencies vs class frequencies."""

import numpy as np
import pytest
from scipy import stats

from taildistill.data import make_synthetic_longtail
from taildistill.sampling import (
    SamplerSpec,
    SamplingError,
    class_balanced_indices,
    epoch_indices,
    instance_balanced_indices,
)

DRAWS = 100_000
P_FLOOR = 0.01


@pytest.fixture(scope="module")
def longtail_train():
    train, _ = make_synthetic_longtail(
        num_classes=8, n_max=100, imbalance_factor=100.0, image_size=8, seed=13,
        test_per_class=2,
    )
    return train


def _label_counts(dataset, instance_ids):
    positions = dataset.positions_of(instance_ids)
    return np.bincount(dataset.labels[positions], minlength=dataset.num_classes)


class TestInstanceBalanced:
    def test_class_frequency_tracks_counts(self, longtail_train):
        """Draw frequencies should match class_counts/N by a chi-square test."""
        spec = SamplerSpec("instance_balanced", seed=42, epoch_length=DRAWS)
        observed = _label_counts(longtail_train, instance_balanced_indices(longtail_train, spec))
        expected = DRAWS * longtail_train.class_counts / len(longtail_train)
        result = stats.chisquare(observed, expected)
        assert result.pvalue > P_FLOOR

    def test_same_seed_identical(self, longtail_train):
        spec = SamplerSpec("instance_balanced", seed=7)
        np.testing.assert_array_equal(
            instance_balanced_indices(longtail_train, spec),
            instance_balanced_indices(longtail_train, spec),
        )

    def test_default_length_is_dataset_size(self, longtail_train):
        spec = SamplerSpec("instance_balanced", seed=0)
        assert len(instance_balanced_indices(longtail_train, spec)) == len(longtail_train)

    def test_single_instance_dataset(self, handmade_dataset):
        """With replacement, a draw longer than the dataset is legal."""
        spec = SamplerSpec("instance_balanced", seed=1, epoch_length=50)
        drawn = instance_balanced_indices(handmade_dataset, spec)
        assert set(drawn).issubset(set(handmade_dataset.instance_ids))


class TestClassBalanced:
    def test_class_frequency_uniform(self, longtail_train):
        """Every class should be drawn 1/C of the time regardless of its count."""
        spec = SamplerSpec("class_balanced", seed=42, epoch_length=DRAWS)
        observed = _label_counts(longtail_train, class_balanced_indices(longtail_train, spec))
        result = stats.chisquare(observed)  # uniform expectation
        assert result.pvalue > P_FLOOR

    def test_tail_instances_revisited(self, longtail_train):
        """The single-instance tail class appears about DRAWS/C times."""
        spec = SamplerSpec("class_balanced", seed=3, epoch_length=DRAWS)
        observed = _label_counts(longtail_train, class_balanced_indices(longtail_train, spec))
        tail = observed[-1]
        assert abs(tail - DRAWS / longtail_train.num_classes) < 5 * np.sqrt(DRAWS / longtail_train.num_classes)

    def test_same_seed_identical(self, longtail_train):
        spec = SamplerSpec("class_balanced", seed=7)
        np.testing.assert_array_equal(
            class_balanced_indices(longtail_train, spec),
            class_balanced_indices(longtail_train, spec),
        )

    def test_balanced_dataset_matches_instance_balanced_marginals(self):
        """On balanced data both strategies share the uniform class marginal."""
        train, _ = make_synthetic_longtail(4, 25, 1.0, image_size=8, seed=2, test_per_class=2)
        spec = SamplerSpec("class_balanced", seed=5, epoch_length=DRAWS)
        observed = _label_counts(train, class_balanced_indices(train, spec))
        assert stats.chisquare(observed).pvalue > P_FLOOR


class TestSpecValidation:
    def test_unknown_strategy_rejected(self):
        with pytest.raises(SamplingError, match="unknown strategy"):
            SamplerSpec("shuffled", seed=0)

    def test_nonpositive_length_rejected(self):
        with pytest.raises(SamplingError):
            SamplerSpec("instance_balanced", seed=0, epoch_length=0)

    def test_dispatch_matches_direct_calls(self, longtail_train):
        for strategy, fn in (
            ("instance_balanced", instance_balanced_indices),
            ("class_balanced", class_balanced_indices),
        ):
            spec = SamplerSpec(strategy, seed=11, epoch_length=64)
            np.testing.assert_array_equal(
                epoch_indices(longtail_train, spec), fn(longtail_train, spec)
            )
