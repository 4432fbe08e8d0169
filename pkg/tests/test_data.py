"""Count profiles, split tagging, dataset invariants, and manifest roundtrips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taildistill.data import (
    DatasetError,
    ImbalanceProfile,
    LongTailedDataset,
    assign_split,
    exponential_profile,
    load_dataset_bundle,
    make_synthetic_longtail,
    pareto_profile,
    save_dataset_bundle,
    subsample_to_profile,
)


class TestExponentialProfile:
    def test_factor_one_is_balanced(self):
        """A degenerate imbalance factor of 1 keeps every class at n_max."""
        counts = exponential_profile(500, 100, 1.0)
        np.testing.assert_array_equal(counts, np.full(100, 500))

    def test_endpoints_match_imbalance_factor(self):
        counts = exponential_profile(500, 100, 100.0)
        assert counts[0] == 500
        assert counts[-1] == 5
        assert counts[0] / counts[-1] == 100.0

    def test_toy_scale_counts(self):
        """The 20-class desk-scale profile, frozen from the closed form."""
        counts = exponential_profile(100, 20, 100.0)
        expected = [100, 78, 62, 48, 38, 30, 23, 18, 14, 11,
                    9, 7, 5, 4, 3, 3, 2, 2, 1, 1]
        np.testing.assert_array_equal(counts, expected)
        assert counts.sum() == 459
        assert counts.min() == 1

    def test_counts_never_increase(self):
        counts = exponential_profile(200, 30, 50.0)
        assert np.all(np.diff(counts) <= 0)

    def test_empty_tail_rejected(self):
        with pytest.raises(DatasetError, match="smallest class would be empty"):
            exponential_profile(10, 5, 100.0)


class TestParetoProfile:
    def test_equal_endpoints_flat(self):
        np.testing.assert_array_equal(pareto_profile(100, 100, 10, 6.0), np.full(10, 100))

    def test_endpoints_exact(self):
        counts = pareto_profile(400, 8, 25, 2.0)
        assert counts[0] == 400 and counts[-1] == 8
        assert np.all(np.diff(counts) <= 0)

    def test_min_above_max_rejected(self):
        with pytest.raises(DatasetError):
            pareto_profile(10, 20, 5, 1.0)


class TestAssignSplit:
    def test_boundaries(self):
        """100 is the many-shot floor and 20 the medium-shot floor."""
        assert assign_split(100) == "many"
        assert assign_split(99) == "medium"
        assert assign_split(20) == "medium"
        assert assign_split(19) == "few"
        assert assign_split(1) == "few"

    def test_zero_rejected(self):
        with pytest.raises(DatasetError):
            assign_split(0)

    @given(st.integers(min_value=1, max_value=10000))
    @settings(max_examples=50, deadline=None)
    def test_every_count_gets_exactly_one_tag(self, count):
        assert assign_split(count) in ("many", "medium", "few")


class TestImbalanceProfile:
    def test_exponential_constructor_records_params(self):
        profile = ImbalanceProfile.exponential(100, 20, 100.0)
        assert profile.kind == "exponential"
        assert profile.imbalance_factor == 100.0
        assert profile.num_classes == 20

    def test_increasing_counts_rejected(self):
        with pytest.raises(DatasetError, match="non-increasing"):
            ImbalanceProfile.explicit([3, 5, 1])


class TestLongTailedDataset:
    def test_count_mismatch_rejected(self, handmade_dataset):
        with pytest.raises(DatasetError, match="class_counts must match"):
            LongTailedDataset(
                images=handmade_dataset.images,
                labels=handmade_dataset.labels,
                instance_ids=handmade_dataset.instance_ids,
                class_counts=np.array([5, 1, 1]),
                split_tags=handmade_dataset.split_tags,
            )

    def test_duplicate_instance_ids_rejected(self, handmade_dataset):
        ids = handmade_dataset.instance_ids.copy()
        ids[1] = ids[0]
        with pytest.raises(DatasetError, match="unique"):
            LongTailedDataset(
                images=handmade_dataset.images,
                labels=handmade_dataset.labels,
                instance_ids=ids,
                class_counts=handmade_dataset.class_counts,
                split_tags=handmade_dataset.split_tags,
            )

    def test_position_lookup_inverts_ids(self, handmade_dataset):
        for pos, instance_id in enumerate(handmade_dataset.instance_ids):
            assert handmade_dataset.position_of(instance_id) == pos

    def test_arrays_are_read_only(self, handmade_dataset):
        with pytest.raises(ValueError):
            handmade_dataset.labels[0] = 2

    def test_imbalance_factor(self, handmade_dataset):
        assert handmade_dataset.imbalance_factor == 4.0


class TestSyntheticGenerator:
    def test_shapes_and_ranges(self):
        train, test = make_synthetic_longtail(
            num_classes=4, n_max=10, imbalance_factor=5.0, image_size=8, seed=42,
            test_per_class=6,
        )
        assert train.images.shape[1:] == (8, 8, 3)
        assert train.images.min() >= 0.0 and train.images.max() <= 1.0
        assert test.images.shape[0] == 24

    def test_test_set_is_balanced_with_train_tags(self):
        train, test = make_synthetic_longtail(
            num_classes=5, n_max=40, imbalance_factor=40.0, image_size=8, seed=0,
            test_per_class=9,
        )
        assert test.class_counts.min() == test.class_counts.max() == 9
        assert test.split_tags == train.split_tags

    def test_same_seed_reproduces(self):
        a, _ = make_synthetic_longtail(4, 10, 5.0, image_size=8, seed=7)
        b, _ = make_synthetic_longtail(4, 10, 5.0, image_size=8, seed=7)
        np.testing.assert_array_equal(a.images, b.images)

    def test_different_seed_differs(self):
        a, _ = make_synthetic_longtail(4, 10, 5.0, image_size=8, seed=7)
        b, _ = make_synthetic_longtail(4, 10, 5.0, image_size=8, seed=8)
        assert not np.array_equal(a.images, b.images)

    def test_two_class_balanced_case(self):
        train, _ = make_synthetic_longtail(2, 10, 1.0, image_size=8, seed=1)
        assert len(train) == 20
        np.testing.assert_array_equal(train.class_counts, [10, 10])

    def test_desk_scale_min_class(self):
        train, _ = make_synthetic_longtail(20, 100, 100.0, seed=0, test_per_class=2)
        assert train.class_counts[-1] == 1
        assert train.split_tags[0] == "many"
        assert train.split_tags[-1] == "few"


class TestSubsample:
    def test_subsample_matches_profile(self):
        full, _ = make_synthetic_longtail(4, 30, 1.0, image_size=8, seed=5)
        profile = ImbalanceProfile.exponential(20, 4, 10.0)
        sub = subsample_to_profile(full, profile, seed=42)
        np.testing.assert_array_equal(sub.class_counts, profile.counts)
        assert set(sub.instance_ids).issubset(set(full.instance_ids))

    def test_same_seed_same_selection(self):
        full, _ = make_synthetic_longtail(4, 30, 1.0, image_size=8, seed=5)
        profile = ImbalanceProfile.exponential(12, 4, 4.0)
        a = subsample_to_profile(full, profile, seed=9)
        b = subsample_to_profile(full, profile, seed=9)
        np.testing.assert_array_equal(a.instance_ids, b.instance_ids)

    def test_oversubscribed_class_rejected(self):
        full, _ = make_synthetic_longtail(4, 10, 1.0, image_size=8, seed=5)
        profile = ImbalanceProfile.explicit([11, 5, 5, 5])
        with pytest.raises(DatasetError, match="profile needs"):
            subsample_to_profile(full, profile, seed=0)


class TestBundleRoundtrip:
    def test_synthetic_manifest_regenerates(self, tmp_path):
        """Synthetic bundles store parameters only and rebuild identically."""
        params = dict(num_classes=4, n_max=10, imbalance_factor=5.0, image_size=8, seed=11)
        manifest = tmp_path / "toy.json"
        save_dataset_bundle(manifest, synthetic_params=params)
        train, test = load_dataset_bundle(manifest)
        direct_train, direct_test = make_synthetic_longtail(**params)
        np.testing.assert_array_equal(train.images, direct_train.images)
        np.testing.assert_array_equal(test.labels, direct_test.labels)

    def test_explicit_manifest_roundtrip(self, tmp_path, tiny_train, tiny_test):
        manifest = tmp_path / "pair.json"
        save_dataset_bundle(manifest, train=tiny_train, test=tiny_test)
        train, test = load_dataset_bundle(manifest)
        np.testing.assert_allclose(train.images, tiny_train.images)
        np.testing.assert_array_equal(train.instance_ids, tiny_train.instance_ids)
        assert train.split_tags == tiny_train.split_tags
        np.testing.assert_allclose(test.images, tiny_test.images)

    def test_non_manifest_rejected(self, tmp_path):
        bad = tmp_path / "x.json"
        bad.write_text('{"format": "something-else"}')
        with pytest.raises(DatasetError, match="not a dataset manifest"):
            load_dataset_bundle(bad)
