import numpy as np
import pytest

from misalign.harness.dataset import (
    BACKGROUND,
    DatasetSpec,
    gen_dataset,
    gen_sample,
    split_by_classes,
)


@pytest.fixture(scope="module")
def small_spec():
    return DatasetSpec(samples_per_class=4, seed=11)


@pytest.fixture(scope="module")
def small_data(small_spec):
    return gen_dataset(small_spec)


class TestGeneration:
    def test_deterministic(self, small_spec, small_data):
        again = gen_dataset(small_spec)
        for a, b in zip(small_data, again):
            assert a.image.tobytes() == b.image.tobytes()
            assert a.mask.tobytes() == b.mask.tobytes()
            assert a.label == b.label

    def test_pure_per_index(self, small_spec, small_data):
        s = gen_sample(small_spec, 17)
        assert s.image.tobytes() == small_data[17].image.tobytes()

    def test_mask_foreground_equals_label(self, small_data):
        for s in small_data:
            fg = s.mask[s.mask != BACKGROUND]
            assert fg.size > 0
            assert set(np.unique(fg)) == {s.label}

    def test_mask_matches_painted_pixels(self, small_data):
        # every foreground pixel is exactly the class colour, uniform
        for s in small_data[:8]:
            fg = s.mask != BACKGROUND
            region = s.image[:, fg]
            assert np.ptp(region, axis=1).max() == 0.0

    def test_histogram_uniform_within_one(self):
        spec = DatasetSpec(samples_per_class=5, seed=2)
        counts = np.bincount([s.label for s in gen_dataset(spec)], minlength=spec.num_classes)
        assert counts.max() - counts.min() <= 1

    def test_images_in_unit_range(self, small_data):
        for s in small_data:
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert s.image.shape == (3, 32, 32)

    def test_different_seed_differs(self, small_spec, small_data):
        other = gen_sample(DatasetSpec(samples_per_class=4, seed=12), 0)
        assert other.image.tobytes() != small_data[0].image.tobytes()

    def test_index_out_of_range(self, small_spec):
        with pytest.raises(ValueError):
            gen_sample(small_spec, small_spec.num_samples)


class TestSplits:
    def test_base_novel_partition(self, small_spec):
        base = set(small_spec.base_classes)
        novel = set(small_spec.novel_classes)
        assert base | novel == set(range(small_spec.num_classes))
        assert base & novel == set()
        assert len(novel) == small_spec.num_novel

    def test_split_by_classes(self, small_spec, small_data):
        base = split_by_classes(small_data, small_spec.base_classes)
        novel = split_by_classes(small_data, small_spec.novel_classes)
        assert len(base) + len(novel) == len(small_data)
        assert all(s.label in small_spec.base_classes for s in base)

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValueError):
            DatasetSpec(num_novel=12).validate()
        with pytest.raises(ValueError):
            DatasetSpec(noise_amplitude=0.9).validate()
