"""Synthetic image generator: determinism, ranges, label balance."""

from __future__ import annotations

import numpy as np
import pytest

from taskfuse.data import SHAPE_NAMES, load_image_dir, synthetic_shapes


class TestSyntheticShapes:
    def test_shapes_and_range(self):
        images, labels = synthetic_shapes(20, size=32, classes=10, seed=0)
        assert images.shape == (20, 32, 32, 3)
        assert images.dtype == np.float32
        assert images.min() >= 0.0 and images.max() <= 1.0
        assert labels.shape == (20,)

    def test_deterministic_per_seed(self):
        a_img, a_lab = synthetic_shapes(10, seed=5)
        b_img, b_lab = synthetic_shapes(10, seed=5)
        assert np.array_equal(a_img, b_img)
        assert np.array_equal(a_lab, b_lab)

    def test_seed_changes_pixels(self):
        a_img, _ = synthetic_shapes(4, seed=1)
        b_img, _ = synthetic_shapes(4, seed=2)
        assert not np.array_equal(a_img, b_img)

    def test_prefix_stability(self):
        # drawing more images must not disturb the ones already drawn
        small, small_lab = synthetic_shapes(5, seed=3)
        large, large_lab = synthetic_shapes(12, seed=3)
        assert np.array_equal(large[:5], small)
        assert np.array_equal(large_lab[:5], small_lab)

    def test_balanced_labels(self):
        _, labels = synthetic_shapes(50, classes=10, seed=0)
        counts = np.bincount(labels, minlength=10)
        assert np.array_equal(counts, np.full(10, 5))

    def test_classes_are_visually_distinct(self):
        # same slot, different class: the renders must differ
        images, labels = synthetic_shapes(10, classes=10, seed=7)
        assert len(set(labels.tolist())) == 10
        flat = images.reshape(10, -1)
        for i in range(10):
            for j in range(i + 1, 10):
                assert not np.array_equal(flat[i], flat[j])

    def test_class_count_validation(self):
        with pytest.raises(ValueError, match="classes"):
            synthetic_shapes(4, classes=len(SHAPE_NAMES) + 1)
        with pytest.raises(ValueError, match="divisible"):
            synthetic_shapes(4, size=30)

    def test_other_sizes(self):
        images, _ = synthetic_shapes(3, size=16, seed=0)
        assert images.shape == (3, 16, 16, 3)


class TestImageDir:
    def test_loads_and_resizes(self, tmp_path):
        from skimage import io as skio
        rng = np.random.default_rng(0)
        for i in range(3):
            img = (rng.random((48, 40, 3)) * 255).astype(np.uint8)
            skio.imsave(tmp_path / f"img{i}.png", img)
        out = load_image_dir(tmp_path, size=32)
        assert out.shape == (3, 32, 32, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_empty_dir_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="no images"):
            load_image_dir(tmp_path)
