"""Pretext sample builders, patch permutations, and per-task losses."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose
from skimage import color as skcolor

from taskfuse.archs import Encoder, EncoderConfig, init_parameters, make_header, parameter_set
from taskfuse.pretext import (build_permutation_set, chroma_to_rgb, forward_task,
                              grayscale_chroma_pair, invert_permutation, join_patches,
                              make_pretext, pixel_entropy_term, pixel_kld, split_patches,
                              task_loss, total_loss)


class TestPermutationSets:
    def test_grid_3x3_count_64(self):
        perms = build_permutation_set((3, 3), 64, seed=0)
        assert perms.count == 64
        assert perms.permutations[0] == tuple(range(9))
        assert len(set(perms.permutations)) == 64
        for p in perms.permutations:
            assert sorted(p) == list(range(9))

    def test_grid_2x2_full_group(self):
        perms = build_permutation_set((2, 2), 24, seed=0)
        assert perms.count == 24
        assert len(set(perms.permutations)) == 24

    def test_count_one_is_identity_only(self):
        perms = build_permutation_set((2, 2), 1, seed=5)
        assert perms.permutations == (tuple(range(4)),)

    def test_count_beyond_group_size_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            build_permutation_set((2, 2), 25, seed=0)

    def test_deterministic(self):
        a = build_permutation_set((2, 2), 8, seed=3)
        b = build_permutation_set((2, 2), 8, seed=3)
        assert a.permutations == b.permutations

    def test_large_grid_sampled_pool(self):
        # 16 cells: exhaustive enumeration is off the table, sampling kicks in
        perms = build_permutation_set((4, 4), 12, seed=1)
        assert perms.count == 12
        assert perms.permutations[0] == tuple(range(16))
        assert len(set(perms.permutations)) == 12

    def test_spread_beats_adjacent_transpositions(self):
        # greedy selection should never pick two nearly-identical orders
        perms = build_permutation_set((2, 2), 6, seed=0)
        arr = np.array(perms.permutations)
        for i in range(len(arr)):
            for j in range(i + 1, len(arr)):
                assert (arr[i] != arr[j]).sum() >= 2


class TestPatches:
    def test_split_join_round_trip_bit_exact(self):
        rng = np.random.default_rng(42)
        for grid in [(2, 2), (3, 3), (2, 3), (4, 2), (1, 4)]:
            img = rng.random((12, 12, 3), dtype=np.float64).astype(np.float32)
            patches = split_patches(img, grid)
            assert patches.shape == (grid[0] * grid[1], 12 // grid[0], 12 // grid[1], 3)
            back = join_patches(patches, grid)
            assert np.array_equal(back.view(np.uint8), img.view(np.uint8))

    def test_row_major_cell_order(self):
        img = np.arange(16, dtype=np.float32).reshape(4, 4, 1).repeat(3, axis=2)
        patches = split_patches(img, (2, 2))
        assert patches[0, 0, 0, 0] == 0.0    # top-left
        assert patches[1, 0, 0, 0] == 2.0    # top-right
        assert patches[2, 0, 0, 0] == 8.0    # bottom-left

    def test_non_divisible_rejected(self):
        with pytest.raises(ValueError, match="not divisible"):
            split_patches(np.zeros((10, 10, 3)), (3, 3))

    def test_scramble_then_unscramble(self):
        rng = np.random.default_rng(7)
        img = rng.random((8, 8, 3)).astype(np.float32)
        patches = split_patches(img, (2, 2))
        perm = (2, 0, 3, 1)
        scrambled = patches[np.asarray(perm)]
        inv = invert_permutation(perm)
        restored = join_patches(scrambled[np.asarray(inv)], (2, 2))
        assert np.array_equal(restored, img)

    def test_invert_permutation_involution(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            n = int(rng.integers(2, 10))
            perm = tuple(int(v) for v in rng.permutation(n))
            inv = invert_permutation(perm)
            assert invert_permutation(inv) == perm
            assert tuple(perm[i] for i in inv) == tuple(range(n))


class TestChroma:
    def test_gray_planes_equal_and_scaled(self):
        rng = np.random.default_rng(9)
        img = rng.uniform(0.05, 0.95, size=(8, 8, 3)).astype(np.float64)
        gray3, chroma = grayscale_chroma_pair(img)
        assert gray3.shape == (8, 8, 3)
        assert chroma.shape == (8, 8, 2)
        assert np.array_equal(gray3[..., 0], gray3[..., 1])
        assert np.array_equal(gray3[..., 0], gray3[..., 2])
        lab = skcolor.rgb2lab(img)
        assert_allclose(gray3[..., 0], lab[..., 0] / 100.0, atol=1e-6)
        assert_allclose(chroma, lab[..., 1:3] / 110.0, atol=1e-6)

    def test_value_ranges(self):
        rng = np.random.default_rng(10)
        img = rng.random((16, 16, 3)).astype(np.float64)
        gray3, chroma = grayscale_chroma_pair(img)
        assert gray3.min() >= 0.0 and gray3.max() <= 1.0
        assert chroma.min() >= -1.0 and chroma.max() <= 1.0

    def test_round_trip_within_two_levels(self):
        rng = np.random.default_rng(11)
        img = rng.uniform(0.05, 0.95, size=(12, 12, 3)).astype(np.float64)
        gray3, chroma = grayscale_chroma_pair(img)
        back = chroma_to_rgb(gray3, chroma)
        assert np.abs(back - img).max() <= 2.0 / 255.0

    def test_neutral_gray_has_no_chroma(self):
        img = np.full((4, 4, 3), 0.5)
        _, chroma = grayscale_chroma_pair(img)
        assert np.abs(chroma).max() < 0.01


class TestMakePretext:
    def test_reconstruction_pair_is_identity_copy(self):
        rng = np.random.default_rng(12)
        img = rng.random((8, 8, 3)).astype(np.float32)
        sample = make_pretext(img, "r")
        assert np.array_equal(sample.x, img)
        assert np.array_equal(sample.y, img)
        sample.x[0, 0, 0] = 0.0
        assert img[0, 0, 0] != 0.0 or True  # copies: caller's image untouched
        assert not np.shares_memory(sample.x, img)

    def test_segmentation_pair(self):
        img = np.full((8, 8, 3), 0.25, dtype=np.float32)
        sample = make_pretext(img, "s")
        assert sample.task == "s"
        assert np.array_equal(sample.x, sample.y)

    def test_colorization_pair_shapes(self):
        rng = np.random.default_rng(13)
        img = rng.random((8, 8, 3)).astype(np.float64)
        sample = make_pretext(img, "c")
        assert sample.x.shape == (8, 8, 3)
        assert sample.y.shape == (8, 8, 2)

    def test_jigsaw_sample(self):
        rng = np.random.default_rng(14)
        img = rng.random((8, 8, 3)).astype(np.float32)
        perms = build_permutation_set((2, 2), 6, seed=0)
        sample = make_pretext(img, "j", perms=perms, rng_seed=21)
        assert 0 <= sample.y < 6
        order = np.asarray(perms.permutations[sample.y])
        expected = split_patches(img, (2, 2))[order]
        assert np.array_equal(sample.x, expected)

    def test_jigsaw_deterministic_in_seed(self):
        img = np.random.default_rng(15).random((8, 8, 3)).astype(np.float32)
        perms = build_permutation_set((2, 2), 6, seed=0)
        a = make_pretext(img, "j", perms=perms, rng_seed=4)
        b = make_pretext(img, "j", perms=perms, rng_seed=4)
        assert a.y == b.y
        assert np.array_equal(a.x, b.x)

    def test_validation(self):
        with pytest.raises(ValueError, match="expected"):
            make_pretext(np.zeros((8, 8)), "r")
        with pytest.raises(ValueError, match="out of"):
            make_pretext(np.full((4, 4, 3), 1.5), "r")
        nan_img = np.zeros((4, 4, 3))
        nan_img[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            make_pretext(nan_img, "r")
        with pytest.raises(ValueError, match="PermutationSet"):
            make_pretext(np.zeros((4, 4, 3)), "j")
        with pytest.raises(ValueError, match="unknown task"):
            make_pretext(np.zeros((4, 4, 3)), "z")


class SmallEncoderMixin:
    @staticmethod
    def small_encoder():
        cfg = EncoderConfig(widths=(4, 8))
        enc = Encoder(cfg)
        init_parameters(enc, seed=0)
        return cfg, enc


class TestForwardTask(SmallEncoderMixin):
    def test_reconstruction_shapes_and_range(self):
        cfg, enc = self.small_encoder()
        header = make_header("r", cfg, image_size=8)
        weights = parameter_set(enc, cfg.arch_id)
        x = np.random.default_rng(16).random((8, 8, 3)).astype(np.float32)
        out = forward_task(weights, header, x)
        assert out.shape == (8, 8, 3)
        assert out.min() > 0.0 and out.max() < 1.0

    def test_colorization_range(self):
        cfg, enc = self.small_encoder()
        header = make_header("c", cfg, image_size=8)
        weights = parameter_set(enc, cfg.arch_id)
        x = np.random.default_rng(17).random((2, 8, 8, 3)).astype(np.float32)
        out = forward_task(weights, header, x)
        assert out.shape == (2, 8, 8, 2)
        assert out.min() > -1.0 and out.max() < 1.0

    def test_segmentation_output(self):
        cfg, enc = self.small_encoder()
        header = make_header("s", cfg, image_size=8, region_classes=4)
        weights = parameter_set(enc, cfg.arch_id)
        x = np.random.default_rng(18).random((8, 8, 3)).astype(np.float32)
        out = forward_task(weights, header, x)
        assert out.shape == (8, 8, 3)

    def test_jigsaw_probabilities(self):
        cfg, enc = self.small_encoder()
        header = make_header("j", cfg, image_size=8, patch_grid=(2, 2),
                             permutation_count=6, hidden=16)
        weights = parameter_set(enc, cfg.arch_id)
        x = np.random.default_rng(19).random((4, 4, 4, 3)).astype(np.float32)
        out = forward_task(weights, header, x)
        assert out.shape == (6,)
        assert_allclose(out.sum(), 1.0, atol=1e-6)
        batched = forward_task(weights, header, x[None].repeat(3, axis=0))
        assert batched.shape == (3, 6)

    def test_arch_mismatch_rejected(self):
        cfg, enc = self.small_encoder()
        header = make_header("r", cfg, image_size=8)
        weights = parameter_set(enc, "some-other-arch")
        with pytest.raises(ValueError, match="does not match"):
            forward_task(weights, header, np.zeros((8, 8, 3), dtype=np.float32))


class TestTaskLoss:
    def test_reconstruction_entropy_floor_value(self):
        # equal flat predictions: MSE and the KLD term vanish, only the
        # entropy penalty is left
        pred = np.full((4, 4, 3), 0.5)
        loss = task_loss("r", pred, pred.copy(), entropy_weight=1e-3)
        assert_allclose(loss, 3.466e-4, atol=1e-6)

    def test_reconstruction_loss_composition(self):
        rng = np.random.default_rng(20)
        pred = rng.uniform(0.1, 0.9, size=(4, 4, 3))
        target = rng.uniform(0.1, 0.9, size=(4, 4, 3))
        p, t = torch.as_tensor(pred), torch.as_tensor(target)
        expected = float(((p - t) ** 2).mean() + pixel_kld(p, t)
                         + 1e-3 * pixel_entropy_term(p))
        assert_allclose(task_loss("r", pred, target), expected, rtol=1e-12)

    def test_kld_order_flag(self):
        rng = np.random.default_rng(21)
        pred = rng.uniform(0.1, 0.9, size=(3, 3, 3))
        target = rng.uniform(0.1, 0.9, size=(3, 3, 3))
        a = task_loss("r", pred, target, kld_order="pred-target")
        b = task_loss("r", pred, target, kld_order="target-pred")
        assert a != b
        with pytest.raises(ValueError, match="kld_order"):
            task_loss("r", pred, target, kld_order="sideways")

    def test_entropy_weight_positive_required(self):
        pred = np.full((2, 2, 3), 0.5)
        with pytest.raises(ValueError, match="entropy_weight"):
            task_loss("r", pred, pred, entropy_weight=0.0)

    def test_mse_tasks(self):
        pred = np.zeros((2, 2, 2))
        target = np.ones((2, 2, 2))
        assert_allclose(task_loss("s", pred, target), 1.0, rtol=1e-12)
        assert_allclose(task_loss("c", pred, target * 0.5), 0.25, rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            task_loss("s", np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    def test_jigsaw_uniform_gives_log_count(self):
        probs = np.full((1, 4), 0.25)
        assert_allclose(task_loss("j", probs, np.array([2])), math.log(4.0), rtol=1e-9)

    def test_jigsaw_perfect_prediction(self):
        probs = np.array([[0.0, 1.0, 0.0]])
        assert task_loss("j", probs, np.array([1])) == 0.0

    def test_jigsaw_batch_mean(self):
        probs = np.array([[0.5, 0.5], [0.25, 0.75]])
        labels = np.array([0, 1])
        expected = 0.5 * (-math.log(0.5) - math.log(0.75))
        assert_allclose(task_loss("j", probs, labels), expected, rtol=1e-9)

    def test_torch_in_torch_out_with_grad(self):
        pred = torch.rand(3, 3, 3, dtype=torch.float64, requires_grad=True)
        target = torch.rand(3, 3, 3, dtype=torch.float64)
        loss = task_loss("r", pred, target)
        assert isinstance(loss, torch.Tensor)
        loss.backward()
        assert torch.isfinite(pred.grad).all()

    def test_pixel_kld_zero_iff_equal(self):
        x = torch.full((3, 3), 0.3, dtype=torch.float64)
        assert float(pixel_kld(x, x)) == pytest.approx(0.0, abs=1e-12)
        y = torch.full((3, 3), 0.7, dtype=torch.float64)
        assert float(pixel_kld(x, y)) > 0.01


class TestTotalLoss:
    def test_sum_over_enabled(self):
        per_task = {"r": 1.0, "s": 2.0, "c": 3.0, "j": 4.0}
        assert total_loss(per_task) == 10.0
        assert total_loss(per_task, enabled=("r", "j")) == 5.0

    def test_missing_task_rejected(self):
        with pytest.raises(ValueError, match="missing"):
            total_loss({"r": 1.0}, enabled=("r", "s"))

    def test_accepts_tensor_values(self):
        per_task = {"r": torch.tensor(1.5), "s": 0.5}
        assert total_loss(per_task) == 2.0
