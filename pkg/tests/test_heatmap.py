"""Tests for boxes, crops, Gaussian targets, decoding and flip testing."""

import numpy as np
import pytest
from affine import Affine

from hrpose.errors import ConfigError, ShapeError
from hrpose.heatmap import (
    AugmentationConfig, HeatmapPoseEstimator, HeatmapSet, apply_affine, box_from_keypoints,
    crop_affine, crop_transform, decode, decode_maps, extend_box_to_aspect, flip_average,
    flip_keypoints, generate_target, half_body_transform, instance_score, prepare_training_sample,
    unflip_maps, weighted_heatmap_loss,
)
from hrpose.metrics import PersonInstance
from hrpose.tensor import Tensor


SYNTH_POSE = np.array([[20.0, 32.0], [8.0, 16.0], [40.0, 16.0], [12.0, 56.0], [36.0, 56.0]])


class TestBoxes:

    def test_wide_box_grows_in_height(self):
        box = extend_box_to_aspect((0, 0, 30, 30), 4.0 / 3.0)
        assert box.center == (15.0, 15.0)
        assert box.scale == pytest.approx((30.0, 40.0))

    def test_tall_box_grows_in_width(self):
        box = extend_box_to_aspect((10, 10, 30, 80), 4.0 / 3.0)
        assert box.scale == pytest.approx((60.0, 80.0))

    def test_degenerate_box(self):
        with pytest.raises(ShapeError):
            extend_box_to_aspect((0, 0, 0, 10))

    def test_box_from_labeled_keypoints(self):
        keypoints = np.array([[10.0, 10.0], [30.0, 50.0], [500.0, 500.0]])
        box = box_from_keypoints(keypoints, np.array([2, 1, 0]), extension=0.5)
        assert box == pytest.approx((5.0, 0.0, 30.0, 60.0))

    def test_box_from_unlabeled_keypoints(self):
        assert box_from_keypoints(np.zeros((3, 2)), np.zeros(3), 0.15) is None


class TestCrop:

    def test_center_maps_to_output_center(self):
        box = extend_box_to_aspect((100, 50, 60, 80))
        transform = crop_transform(box, (256, 192), rotation=30.0, scale_jitter=1.2)
        np.testing.assert_allclose(apply_affine(transform, np.array(box.center)), (96.0, 128.0), atol=1e-9)

    def test_inverse_round_trip(self, rng):
        box = extend_box_to_aspect((20, 40, 90, 100))
        transform = crop_transform(box, (64, 48), rotation=-17.0, scale_jitter=0.8, flip=True)
        points = rng.uniform(0, 200, size=(10, 2))
        restored = apply_affine(~transform, apply_affine(transform, points))
        np.testing.assert_allclose(restored, points, atol=1e-3)

    def test_flip_mirrors_columns(self):
        box = extend_box_to_aspect((0, 0, 48, 64))
        plain = crop_transform(box, (64, 48))
        flipped = crop_transform(box, (64, 48), flip=True)
        point = np.array([10.0, 20.0])
        x_plain = apply_affine(plain, point)[0]
        assert apply_affine(flipped, point)[0] == pytest.approx(47.0 - x_plain)

    def test_crop_identity_copies_pixels(self):
        image = np.zeros((64, 48, 3), dtype=np.uint8)
        image[32, 24] = 255
        crop = crop_affine(image, extend_box_to_aspect((0, 0, 48, 64)), (64, 48))
        assert crop.image.shape == (64, 48, 3)
        assert crop.image[32, 24, 0] == 255
        assert crop.tensor().shape == (1, 3, 64, 48)

    def test_invalid_scale_jitter(self):
        with pytest.raises(ShapeError):
            crop_transform(extend_box_to_aspect((0, 0, 48, 64)), (64, 48), scale_jitter=0.0)


class TestTargets:

    def test_unit_peak_at_rounded_location(self):
        target = generate_target(np.array([[5.4, 3.6]]), np.array([2]), (16, 12))
        assert target.maps.shape == (1, 1, 16, 12)
        assert target.maps[0, 0, 4, 5] == pytest.approx(1.0)
        assert target.maps[0, 0].max() == pytest.approx(1.0)

    def test_truncated_beyond_three_sigma(self):
        target = generate_target(np.array([[6.0, 8.0]]), np.array([2]), (16, 12), sigma=1.0)
        # squared distance 10 > 9
        assert target.maps[0, 0, 9, 9] == 0.0
        assert target.maps[0, 0, 8, 9] > 0.0

    def test_unlabeled_and_outside_get_zero_weight(self):
        keypoints = np.array([[3.0, 3.0], [3.0, 3.0], [40.0, 3.0]])
        target = generate_target(keypoints, np.array([2, 0, 1]), (16, 12))
        np.testing.assert_array_equal(target.weights, [[1.0, 0.0, 0.0]])
        assert target.maps[0, 1].max() == 0.0
        assert target.maps[0, 2].max() == 0.0

    def test_loss_ignores_zero_weight_channels(self):
        target = generate_target(np.array([[3.0, 3.0], [5.0, 5.0]]), np.array([2, 0]), (8, 8))
        pred = np.zeros((1, 2, 8, 8), dtype=np.float32)
        pred[0, 1] = 10.0
        loss = weighted_heatmap_loss(Tensor(pred), target).item()
        expected = float((target.maps[0, 0] ** 2).sum()) / pred.size
        assert loss == pytest.approx(expected, rel=1e-5)


class TestDecode:

    def test_quarter_offset_toward_larger_neighbour(self):
        maps = np.zeros((1, 1, 5, 5))
        maps[0, 0, 2, 2] = 1.0
        maps[0, 0, 2, 3] = 0.5
        maps[0, 0, 2, 1] = 0.2
        x, y, confidence = decode_maps(maps)[0, 0]
        assert (x, y, confidence) == pytest.approx((2.25, 2.0, 1.0))

    def test_no_offset_at_border(self):
        maps = np.zeros((1, 1, 4, 4))
        maps[0, 0, 1, 0] = 1.0
        maps[0, 0, 1, 1] = 0.9
        x, y, _ = decode_maps(maps)[0, 0]
        assert (x, y) == (0.0, 1.0)

    def test_first_maximum_wins(self):
        maps = np.zeros((1, 1, 4, 4))
        maps[0, 0, 1, 3] = 1.0
        maps[0, 0, 2, 0] = 1.0
        x, y, _ = decode_maps(maps)[0, 0]
        assert (x, y) == (3.0, 1.0)

    def test_target_round_trip(self):
        rng = np.random.default_rng(2024)
        height, width = 64, 48
        keypoints = rng.uniform((0.0, 0.0), (width - 0.5, height - 0.5), size=(1000, 2))
        target = generate_target(keypoints, np.full(1000, 2), (height, width))
        decoded = decode_maps(target.maps)[0, :, :2]
        np.testing.assert_array_equal(decoded, np.floor(keypoints + 0.5))
        assert np.abs(decoded - keypoints).max() <= 0.5

    def test_decode_applies_inverse(self):
        maps = np.zeros((1, 1, 5, 5))
        maps[0, 0, 3, 1] = 1.0
        result = decode(HeatmapSet(maps=maps, inverse=[Affine.translation(10, 20) * Affine.scale(4)]))
        np.testing.assert_allclose(result[0, 0, :2], (14.0, 32.0))

    def test_decode_empty(self):
        with pytest.raises(ShapeError):
            decode(HeatmapSet(maps=np.zeros((0, 1, 4, 4))))


class TestFlip:

    def test_flip_keypoints_swaps_pairs(self, synth_schema):
        flipped, visibility = flip_keypoints(SYNTH_POSE, np.array([2, 2, 1, 2, 0]), 48, synth_schema.flip_pairs)
        np.testing.assert_allclose(flipped[0], (27.0, 32.0))
        # the right hand moves into the left-hand channel
        np.testing.assert_allclose(flipped[1], (7.0, 16.0))
        np.testing.assert_array_equal(visibility, [2, 1, 2, 0, 2])

    def test_unflip_with_and_without_shift(self):
        maps = np.zeros((1, 3, 1, 4))
        maps[0, 1, 0] = [1, 2, 3, 4]
        maps[0, 2, 0] = [5, 6, 7, 8]
        np.testing.assert_array_equal(unflip_maps(maps, [(1, 2)], shift=False)[0, 1, 0], [8, 7, 6, 5])
        np.testing.assert_array_equal(unflip_maps(maps, [(1, 2)], shift=True)[0, 1, 0], [8, 8, 7, 6])

    def test_overlapping_pairs_rejected(self):
        with pytest.raises(ConfigError):
            unflip_maps(np.zeros((1, 3, 2, 2)), [(0, 1), (1, 2)])

    def test_mirror_equivariant_model_is_unchanged(self, rng):
        image = Tensor(rng.normal(size=(2, 3, 8, 6)).astype(np.float32))
        averaged = flip_average(lambda t: t, image, flip_pairs=(), shift=False)
        np.testing.assert_allclose(averaged.maps, image.data, atol=1e-5)


class TestAugmentation:

    def test_half_body_selects_upper_body(self, synth_schema):
        config = AugmentationConfig.for_schema(synth_schema, half_body_prob=1.0, half_body_min_visible=3)
        keypoints = np.array([[10.0, 0.0], [0.0, 10.0], [20.0, 10.0], [5.0, 40.0], [15.0, 40.0]])
        box = extend_box_to_aspect((0, 0, 20, 40))
        result = half_body_transform(keypoints, np.full(5, 2), box, config, np.random.default_rng(0))
        assert result.center == pytest.approx((10.0, 5.0))
        assert result.scale == pytest.approx((30.0, 40.0))

    def test_half_body_needs_enough_keypoints(self, synth_schema):
        config = AugmentationConfig.for_schema(synth_schema, half_body_prob=1.0)
        box = extend_box_to_aspect((0, 0, 20, 40))
        result = half_body_transform(SYNTH_POSE, np.full(5, 2), box, config, np.random.default_rng(0))
        assert result is box

    def test_training_sample_without_augmentation(self, synth_schema):
        instance = PersonInstance(keypoints=SYNTH_POSE, visibility=np.full(5, 2), box=(0.0, 0.0, 48.0, 64.0))
        config = AugmentationConfig.for_schema(synth_schema, enabled=False)
        sample = prepare_training_sample(
            np.zeros((64, 48, 3), dtype=np.uint8), instance, config, (64, 48), np.random.default_rng(0)
        )
        assert sample.image.shape == (64, 48, 3)
        assert sample.target.maps.shape == (1, 5, 16, 12)
        np.testing.assert_allclose(decode(sample.target)[0, :, :2], SYNTH_POSE, atol=1e-9)

    def test_instance_score_modes(self):
        confidences = np.array([0.5, 1.0])
        assert instance_score(confidences) == pytest.approx(0.75)
        assert instance_score(confidences, box_score=0.5, mode='box_product') == pytest.approx(0.375)
        with pytest.raises(ConfigError):
            instance_score(confidences, mode='max')


class TestEstimator:

    def test_estimate_maps_peaks_into_image(self, synth_schema):
        def model(batch):
            maps = np.zeros((batch.shape[0], 5, 16, 12), dtype=np.float32)
            maps[:, :, 8, 6] = 0.9
            return Tensor(maps)

        estimator = HeatmapPoseEstimator(model=model, input_size=(64, 48), schema=synth_schema, flip_test=False)
        poses = estimator.estimate(np.zeros((64, 48, 3), dtype=np.uint8), [(0.0, 0.0, 48.0, 64.0)])
        assert len(poses) == 1
        np.testing.assert_allclose(poses[0].keypoints, np.tile([24.0, 32.0], (5, 1)), atol=1e-9)
        assert poses[0].score == pytest.approx(0.9)
        assert poses[0].area == pytest.approx(48.0 * 64.0)

    def test_no_boxes(self, synth_schema):
        estimator = HeatmapPoseEstimator(model=lambda t: t, input_size=(64, 48), schema=synth_schema)
        assert estimator.estimate(np.zeros((64, 48, 3), dtype=np.uint8), []) == []
