"""Tests for run configuration, the training loop and prediction on synthetic data."""

import numpy as np
import pytest

from hrpose.builder import HRNetSpec
from hrpose.errors import ConfigError
from hrpose.heatmap import AugmentationConfig
from hrpose.loader import load_checkpoint
from hrpose.metrics import coco_ap_suite
from hrpose.optim import LrSchedule
from hrpose.synthetic import SyntheticSpec, generate_synthetic
from hrpose.trainer import RunConfig, load_run_config, predict, run_config_from_mapping, train


@pytest.fixture
def synthetic_data():
    dataset = generate_synthetic(SyntheticSpec(num_images=4), seed=0)
    return dict(enumerate(dataset.images)), dataset.annotations


def desk_config(desk_spec, synth_schema, tmp_path, **overrides):
    values = dict(
        spec=desk_spec,
        augmentation=AugmentationConfig.for_schema(synth_schema, enabled=False),
        schedule=LrSchedule(base_lr=1e-3, milestones=[], total_epochs=2),
        input_size=(64, 64),
        batch_size=4,
        schema='synth5',
        checkpoint_dir=tmp_path / "checkpoints",
    )
    values.update(overrides)
    return RunConfig(**values)


class TestRunConfig:

    def test_input_size_must_fit_the_network(self, desk_spec, synth_schema, tmp_path):
        with pytest.raises(ConfigError):
            desk_config(desk_spec, synth_schema, tmp_path, input_size=(64, 48))

    def test_batch_norm_needs_a_batch(self, desk_spec, synth_schema, tmp_path):
        with pytest.raises(ConfigError):
            desk_config(desk_spec, synth_schema, tmp_path, batch_size=1)

    def test_schema_must_match_network(self, synth_schema, tmp_path):
        with pytest.raises(ConfigError):
            desk_config(HRNetSpec.preset('w8'), synth_schema, tmp_path)

    def test_from_mapping(self):
        config = run_config_from_mapping({
            'model.arch': 'w8',
            'data.schema': 'synth5',
            'data.input_size': '64x64',
            'train.batch_size': '4',
            'train.total_epochs': '3',
            'train.milestones': '1:1e-4',
            'augment.enabled': 'false',
        })
        assert config.spec.width == 8
        assert config.spec.num_keypoints == 5
        assert config.schedule.as_list() == [1e-3, 1e-4, 1e-4]
        assert config.augmentation.enabled is False
        assert config.input_size == (64, 64)

    def test_invalid_number(self):
        with pytest.raises(ConfigError):
            run_config_from_mapping({'model.arch': 'w8', 'data.schema': 'synth5', 'train.batch_size': 'two'})

    def test_file_with_environment_override(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("model.arch = w8\ndata.schema = synth5\ndata.input_size = 64x64\ntrain.seed = 1\n")
        config = load_run_config(path, environ={'HRPOSE_TRAIN_SEED': '7'})
        assert config.seed == 7

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("train.sed = 1\n")
        with pytest.raises(ConfigError):
            load_run_config(path, environ={})


class TestTraining:

    def test_short_run_writes_checkpoints(self, desk_spec, synth_schema, tmp_path, synthetic_data):
        images, annotations = synthetic_data
        result = train(desk_config(desk_spec, synth_schema, tmp_path), images, annotations)
        assert result.steps == 2
        assert len(result.epoch_losses) == 2
        assert all(np.isfinite(result.losses))
        assert [path.name for path in result.checkpoints] == ['epoch_000', 'epoch_001']
        _, metadata = load_checkpoint(result.checkpoints[-1])
        assert metadata['epoch'] == 1
        assert metadata['input_size'] == [64, 64]

    def test_same_seed_same_losses(self, desk_spec, synth_schema, tmp_path, synthetic_data):
        images, annotations = synthetic_data
        config = desk_config(desk_spec, synth_schema, tmp_path, max_steps=1,
                             augmentation=AugmentationConfig.for_schema(synth_schema))
        first = train(config, images, annotations, save_checkpoints=False)
        second = train(config, images, annotations, save_checkpoints=False)
        assert first.losses == second.losses
        assert first.checkpoints == []

    def test_needs_two_instances(self, desk_spec, synth_schema, tmp_path, synthetic_data):
        images, annotations = synthetic_data
        with pytest.raises(ConfigError):
            train(desk_config(desk_spec, synth_schema, tmp_path), {0: images[0]}, annotations, save_checkpoints=False)

    def test_predict_returns_one_pose_per_box(self, desk_spec, synth_schema, tmp_path, synthetic_data):
        images, annotations = synthetic_data
        result = train(desk_config(desk_spec, synth_schema, tmp_path, max_steps=1), images, annotations,
                       save_checkpoints=False)
        detections = predict(result.model.eval(), images, annotations, (64, 64))
        assert sorted(detections) == [0, 1, 2, 3]
        for image_id, poses in detections.items():
            assert len(poses) == 1
            assert poses[0].image_id == image_id
            assert poses[0].keypoints.shape == (5, 2)
            np.testing.assert_allclose(poses[0].falloff, synth_schema.falloff)

    @pytest.mark.slow
    def test_overfits_the_synthetic_set(self, desk_spec, synth_schema, tmp_path):
        dataset = generate_synthetic(SyntheticSpec(num_images=16), seed=0)
        images = dict(enumerate(dataset.images))
        config = desk_config(desk_spec, synth_schema, tmp_path, max_steps=500,
                             schedule=LrSchedule(base_lr=1e-3, milestones=[], total_epochs=125))
        result = train(config, images, dataset.annotations, save_checkpoints=False)
        assert result.steps <= 500
        assert result.losses[-1] < 1e-4
        detections = predict(result.model.eval(), images, dataset.annotations, (64, 64))
        evaluation = coco_ap_suite(dataset.annotations.by_image(), detections, synth_schema.falloff)
        assert evaluation.AP50 == pytest.approx(1.0)
