"""
Run configuration, training loop and prediction.

A run is described by a key-value file with `model.`, `train.`, `augment.`
and `data.` sections; every key can be overridden from the environment.
All randomness flows from one seed through the named streams of
utils.spawn_streams.
"""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import attrs
import numpy as np

from .builder import SPEC_KEYS, HRNet, HRNetSpec, build_hrnet, spec_from_mapping
from .config import (
    CHECKPOINT_DIR, BOX_PROPAGATION_EXTENSION, FLIP_PROB, HALF_BODY_PROB, HEATMAP_SIGMA,
    HEATMAP_STRIDE, ROTATION_RANGE, SCALE_RANGE, KeypointSchema, apply_env_overrides,
    check_known_keys, parse_bool, parse_float_pair, parse_milestones, parse_size,
    read_key_value_file
)
from .errors import ConfigError, TrainingDivergedError
from .exporter import save_checkpoint
from .heatmap import (
    AugmentationConfig, HeatmapPoseEstimator, HeatmapSet, box_from_keypoints, images_to_tensor,
    prepare_training_sample, weighted_heatmap_loss
)
from .loader import AnnotationSet
from .metrics import PersonInstance
from .optim import AdamState, LrSchedule, adam_step
from .utils import spawn_streams


logger = logging.getLogger(__name__)

TRAIN_KEYS = ('lr_preset', 'base_lr', 'milestones', 'total_epochs', 'batch_size', 'seed', 'max_steps', 'checkpoint_dir')
AUGMENT_KEYS = ('enabled', 'rotation_range', 'scale_range', 'flip_prob', 'half_body_prob')
DATA_KEYS = ('input_size', 'schema', 'annotations', 'images', 'sigma')
RUN_KEYS = (
    tuple(f"model.{key}" for key in SPEC_KEYS)
    + tuple(f"train.{key}" for key in TRAIN_KEYS)
    + tuple(f"augment.{key}" for key in AUGMENT_KEYS)
    + tuple(f"data.{key}" for key in DATA_KEYS)
)


@attrs.define(frozen=True)
class RunConfig:
    """
    Everything one training run needs.

    Attributes:
        spec: Network spec
        augmentation: Training-time augmentation
        schedule: Learning-rate schedule (epochs)
        input_size: Network input (height, width), divisible by 32
        batch_size: Instances per step (at least 2 so batch-norm sees a batch)
        seed: Root seed for initialization, augmentation and data order
        schema: Keypoint schema name
        sigma: Target Gaussian standard deviation in heatmap pixels
        max_steps: Optional cap on optimizer steps
        annotations: Annotation file
        images: Image directory
        checkpoint_dir: Where per-epoch checkpoints go (None disables them)
    """

    spec: HRNetSpec = attrs.field(factory=lambda: HRNetSpec.preset('w32'))
    augmentation: AugmentationConfig = attrs.field(factory=lambda: AugmentationConfig.for_schema(KeypointSchema.preset('coco')))
    schedule: LrSchedule = attrs.field(factory=lambda: LrSchedule.preset('coco'))
    input_size: Tuple[int, int] = attrs.field(default=(256, 192), converter=tuple)
    batch_size: int = 32
    seed: int = 0
    schema: str = 'coco'
    sigma: float = HEATMAP_SIGMA
    max_steps: Optional[int] = None
    annotations: Optional[Path] = None
    images: Optional[Path] = None
    checkpoint_dir: Optional[Path] = CHECKPOINT_DIR

    def __attrs_post_init__(self):
        multiple = self.spec.input_multiple
        if self.input_size[0] % multiple or self.input_size[1] % multiple:
            raise ConfigError(f"Input size {self.input_size[0]}x{self.input_size[1]} must be divisible by {multiple}")
        if self.batch_size < 2:
            raise ConfigError(f"Training needs batch_size >= 2 for batch statistics, got {self.batch_size}")
        keypoint_schema = KeypointSchema.preset(self.schema)
        if keypoint_schema.num_keypoints != self.spec.num_keypoints:
            raise ConfigError(
                f"Schema '{self.schema}' has {keypoint_schema.num_keypoints} keypoints "
                f"but the network predicts {self.spec.num_keypoints}"
            )

    @property
    def keypoint_schema(self) -> KeypointSchema:
        return KeypointSchema.preset(self.schema)


def run_config_from_mapping(values: Mapping[str, str]) -> RunConfig:
    """Build a RunConfig from dotted raw values (after environment overrides)."""
    check_known_keys(values, RUN_KEYS, 'run config')

    def section(name: str) -> Dict[str, str]:
        prefix = f"{name}."
        return {key[len(prefix):]: value for key, value in values.items() if key.startswith(prefix)}

    model, train, augment, data = section('model'), section('train'), section('augment'), section('data')
    schema_name = data.get('schema', 'coco')
    schema = KeypointSchema.preset(schema_name)
    model.setdefault('num_keypoints', str(schema.num_keypoints))
    spec = spec_from_mapping(model)

    try:
        schedule = LrSchedule.preset(train.get('lr_preset', 'coco'))
        if 'base_lr' in train or 'milestones' in train or 'total_epochs' in train:
            schedule = LrSchedule(
                base_lr=float(train.get('base_lr', schedule.base_lr)),
                milestones=parse_milestones(train['milestones']) if 'milestones' in train else schedule.milestones,
                total_epochs=int(train.get('total_epochs', schedule.total_epochs)),
            )

        augmentation = AugmentationConfig.for_schema(
            schema,
            enabled=parse_bool(augment.get('enabled', 'true')),
            rotation_range=parse_float_pair(augment['rotation_range']) if 'rotation_range' in augment else ROTATION_RANGE,
            scale_range=parse_float_pair(augment['scale_range']) if 'scale_range' in augment else SCALE_RANGE,
            flip_prob=float(augment.get('flip_prob', FLIP_PROB)),
            half_body_prob=float(augment.get('half_body_prob', HALF_BODY_PROB)),
        )

        checkpoint_dir = train.get('checkpoint_dir')
        return RunConfig(
            spec=spec,
            augmentation=augmentation,
            schedule=schedule,
            input_size=parse_size(data.get('input_size', '256x192')),
            batch_size=int(train.get('batch_size', 32)),
            seed=int(train.get('seed', 0)),
            schema=schema_name,
            sigma=float(data.get('sigma', HEATMAP_SIGMA)),
            max_steps=int(train['max_steps']) if 'max_steps' in train else None,
            annotations=Path(data['annotations']) if 'annotations' in data else None,
            images=Path(data['images']) if 'images' in data else None,
            checkpoint_dir=Path(checkpoint_dir) if checkpoint_dir else CHECKPOINT_DIR,
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid run config value: {e}") from e


def load_run_config(path: Path, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    Load a run configuration file.

    Args:
        path: Key-value file with model./train./augment./data. keys
        environ: Environment for HRPOSE_<SECTION>_<KEY> overrides (os.environ by default)

    Raises:
        FileNotFoundError: If the file doesn't exist
        ConfigError: On unknown keys or invalid values
    """
    values = read_key_value_file(path)
    check_known_keys(values, RUN_KEYS, str(path))
    values = apply_env_overrides(values, RUN_KEYS, environ)
    config = run_config_from_mapping(values)
    logger.info(f"Loaded run config from {path}: width={config.spec.width}, "
                f"input={config.input_size[0]}x{config.input_size[1]}, batch={config.batch_size}, seed={config.seed}")
    return config


@attrs.define
class TrainingResult:
    """
    Attributes:
        model: Trained network
        losses: Loss of every optimizer step
        epoch_losses: Mean loss per epoch
        checkpoints: Checkpoint directories written, one per epoch
    """

    model: HRNet
    losses: List[float] = attrs.field(factory=list)
    epoch_losses: List[float] = attrs.field(factory=list)
    checkpoints: List[Path] = attrs.field(factory=list)

    @property
    def steps(self) -> int:
        return len(self.losses)


def _training_box(instance: PersonInstance):
    if instance.box is not None:
        return instance
    box = box_from_keypoints(instance.keypoints, instance.visibility, BOX_PROPAGATION_EXTENSION)
    return attrs.evolve(instance, box=box) if box is not None else None


def _training_instances(images: Mapping[int, np.ndarray], annotations: AnnotationSet) -> List[PersonInstance]:
    instances = []
    skipped = 0
    for instance in annotations.instances:
        prepared = _training_box(instance) if instance.num_labeled > 0 else None
        if prepared is None or instance.image_id not in images:
            skipped += 1
            continue
        instances.append(prepared)
    if skipped:
        logger.warning(f"Skipped {skipped} instances without labeled keypoints or image")
    return instances


def _batch(
    samples: Sequence[PersonInstance],
    images: Mapping[int, np.ndarray],
    config: RunConfig,
    rng: np.random.Generator
):
    prepared = [
        prepare_training_sample(images[inst.image_id], inst, config.augmentation, config.input_size,
                                rng, HEATMAP_STRIDE, config.sigma)
        for inst in samples
    ]
    inputs = images_to_tensor([sample.image for sample in prepared])
    target = HeatmapSet(
        maps=np.concatenate([sample.target.maps for sample in prepared]),
        weights=np.concatenate([sample.target.weights for sample in prepared]),
    )
    return inputs, target


def train(
    config: RunConfig,
    images: Mapping[int, np.ndarray],
    annotations: AnnotationSet,
    save_checkpoints: bool = True
) -> TrainingResult:
    """
    Train a network with Adam on weighted heatmap MSE.

    Each epoch shuffles the instances, and every batch runs augment -> crop
    -> targets -> forward -> loss -> backward -> Adam step at the epoch's
    scheduled rate. A checkpoint is written after every epoch.

    Args:
        config: Run configuration
        images: Images keyed by image id
        annotations: Instances to train on
        save_checkpoints: Write per-epoch checkpoints to config.checkpoint_dir

    Returns:
        TrainingResult

    Raises:
        TrainingDivergedError: When a step's loss is not finite
    """
    streams = spawn_streams(config.seed)
    model = build_hrnet(config.spec, rng=streams['init'])
    model.train()
    instances = _training_instances(images, annotations)
    if len(instances) < 2:
        raise ConfigError(f"Training needs at least 2 usable instances, got {len(instances)}")

    state = AdamState(lr=config.schedule.base_lr)
    result = TrainingResult(model=model)
    params = {name: param.tensor() for name, param in model.named_parameters()}
    batch_size = min(config.batch_size, len(instances))
    logger.info(f"Training on {len(instances)} instances, {model.num_parameters():,} parameters, "
                f"batch {batch_size}, {config.schedule.total_epochs} epochs")

    for epoch in range(config.schedule.total_epochs):
        state.lr = config.schedule.lr_at(epoch)
        order = streams['data_order'].permutation(len(instances))
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            # batch statistics need two samples
            if len(chunk) < 2:
                continue
            inputs, target = _batch([instances[i] for i in chunk], images, config, streams['augmentation'])

            model.zero_grad()
            loss = weighted_heatmap_loss(model(inputs), target)
            value = loss.item()
            step = len(result.losses)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"Loss became {value} at epoch {epoch}, step {step} (lr={state.lr:g})")
            loss.backward()
            adam_step(params, {name: t.grad for name, t in params.items()}, state)

            result.losses.append(value)
            epoch_losses.append(value)
            logger.debug(f"step {step} loss {value:.6g}", extra={'step': step, 'loss': value, 'lr': state.lr})
            if config.max_steps is not None and len(result.losses) >= config.max_steps:
                break

        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float('nan')
        result.epoch_losses.append(mean_loss)
        logger.info(f"Epoch {epoch}: mean loss {mean_loss:.6g} at lr {state.lr:g}",
                    extra={'epoch': epoch, 'loss': mean_loss, 'lr': state.lr})

        if save_checkpoints and config.checkpoint_dir is not None:
            path = save_checkpoint(model, Path(config.checkpoint_dir) / f"epoch_{epoch:03d}", metadata={
                'epoch': epoch, 'step': len(result.losses), 'loss': mean_loss, 'lr': state.lr,
                'seed': config.seed, 'input_size': list(config.input_size),
            })
            result.checkpoints.append(path)

        if config.max_steps is not None and len(result.losses) >= config.max_steps:
            logger.info(f"Reached max_steps={config.max_steps}")
            break

    return result


def predict(
    model: HRNet,
    images: Mapping[int, np.ndarray],
    annotations: AnnotationSet,
    input_size: Tuple[int, int],
    flip_test: bool = True,
    shift: bool = True
) -> Dict[int, List[PersonInstance]]:
    """
    Estimate poses inside the ground-truth boxes (the detector stand-in).

    Returns:
        Detections keyed by image id, with the schema's falloff attached
    """
    schema = annotations.schema
    estimator = HeatmapPoseEstimator(model, input_size, schema, flip_test=flip_test, shift=shift)
    results: Dict[int, List[PersonInstance]] = {}
    for image_id, instances in annotations.by_image().items():
        boxes = []
        for instance in instances:
            prepared = _training_box(instance)
            if prepared is not None:
                boxes.append(prepared.box)
        if not boxes or image_id not in images:
            continue
        poses = estimator.estimate(images[image_id], boxes)
        for pose in poses:
            pose.image_id = image_id
            pose.falloff = np.asarray(schema.falloff)
        results[image_id] = poses
    logger.info(f"Predicted {sum(len(p) for p in results.values())} poses on {len(results)} images")
    return results
