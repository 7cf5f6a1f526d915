"""
Command-line interface for hrpose.

Subcommands: audit, describe, train, eval, decode, track, ablate, synth.
Library errors are logged and exit with status 1; usage errors exit with 2.
"""

import functools
import json
import logging
import sys
from pathlib import Path

import attrs
import click

from .audit import ablation_report, compare_reference, cost_report, input_size_sweep
from .builder import HRNetSpec, build_hrnet, describe as describe_model, load_hrnet_spec
from .config import ARCH_PRESETS, KEYPOINT_SCHEMAS, RESULTS_DIR, KeypointSchema, parse_size
from .errors import HRPoseError
from .exporter import (
    export_cost_report, export_evaluation, export_frame, export_tracks, save_annotations,
    save_images, save_results
)
from .heatmap import HeatmapPoseEstimator
from .loader import (
    load_annotations, load_checkpoint, load_detections, load_displacement_fields, load_mpii,
    load_results, read_image, read_images
)
from .metrics import PixelRadiusRule, coco_ap_suite, pckh
from .synthetic import SyntheticSpec, generate_synthetic
from .tracking import DisplacementField, TrackingConfig, track_sequence
from .trainer import load_run_config, predict, train as run_training
from .utils import ensure_directories, format_size, setup_logging


logger = logging.getLogger(__name__)


class SizeParam(click.ParamType):
    """An HxW input size."""

    name = 'HxW'

    def convert(self, value, param, ctx):
        if isinstance(value, tuple):
            return value
        try:
            return parse_size(value)
        except HRPoseError as e:
            self.fail(str(e), param, ctx)


SIZE = SizeParam()


def handle_errors(command):
    """Turn library errors into a logged message and exit status 1."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (HRPoseError, FileNotFoundError) as e:
            logger.error(f"{type(e).__name__}: {e}")
            sys.exit(1)
    return wrapper


@click.group()
@click.option('--log-level', default='INFO', type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR']), show_default=True)
@click.option('--log-file', type=click.Path(path_type=Path), default=None, help='Also log to this file at DEBUG level.')
@click.option('--log-json', is_flag=True, help='Emit one JSON object per log line.')
def main(log_level, log_file, log_json):
    """High-resolution keypoint network toolkit."""
    setup_logging(log_level, log_file, json_lines=log_json)


@main.command()
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help='HRNet spec file; overrides --arch.')
@click.option('--arch', type=click.Choice(sorted(ARCH_PRESETS)), default='w32', show_default=True)
@click.option('--input-size', type=SIZE, default='256x192', show_default=True)
@click.option('--compare-paper', '--compare-reference', 'check_reference', is_flag=True,
              help='Exit 1 unless params and GFLOPs match the published figures.')
@click.option('--output', type=click.Path(path_type=Path), default=None, help='Directory for JSON and CSV cost reports.')
@handle_errors
def audit(config_path, arch, input_size, check_reference, output):
    """Count parameters and FLOPs of a network."""
    if config_path is not None:
        spec = load_hrnet_spec(config_path)
        # reference figures are keyed by preset name
        arch = f"w{spec.width}"
    else:
        spec = HRNetSpec.preset(arch)
    model = build_hrnet(spec, materialize=False)
    report = cost_report(model, input_size)
    click.echo(f"{arch} @ {format_size(input_size)}: {report.total_params:,} params "
               f"({report.params_m:.2f}M), {report.total_gflops:.2f} GFLOPs")
    click.echo(report.by_kind().to_string())
    if output is not None:
        export_cost_report(report, output, stem=f"cost_{arch}_{format_size(input_size)}")
    if check_reference:
        result = compare_reference(arch, input_size, report)
        click.echo(f"reference: {result['target_params_m']}M params ({result['params_deviation']:+.1%}), "
                   f"{result['target_gflops']} GFLOPs ({result['gflops_deviation']:+.1%})")
        if not result['ok']:
            click.echo("outside tolerance", err=True)
            sys.exit(1)
        click.echo("within tolerance")


@main.command()
@click.option('--arch', type=click.Choice(sorted(ARCH_PRESETS)), default='w32', show_default=True)
@click.option('--input-size', type=SIZE, default='256x192', show_default=True)
@click.option('--num-keypoints', type=int, default=17, show_default=True)
@click.option('--json-out', type=click.Path(path_type=Path), default=None)
@handle_errors
def describe(arch, input_size, num_keypoints, json_out):
    """Print the layer tree with output shapes."""
    model = build_hrnet(HRNetSpec.preset(arch, num_keypoints=num_keypoints), materialize=False)
    text, payload = describe_model(model, input_size)
    click.echo(text)
    if json_out is not None:
        json_out.parent.mkdir(parents=True, exist_ok=True)
        with open(json_out, 'w') as f:
            json.dump(payload, f, indent=2)


@main.command()
@click.option('--config', 'config_path', type=click.Path(exists=True, path_type=Path), required=True)
@click.option('--annotations', type=click.Path(exists=True, path_type=Path), default=None)
@click.option('--images', type=click.Path(exists=True, file_okay=False, path_type=Path), default=None)
@click.option('--checkpoint-dir', type=click.Path(path_type=Path), default=None)
@handle_errors
def train(config_path, annotations, images, checkpoint_dir):
    """Train a network from a run config."""
    config = load_run_config(config_path)
    if checkpoint_dir is not None:
        config = attrs.evolve(config, checkpoint_dir=checkpoint_dir)
    annotations_path = annotations or config.annotations
    images_dir = images or config.images
    if annotations_path is None or images_dir is None:
        raise click.UsageError("Annotations and images must be given on the command line or in data.* keys")

    data = load_annotations(annotations_path, config.schema)
    result = run_training(config, read_images(data, images_dir), data)
    click.echo(f"trained {result.steps} steps, final loss {result.losses[-1]:.6g}")
    if result.checkpoints:
        click.echo(f"last checkpoint: {result.checkpoints[-1]}")


@main.command(name='eval')
@click.option('--annotations', type=click.Path(exists=True, path_type=Path), required=True)
@click.option('--results', type=click.Path(exists=True, path_type=Path), default=None)
@click.option('--metric', type=click.Choice(['coco', 'pckh']), default='coco', show_default=True)
@click.option('--predictions', type=click.Path(exists=True, path_type=Path), default=None,
              help='MPII-format predictions for PCKh.')
@click.option('--output', type=click.Path(path_type=Path), default=None)
@handle_errors
def evaluate(annotations, results, metric, predictions, output):
    """Score keypoint results against ground truth."""
    if metric == 'coco':
        if results is None:
            raise click.UsageError("--results is required for the coco metric")
        data = load_annotations(annotations)
        dts = load_results(results, data.schema.falloff)
        result = coco_ap_suite(data.by_image(), dts, data.schema.falloff)
        click.echo(result.to_frame().to_string(index=False))
        if output is not None:
            export_evaluation(result, output)
    else:
        if predictions is None:
            raise click.UsageError("--predictions is required for the pckh metric")
        gts = load_mpii(annotations)
        preds = load_mpii(predictions)
        result = pckh(preds, gts)
        click.echo(result.to_frame().round(1).to_string(index=False))
        if output is not None:
            export_frame(result.to_frame(), output)


@main.command()
@click.option('--checkpoint', type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option('--annotations', type=click.Path(exists=True, path_type=Path), required=True)
@click.option('--images', type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option('--input-size', type=SIZE, default=None, help='Defaults to the size recorded in the checkpoint.')
@click.option('--no-flip', is_flag=True, help='Disable flip testing.')
@click.option('--output', type=click.Path(path_type=Path), default=None)
@handle_errors
def decode(checkpoint, annotations, images, input_size, no_flip, output):
    """Estimate keypoints inside ground-truth boxes and write COCO results."""
    model, metadata = load_checkpoint(checkpoint)
    input_size = input_size or tuple(metadata.get('input_size', (256, 192)))
    data = load_annotations(annotations)
    detections = predict(model, read_images(data, images), data, input_size, flip_test=not no_flip)
    if output is None:
        ensure_directories()
        output = RESULTS_DIR / 'keypoints.json'
    path = save_results(output, detections)
    click.echo(f"wrote {sum(len(d) for d in detections.values())} results to {path}")


@main.command()
@click.option('--frames', 'frames_dir', type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option('--fields', 'fields_dir', type=click.Path(exists=True, file_okay=False, path_type=Path), default=None,
              help='Directory of displacement fields (.bin dense, .json sparse); zero motion when omitted.')
@click.option('--detections', type=click.Path(exists=True, path_type=Path), required=True)
@click.option('--checkpoint', type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option('--schema', type=click.Choice(sorted(KEYPOINT_SCHEMAS)), default='coco', show_default=True)
@click.option('--input-size', type=SIZE, default=None)
@click.option('--window', type=int, default=1, show_default=True)
@click.option('--no-propagation', is_flag=True, help='Use detector boxes only.')
@click.option('--gt', 'gt_path', type=click.Path(exists=True, path_type=Path), default=None,
              help='Ground truth with track_id and image_id = frame index, for MOTA.')
@click.option('--radius', type=float, default=None, help='Pixel match radius for MOTA instead of head size.')
@click.option('--output', type=click.Path(path_type=Path), default=None)
@handle_errors
def track(frames_dir, fields_dir, detections, checkpoint, schema, input_size, window, no_propagation,
          gt_path, radius, output):
    """Track poses through a directory of frames."""
    keypoint_schema = KeypointSchema.preset(schema)
    frame_paths = sorted(p for p in frames_dir.iterdir() if p.suffix.lower() in ('.png', '.jpg', '.jpeg'))
    frames = [read_image(p) for p in frame_paths]
    if fields_dir is not None:
        fields = load_displacement_fields(sorted(fields_dir.iterdir()))
    else:
        fields = [DisplacementField.zeros(t, t + 1, frames[t].shape[:2]) for t in range(len(frames) - 1)]

    model, metadata = load_checkpoint(checkpoint)
    input_size = input_size or tuple(metadata.get('input_size', (256, 192)))
    estimator = HeatmapPoseEstimator(model, input_size, keypoint_schema)
    config = TrackingConfig(window=window, use_propagated_boxes=not no_propagation)

    gt_frames = None
    if gt_path is not None:
        grouped = load_annotations(gt_path, keypoint_schema).by_image()
        gt_frames = [grouped.get(t, []) for t in range(len(frames))]

    result = track_sequence(
        frames, fields, estimator, keypoint_schema.falloff,
        detections=load_detections(detections, len(frames)),
        config=config,
        gt_frames=gt_frames,
        match_rule=PixelRadiusRule(radius) if radius is not None else None,
    )
    if output is None:
        ensure_directories()
        output = RESULTS_DIR / 'tracks.json'
    path = export_tracks(result, output, keypoint_schema, frames_dir.name)
    click.echo(f"{len(result.track_ids)} tracks over {len(frames)} frames written to {path}")
    if result.mota is not None:
        click.echo(result.mota.to_frame(keypoint_schema.names).to_string(index=False))
        click.echo(f"MOTA {100.0 * result.mota.total:.1f}")


@main.command()
@click.option('--arch', type=click.Choice(sorted(ARCH_PRESETS)), default='w32', show_default=True)
@click.option('--input-size', type=SIZE, default='256x192', show_default=True)
@click.option('--sweep', 'sweep_sizes', type=SIZE, multiple=True, help='Extra input sizes for the scaling table.')
@click.option('--output', type=click.Path(path_type=Path), default=None, help='CSV path for the variant table.')
@handle_errors
def ablate(arch, input_size, sweep_sizes, output):
    """Structural report of the fusion, resolution and head-branch variants."""
    frame = ablation_report(arch, input_size)
    frame['params_m'] = frame['params'] / 1e6
    click.echo(frame.drop(columns=['params']).round(3).to_string(index=False))
    if sweep_sizes:
        sweep = input_size_sweep(arch, [input_size, *sweep_sizes])
        click.echo(sweep.round(3).to_string(index=False))
    if output is not None:
        export_frame(frame, output)


@main.command()
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--n', 'num_images', type=int, default=16, show_default=True)
@click.option('--persons', type=int, default=1, show_default=True)
@click.option('--size', 'image_size', type=SIZE, default='128x96', show_default=True)
@click.option('--noise', type=float, default=0.0, show_default=True)
@click.option('--output', type=click.Path(file_okay=False, path_type=Path), required=True)
@handle_errors
def synth(seed, num_images, persons, image_size, noise, output):
    """Generate a synthetic stick-figure dataset."""
    spec = SyntheticSpec(num_images=num_images, image_size=image_size, persons_per_image=persons, noise=noise)
    dataset = generate_synthetic(spec, seed)
    save_images(dataset.images, dataset.annotations.images, output / 'images')
    path = save_annotations(dataset.annotations, output / 'annotations.json')
    click.echo(f"wrote {len(dataset.images)} images and {len(dataset.annotations.instances)} persons; annotations at {path}")


if __name__ == '__main__':
    main()
