"""
Data exporter module for hrpose.

This module handles writing annotations, keypoint results, checkpoints,
displacement fields, tracks and reports.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import cv2
import numpy as np
import pandas as pd

from .audit import CostReport
from .builder import HRNet
from .config import (
    CHECKPOINT_BUFFER, CHECKPOINT_FORMAT, CHECKPOINT_MANIFEST, DISPLACEMENT_MAGIC,
    REPORTS_DIR, KeypointSchema
)
from .errors import CheckpointError
from .loader import AnnotationSet, ImageRecord
from .metrics import EvalResult, PersonInstance
from .tracking import DisplacementField, TrackingResult


logger = logging.getLogger(__name__)


def save_annotations(annotations: AnnotationSet, path: Path) -> Path:
    """
    Write an annotation set in the format load_annotations reads.

    Returns:
        Path to the exported JSON file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(annotations.to_dict(), f, indent=2)
    logger.info(f"Saved {len(annotations.instances)} instances on {len(annotations.images)} images to {path}")
    return path


def result_record(instance: PersonInstance) -> Dict[str, Any]:
    confidences = instance.confidences if instance.confidences is not None else np.ones(instance.num_keypoints)
    triples = np.column_stack([instance.keypoints, confidences]).reshape(-1)
    record: Dict[str, Any] = {
        'image_id': instance.image_id,
        'category_id': 1,
        'keypoints': [float(v) for v in triples],
        'score': float(instance.score),
        'area': float(instance.area),
    }
    if instance.box is not None:
        record['bbox'] = [float(v) for v in instance.box]
    return record


def save_results(
    path: Path,
    results: Union[Mapping[Any, Sequence[PersonInstance]], Iterable[PersonInstance]]
) -> Path:
    """
    Write COCO-style keypoint results.

    Args:
        path: Output JSON path
        results: Instances, or instances grouped by image id

    Returns:
        Path to the exported JSON file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(results, Mapping):
        instances = []
        for image_id, group in results.items():
            for instance in group:
                if instance.image_id is None:
                    instance.image_id = image_id
                instances.append(instance)
    else:
        instances = list(results)

    records = [result_record(instance) for instance in instances]
    with open(path, 'w') as f:
        json.dump(records, f, indent=2)
    logger.info(f"Saved {len(records)} keypoint results to {path}")
    return path


def save_checkpoint(model: HRNet, directory: Path, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write a checkpoint directory: a JSON manifest and one little-endian buffer.

    The manifest records the network spec and, per tensor, its shape, dtype,
    byte offset and size. Running statistics are stored with kind 'buffer'.

    Returns:
        Path to the checkpoint directory
    """
    directory = Path(directory)
    if not model.materialized:
        raise CheckpointError("Cannot checkpoint a network without parameter values")
    directory.mkdir(parents=True, exist_ok=True)

    entries: Dict[str, Dict[str, Any]] = {}
    offset = 0
    with open(directory / CHECKPOINT_BUFFER, 'wb') as f:
        tensors = [(name, param.value.data, 'parameter') for name, param in model.named_parameters()]
        tensors += [(name, buffer, 'buffer') for name, buffer in model.named_buffers()]
        for name, array, kind in tensors:
            dtype = np.dtype(array.dtype).newbyteorder('<')
            raw = np.ascontiguousarray(array, dtype=dtype).tobytes()
            entries[name] = {
                'shape': list(array.shape),
                'dtype': dtype.str,
                'offset': offset,
                'nbytes': len(raw),
                'kind': kind,
            }
            f.write(raw)
            offset += len(raw)

    manifest = {
        'format': CHECKPOINT_FORMAT,
        'spec': model.spec.to_dict(),
        'tensors': entries,
        'metadata': metadata or {},
    }
    with open(directory / CHECKPOINT_MANIFEST, 'w') as f:
        json.dump(manifest, f, indent=2)

    logger.info(f"Saved checkpoint with {len(entries)} tensors ({offset:,} bytes) to {directory}")
    return directory


def write_displacement_binary(field: DisplacementField, path: Path) -> Path:
    """Write a dense field in the layout read_displacement_binary reads."""
    if field.dense is None:
        raise ValueError("Only dense displacement fields have a binary layout")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = field.size
    header = np.array([field.source_frame, field.target_frame, h, w], dtype='<u4')
    with open(path, 'wb') as f:
        f.write(DISPLACEMENT_MAGIC)
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(field.dense, dtype='<f4').tobytes())
    return path


def write_displacement_json(field: DisplacementField, path: Path) -> Path:
    if field.sparse is None:
        raise ValueError("Only sparse displacement fields have a JSON layout")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        'from': field.source_frame,
        'to': field.target_frame,
        'tracks': {str(track): shifts.tolist() for track, shifts in field.sparse.items()},
    }
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2)
    return path


def export_tracks(
    result: TrackingResult,
    path: Path,
    schema: Optional[KeypointSchema] = None,
    sequence_name: str = 'sequence'
) -> Path:
    """
    Export tracked poses as PoseTrack-style JSON.

    One `images` entry per frame and one `annotations` entry per tracked
    pose with `track_id`, flattened keypoints and per-keypoint scores.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    images = [{'id': t, 'frame_id': t, 'file_name': f"{sequence_name}/{t:06d}.jpg"} for t in range(len(result.frames))]
    annotations = []
    for frame in result.frames:
        for pose in frame:
            instance = pose.instance
            scores = instance.confidences if instance.confidences is not None else np.ones(instance.num_keypoints)
            annotations.append({
                'image_id': pose.frame_index,
                'track_id': pose.track_id,
                'keypoints': [float(v) for v in np.column_stack([instance.keypoints, instance.visibility]).reshape(-1)],
                'scores': [float(s) for s in scores],
                'score': float(instance.score),
            })

    payload: Dict[str, Any] = {'images': images, 'annotations': annotations}
    if schema is not None:
        payload['categories'] = [{'id': 1, 'name': 'person', 'keypoints': list(schema.names)}]
    if result.mota is not None:
        payload['mota'] = result.mota.total

    with open(path, 'w') as f:
        json.dump(payload, f, indent=2)
    logger.info(f"Exported {len(annotations)} tracked poses in {len(result.track_ids)} tracks to {path}")
    return path


def export_cost_report(report: CostReport, output_dir: Optional[Path] = None, stem: str = 'cost') -> Dict[str, Path]:
    """
    Export a cost report as JSON and a per-layer CSV.

    Returns:
        Dictionary with 'json' and 'csv' paths
    """
    output_dir = Path(output_dir or REPORTS_DIR)
    output_dir.mkdir(parents=True, exist_ok=True)
    json_path = output_dir / f"{stem}.json"
    csv_path = output_dir / f"{stem}.csv"

    with open(json_path, 'w') as f:
        json.dump({
            **report.to_dict(),
            'export_timestamp': pd.Timestamp.now().isoformat(),
        }, f, indent=2)
    report.to_frame().to_csv(csv_path, index=False)

    logger.info(f"Exported cost report ({len(report.rows)} rows) to {json_path} and {csv_path}")
    return {'json': json_path, 'csv': csv_path}


def export_frame(frame: pd.DataFrame, path: Path) -> Path:
    """Write a report table as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info(f"Exported {len(frame)} rows to {path}")
    return path


def export_evaluation(result: EvalResult, path: Path, extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write the AP/AR summary and per-threshold AP as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        **result.summary(),
        'thresholds': [float(t) for t in result.thresholds],
        'ap_per_threshold': [float(v) for v in result.ap_per_threshold()],
        'export_timestamp': pd.Timestamp.now().isoformat(),
    }
    if extra:
        payload.update(extra)
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2)
    logger.info(f"Exported evaluation summary to {path}")
    return path


def save_images(images: Sequence[np.ndarray], records: Sequence[ImageRecord], directory: Path) -> List[Path]:
    """Write (H, W, 3) uint8 images as PNG files named by their records."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for image, record in zip(images, records):
        path = directory / record.file_name
        # cv2 writes BGR; store channels in RGB order on disk
        if not cv2.imwrite(str(path), cv2.cvtColor(image, cv2.COLOR_RGB2BGR)):
            raise IOError(f"Failed to write image {path}")
        paths.append(path)
    logger.info(f"Saved {len(paths)} images to {directory}")
    return paths
