"""
Data loader module for hrpose.

Reads keypoint annotations (COCO-style JSON and MPII line files), keypoint
results, model checkpoints and displacement fields, validating everything
on the way in.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import attrs
import cv2
import numpy as np

from .builder import HRNet, HRNetSpec, build_hrnet
from .config import (
    CHECKPOINT_BUFFER, CHECKPOINT_FORMAT, CHECKPOINT_MANIFEST, DISPLACEMENT_MAGIC,
    KeypointSchema
)
from .errors import AnnotationError, CheckpointError
from .heatmap import box_from_keypoints
from .metrics import PersonInstance
from .tensor import Tensor
from .tracking import DisplacementField


logger = logging.getLogger(__name__)

CHECKPOINT_DTYPES = {'<f4': np.float32, '<f8': np.float64}


@attrs.define(frozen=True)
class ImageRecord:
    id: int
    height: int
    width: int
    file_name: str = ''


@attrs.define
class AnnotationSet:
    """
    Images and the person instances labeled on them.

    Attributes:
        images: Image records with unique ids
        instances: Person instances, each with an image_id
        schema: Keypoint schema shared by every instance
    """

    images: List[ImageRecord]
    instances: List[PersonInstance]
    schema: KeypointSchema

    @property
    def num_keypoints(self) -> int:
        return self.schema.num_keypoints

    def image(self, image_id: int) -> ImageRecord:
        for record in self.images:
            if record.id == image_id:
                return record
        raise KeyError(image_id)

    def by_image(self) -> Dict[int, List[PersonInstance]]:
        grouped: Dict[int, List[PersonInstance]] = {record.id: [] for record in self.images}
        for instance in self.instances:
            grouped.setdefault(instance.image_id, []).append(instance)
        return grouped

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready form read back by load_annotations."""
        return {
            'schema': attrs.asdict(self.schema),
            'images': [attrs.asdict(record) for record in self.images],
            'annotations': [instance_record(instance) for instance in self.instances],
        }


def instance_record(instance: PersonInstance) -> Dict[str, Any]:
    """One person instance as a COCO-style annotation record."""
    keypoints = np.column_stack([instance.keypoints, instance.visibility]).reshape(-1)
    record: Dict[str, Any] = {
        'image_id': instance.image_id,
        'keypoints': [float(v) for v in keypoints],
        'num_keypoints': instance.num_labeled,
        'area': float(instance.area),
    }
    if instance.box is not None:
        record['bbox'] = [float(v) for v in instance.box]
    if instance.head_box is not None:
        record['head_box'] = [float(v) for v in instance.head_box]
    if instance.track_id is not None:
        record['track_id'] = int(instance.track_id)
    return record


def _read_json(path: Path) -> Any:
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise AnnotationError(f"Malformed JSON in {path}",
                              [f"line {e.lineno}, column {e.colno}: {e.msg}"]) from e


def _resolve_schema(raw: Any, schema: Optional[Union[str, KeypointSchema]]) -> KeypointSchema:
    if isinstance(schema, KeypointSchema):
        return schema
    if schema is not None:
        return KeypointSchema.preset(schema)
    if isinstance(raw, str):
        return KeypointSchema.preset(raw)
    if isinstance(raw, Mapping):
        return KeypointSchema(**raw)
    return KeypointSchema.preset('coco')


def _parse_annotation(
    record: Any,
    where: str,
    k: int,
    falloff: Sequence[float],
    image_ids: set,
    issues: List[str]
) -> Optional[PersonInstance]:
    if not isinstance(record, Mapping):
        issues.append(f"{where}: expected an object")
        return None
    start = len(issues)

    image_id = record.get('image_id')
    if image_id not in image_ids:
        issues.append(f"{where}.image_id: unknown image {image_id!r}")

    keypoints = record.get('keypoints')
    if not isinstance(keypoints, list) or len(keypoints) != 3 * k:
        length = len(keypoints) if isinstance(keypoints, list) else type(keypoints).__name__
        issues.append(f"{where}.keypoints: expected {3 * k} values (3K), got {length}")
        return None
    try:
        values = np.asarray(keypoints, dtype=np.float64).reshape(k, 3)
    except (TypeError, ValueError):
        issues.append(f"{where}.keypoints: values must be numbers")
        return None
    visibility = values[:, 2]
    if not np.all(np.isin(visibility, (0, 1, 2))):
        issues.append(f"{where}.keypoints: visibility flags must be 0, 1 or 2")

    bbox = record.get('bbox')
    if bbox is not None and (not isinstance(bbox, list) or len(bbox) != 4):
        issues.append(f"{where}.bbox: expected [x, y, w, h]")
    head_box = record.get('head_box')
    if head_box is not None and (not isinstance(head_box, list) or len(head_box) != 4):
        issues.append(f"{where}.head_box: expected [x1, y1, x2, y2]")

    area = record.get('area')
    if area is not None and (not isinstance(area, (int, float)) or area < 0):
        issues.append(f"{where}.area: expected a non-negative number")
    if len(issues) > start:
        return None

    if area is None:
        area = float(bbox[2] * bbox[3]) if bbox is not None else 0.0
    return PersonInstance(
        keypoints=values[:, :2],
        visibility=visibility.astype(np.int64),
        area=float(area),
        falloff=falloff,
        head_box=tuple(float(v) for v in head_box) if head_box is not None else None,
        box=tuple(float(v) for v in bbox) if bbox is not None else None,
        track_id=record.get('track_id'),
        image_id=image_id,
    )


def load_annotations(path: Path, schema: Optional[Union[str, KeypointSchema]] = None) -> AnnotationSet:
    """
    Load and validate a COCO-style keypoint annotation file.

    The file holds `images` (id, height, width, file_name) and `annotations`
    (image_id, keypoints as 3K values x, y, v, optional area, bbox,
    head_box, track_id). A `schema` entry names a preset or spells one out.

    Args:
        path: JSON file
        schema: Schema override (preset name or KeypointSchema)

    Returns:
        AnnotationSet

    Raises:
        FileNotFoundError: If the file doesn't exist
        AnnotationError: Listing every malformed entry
    """
    path = Path(path)
    logger.info(f"Loading annotations from {path}")
    raw = _read_json(path)
    if not isinstance(raw, Mapping):
        raise AnnotationError(f"Annotation file {path} must hold a JSON object")

    resolved = _resolve_schema(raw.get('schema'), schema)
    issues: List[str] = []

    images: List[ImageRecord] = []
    seen = set()
    for index, record in enumerate(raw.get('images', [])):
        where = f"images[{index}]"
        try:
            image = ImageRecord(id=int(record['id']), height=int(record['height']),
                                width=int(record['width']), file_name=str(record.get('file_name', '')))
        except (KeyError, TypeError, ValueError):
            issues.append(f"{where}: expected id, height and width")
            continue
        if image.id in seen:
            issues.append(f"{where}.id: duplicate image id {image.id}")
        if image.height <= 0 or image.width <= 0:
            issues.append(f"{where}: image size must be positive")
        seen.add(image.id)
        images.append(image)

    instances = []
    for index, record in enumerate(raw.get('annotations', [])):
        instance = _parse_annotation(record, f"annotations[{index}]", resolved.num_keypoints,
                                     resolved.falloff, seen, issues)
        if instance is not None:
            instances.append(instance)

    if issues:
        raise AnnotationError(f"{len(issues)} invalid entries in {path}", issues)

    logger.info(f"Loaded {len(images)} images and {len(instances)} instances (K={resolved.num_keypoints})")
    return AnnotationSet(images=images, instances=instances, schema=resolved)


def load_results(path: Path, falloff: Optional[Sequence[float]] = None) -> Dict[int, List[PersonInstance]]:
    """
    Load COCO-style keypoint results grouped by image id.

    Each result holds image_id, keypoints (x, y, confidence triples) and a
    score. The area defaults to the extent of the keypoints.
    """
    path = Path(path)
    raw = _read_json(path)
    if not isinstance(raw, list):
        raise AnnotationError(f"Results file {path} must hold a JSON list")

    issues: List[str] = []
    results: Dict[int, List[PersonInstance]] = {}
    for index, record in enumerate(raw):
        where = f"[{index}]"
        try:
            values = np.asarray(record['keypoints'], dtype=np.float64).reshape(-1, 3)
            score = float(record['score'])
            image_id = record['image_id']
        except (KeyError, TypeError, ValueError):
            issues.append(f"{where}: expected image_id, keypoints (3K values) and score")
            continue
        if values.size == 0:
            issues.append(f"{where}.keypoints: expected at least one (x, y, confidence) triple")
            continue
        x0, y0 = values[:, :2].min(axis=0)
        x1, y1 = values[:, :2].max(axis=0)
        area = float(record.get('area', (x1 - x0) * (y1 - y0)))
        bbox = record.get('bbox')
        results.setdefault(image_id, []).append(PersonInstance(
            keypoints=values[:, :2],
            visibility=np.full(len(values), 2, dtype=np.int64),
            confidences=values[:, 2],
            area=area,
            score=score,
            falloff=falloff,
            box=tuple(bbox) if bbox is not None else None,
            image_id=image_id,
        ))
    if issues:
        raise AnnotationError(f"{len(issues)} invalid results in {path}", issues)
    logger.info(f"Loaded {sum(len(r) for r in results.values())} results for {len(results)} images")
    return results


def load_mpii(path: Path, schema: Optional[KeypointSchema] = None) -> List[PersonInstance]:
    """
    Read MPII-style line annotations.

    Each line is `image_id x1 y1 x2 y2 x0 y0 v0 ... xK yK vK`: the head box
    followed by K keypoint triples. Blank lines and `#` comments are skipped.
    """
    schema = schema or KeypointSchema.preset('mpii')
    k = schema.num_keypoints
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")

    issues: List[str] = []
    instances = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        fields = line.split()
        if len(fields) != 5 + 3 * k:
            issues.append(f"line {line_no}: expected {5 + 3 * k} fields, got {len(fields)}")
            continue
        try:
            values = np.asarray(fields[1:], dtype=np.float64)
        except ValueError:
            issues.append(f"line {line_no}: non-numeric field")
            continue
        triples = values[4:].reshape(k, 3)
        visibility = triples[:, 2].astype(np.int64)
        bounds = box_from_keypoints(triples[:, :2], visibility, 0.0)
        instances.append(PersonInstance(
            keypoints=triples[:, :2],
            visibility=visibility,
            area=0.0 if bounds is None else bounds[2] * bounds[3],
            falloff=schema.falloff,
            head_box=tuple(values[:4]),
            image_id=fields[0],
        ))
    if issues:
        raise AnnotationError(f"{len(issues)} invalid lines in {path}", issues)
    logger.info(f"Loaded {len(instances)} MPII instances from {path}")
    return instances


def read_manifest(directory: Path) -> Dict[str, Any]:
    manifest_path = Path(directory) / CHECKPOINT_MANIFEST
    if not manifest_path.exists():
        raise CheckpointError(f"Checkpoint manifest not found: {manifest_path}")
    with open(manifest_path, 'r') as f:
        manifest = json.load(f)
    if manifest.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"Unsupported checkpoint format {manifest.get('format')!r}, expected {CHECKPOINT_FORMAT}")
    return manifest


def load_checkpoint(directory: Path) -> Tuple[HRNet, Dict[str, Any]]:
    """
    Restore a network from a checkpoint directory.

    Returns:
        (model with parameters and running statistics restored, manifest metadata)

    Raises:
        CheckpointError: On a missing file, unknown format or any tensor
            whose name, shape or size disagrees with the network
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    buffer_path = directory / CHECKPOINT_BUFFER
    if not buffer_path.exists():
        raise CheckpointError(f"Checkpoint tensors not found: {buffer_path}")
    payload = buffer_path.read_bytes()

    spec = HRNetSpec.from_dict(manifest['spec'])
    entries = manifest['tensors']
    dtypes = {entry['dtype'] for entry in entries.values()}
    if not dtypes <= set(CHECKPOINT_DTYPES):
        raise CheckpointError(f"Unsupported tensor dtypes {sorted(dtypes - set(CHECKPOINT_DTYPES))}")
    dtype = CHECKPOINT_DTYPES[sorted(dtypes)[0]] if dtypes else np.float32
    model = build_hrnet(spec, materialize=True, dtype=dtype)

    def read(name: str, shape: Tuple[int, ...]) -> np.ndarray:
        if name not in entries:
            raise CheckpointError(f"Checkpoint is missing tensor '{name}'")
        entry = entries[name]
        if tuple(entry['shape']) != tuple(shape):
            raise CheckpointError(f"Tensor '{name}' has shape {tuple(entry['shape'])}, network expects {tuple(shape)}")
        end = entry['offset'] + entry['nbytes']
        if end > len(payload):
            raise CheckpointError(f"Tensor '{name}' runs past the end of {CHECKPOINT_BUFFER}")
        data = np.frombuffer(payload, dtype=entry['dtype'], count=int(np.prod(shape)), offset=entry['offset'])
        return data.reshape(shape).astype(CHECKPOINT_DTYPES[entry['dtype']])

    expected = set()
    for name, param in model.named_parameters():
        param.value = Tensor(read(name, param.shape), requires_grad=True)
        expected.add(name)
    for name, buffer in model.named_buffers():
        buffer[...] = read(name, buffer.shape)
        expected.add(name)
    extra = set(entries) - expected
    if extra:
        raise CheckpointError(f"Checkpoint holds tensors the network lacks: {sorted(extra)[:5]}")

    logger.info(f"Loaded checkpoint {directory} ({len(expected)} tensors, width={spec.width})")
    return model, manifest.get('metadata', {})


def read_displacement_binary(path: Path) -> DisplacementField:
    """
    Read a dense displacement field.

    Layout: 4-byte magic `HRDF`, then source frame, target frame, H and W as
    little-endian uint32, then (2, H, W) little-endian float32 (dx plane,
    then dy plane).
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != DISPLACEMENT_MAGIC:
        raise AnnotationError(f"{path} is not a displacement field", [f"offset 0: bad magic {data[:4]!r}"])
    if len(data) < 20:
        raise AnnotationError(f"{path} has a truncated header",
                              [f"offset 4: expected 16 header bytes, found {len(data) - 4}"])
    header = np.frombuffer(data, dtype='<u4', count=4, offset=4)
    source, target, h, w = (int(v) for v in header)
    expected = 20 + 2 * h * w * 4
    if len(data) != expected:
        raise AnnotationError(f"{path} has a truncated payload",
                              [f"offset 20: expected {expected - 20} payload bytes, found {len(data) - 20}"])
    dense = np.frombuffer(data, dtype='<f4', count=2 * h * w, offset=20).reshape(2, h, w)
    return DisplacementField(source, target, dense=dense)


def read_displacement_json(path: Path) -> DisplacementField:
    """Read a sparse field: {"from": t, "to": t+1, "tracks": {"<id>": [[dx, dy], ...]}}."""
    path = Path(path)
    raw = _read_json(path)
    try:
        return DisplacementField(int(raw['from']), int(raw['to']), sparse=raw['tracks'])
    except (KeyError, TypeError, ValueError) as e:
        raise AnnotationError(f"Malformed sparse displacement file {path}", [str(e)]) from e


def load_displacement_fields(paths: Sequence[Path]) -> List[DisplacementField]:
    """Read fields by suffix (.json sparse, anything else dense binary) ordered by source frame."""
    fields = [read_displacement_json(p) if Path(p).suffix == '.json' else read_displacement_binary(p) for p in paths]
    fields.sort(key=lambda f: f.source_frame)
    logger.info(f"Loaded {len(fields)} displacement fields")
    return fields


def read_image(path: Path) -> np.ndarray:
    """Read an image file as (H, W, 3) uint8 in RGB order."""
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise FileNotFoundError(f"Could not read image: {path}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def read_images(annotations: AnnotationSet, directory: Path) -> Dict[int, np.ndarray]:
    """Read every image of an annotation set, keyed by image id; missing files are skipped."""
    directory = Path(directory)
    images = {}
    missing = []
    for record in annotations.images:
        path = directory / record.file_name
        if not path.exists():
            missing.append(record.file_name)
            continue
        images[record.id] = read_image(path)
    if missing:
        logger.warning(f"{len(missing)} images not found in {directory}")
        for name in missing[:5]:
            logger.warning(f"  {name}")
    logger.info(f"Read {len(images)} images from {directory}")
    return images


def load_detections(path: Path, num_frames: int) -> List[List[Tuple[Tuple[float, float, float, float], float]]]:
    """
    Read detector boxes: a JSON list of {"frame": t, "bbox": [x, y, w, h], "score": s}.

    Returns:
        Per-frame lists of (box, score)
    """
    raw = _read_json(Path(path))
    frames: List[List[Tuple[Tuple[float, float, float, float], float]]] = [[] for _ in range(num_frames)]
    issues = []
    for index, record in enumerate(raw):
        try:
            frame = int(record['frame'])
            box = tuple(float(v) for v in record['bbox'])
            score = float(record.get('score', 1.0))
        except (KeyError, TypeError, ValueError):
            issues.append(f"[{index}]: expected frame, bbox and score")
            continue
        if not 0 <= frame < num_frames or len(box) != 4:
            issues.append(f"[{index}]: frame {frame} outside [0, {num_frames}) or bbox not [x, y, w, h]")
            continue
        frames[frame].append((box, score))
    if issues:
        raise AnnotationError(f"{len(issues)} invalid detections in {path}", issues)
    return frames
