"""
Pose tracking across video frames.

Each frame runs three steps: previous poses are moved into the current frame
with a supplied displacement field and their boxes are pooled with the
detector boxes, duplicates are removed by NMS, and the estimated poses are
linked to live tracks by greedy OKS matching.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import attrs
import numpy as np
from shapely.geometry import box as shapely_box

from .config import (
    ASSOCIATION_WINDOW, BOX_PROPAGATION_EXTENSION, NMS_IOU, OKS_ASSOCIATION_FLOOR
)
from .errors import ConfigError, ShapeError
from .heatmap import Box, box_from_keypoints
from .metrics import MOTAResult, PersonInstance, mota, oks


logger = logging.getLogger(__name__)


def _dense_converter(value) -> Optional[np.ndarray]:
    return None if value is None else np.asarray(value, dtype=np.float64)


def _sparse_converter(value) -> Optional[Dict[int, np.ndarray]]:
    if value is None:
        return None
    return {int(track): np.asarray(d, dtype=np.float64).reshape(-1, 2) for track, d in value.items()}


@attrs.define
class DisplacementField:
    """
    Pixel displacements from one frame to the next.

    Exactly one of the two representations is set.

    Attributes:
        source_frame: Frame the displacements start from
        target_frame: Frame they point into
        dense: (2, H, W) array of (dx, dy) per pixel
        sparse: Per-track (K, 2) keypoint displacements
    """

    source_frame: int
    target_frame: int
    dense: Optional[np.ndarray] = attrs.field(default=None, converter=_dense_converter)
    sparse: Optional[Dict[int, np.ndarray]] = attrs.field(default=None, converter=_sparse_converter)

    def __attrs_post_init__(self):
        if (self.dense is None) == (self.sparse is None):
            raise ConfigError("A displacement field is either dense or sparse")
        if self.dense is not None and (self.dense.ndim != 3 or self.dense.shape[0] != 2):
            raise ShapeError("Dense displacement field must be (2, H, W)",
                             dimension='field', expected='(2, H, W)', actual=self.dense.shape)

    @classmethod
    def zeros(cls, source_frame: int, target_frame: int, size: Tuple[int, int]) -> "DisplacementField":
        return cls(source_frame, target_frame, dense=np.zeros((2,) + tuple(size)))

    @classmethod
    def uniform(cls, source_frame: int, target_frame: int, size: Tuple[int, int],
                dx: float, dy: float) -> "DisplacementField":
        dense = np.empty((2,) + tuple(size))
        dense[0], dense[1] = dx, dy
        return cls(source_frame, target_frame, dense=dense)

    @property
    def size(self) -> Optional[Tuple[int, int]]:
        return None if self.dense is None else (self.dense.shape[1], self.dense.shape[2])

    def check_frame(self, frame_shape: Sequence[int]):
        """Raise ShapeError when a dense field does not cover an (H, W, ...) frame."""
        if self.dense is not None and tuple(frame_shape[:2]) != self.size:
            raise ShapeError("Displacement field does not match the frame size",
                             dimension='HxW', expected=tuple(frame_shape[:2]), actual=self.size)

    def sample(self, points: np.ndarray, track_id: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        Displacement at each point.

        Dense fields are sampled bilinearly; points outside the field take the
        nearest edge value. Sparse fields are looked up by track id.

        Returns:
            ((P, 2) displacements, (P,) flags for points outside the field)
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if self.sparse is not None:
            if track_id is None or track_id not in self.sparse:
                return np.zeros_like(points), np.ones(len(points), dtype=bool)
            shifts = self.sparse[track_id]
            if len(shifts) != len(points):
                raise ShapeError("Sparse displacement count does not match keypoints",
                                 dimension='K', expected=len(points), actual=len(shifts))
            return shifts.copy(), np.zeros(len(points), dtype=bool)

        h, w = self.size
        x, y = points[:, 0], points[:, 1]
        outside = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)
        x = np.clip(x, 0, w - 1)
        y = np.clip(y, 0, h - 1)
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx, fy = x - x0, y - y0

        shifts = np.empty_like(points)
        for c in range(2):
            channel = self.dense[c]
            top = channel[y0, x0] * (1 - fx) + channel[y0, x1] * fx
            bottom = channel[y1, x0] * (1 - fx) + channel[y1, x1] * fx
            shifts[:, c] = top * (1 - fy) + bottom * fy
        return shifts, outside


@attrs.define
class TrackedPose:
    """A pose with its track identity in one frame."""

    instance: PersonInstance
    track_id: int
    frame_index: int

    @property
    def keypoints(self) -> np.ndarray:
        return self.instance.keypoints

    def as_instance(self) -> PersonInstance:
        return attrs.evolve(self.instance, track_id=self.track_id, image_id=self.frame_index)


@attrs.define(frozen=True)
class TrackingConfig:
    """
    Attributes:
        oks_floor: Minimum OKS for linking a pose to a previous track
        nms_iou: Boxes overlapping a higher-scored box by more than this are dropped
        box_extension: Growth of propagated boxes per side length
        window: Frames a track stays matchable after it was last seen
        use_propagated_boxes: Pool propagated boxes with the detector boxes
    """

    oks_floor: float = OKS_ASSOCIATION_FLOOR
    nms_iou: float = NMS_IOU
    box_extension: float = BOX_PROPAGATION_EXTENSION
    window: int = ASSOCIATION_WINDOW
    use_propagated_boxes: bool = True

    def __attrs_post_init__(self):
        if not 0.0 < self.nms_iou < 1.0:
            raise ConfigError(f"NMS IoU threshold must be in (0, 1), got {self.nms_iou}")
        if self.window < 1:
            raise ConfigError(f"Association window must be at least 1 frame, got {self.window}")
        if self.box_extension < 0:
            raise ConfigError(f"Box extension must be non-negative, got {self.box_extension}")


@attrs.define
class CandidateBox:
    box: Box
    score: float
    source: str = 'detected'
    track_id: Optional[int] = None


def propagate_pose(pose: TrackedPose, field: DisplacementField) -> Tuple[np.ndarray, int]:
    """Shift every keypoint of a pose by the field. Returns the keypoints and the flagged count."""
    shifts, outside = field.sample(pose.keypoints, pose.track_id)
    return pose.keypoints + shifts, int(outside.sum())


def propagate_boxes(
    prev_poses: Sequence[TrackedPose],
    field: DisplacementField,
    extension: float = BOX_PROPAGATION_EXTENSION
) -> List[CandidateBox]:
    """
    Candidate boxes for the next frame from shifted previous keypoints.

    Each box bounds the shifted labeled keypoints and grows by `extension`
    of its length per side. Poses without labeled keypoints yield no box.
    """
    boxes = []
    flagged = 0
    for pose in prev_poses:
        shifted, n_outside = propagate_pose(pose, field)
        flagged += n_outside
        bounds = box_from_keypoints(shifted, pose.instance.visibility, extension)
        if bounds is None:
            continue
        boxes.append(CandidateBox(box=bounds, score=pose.instance.score, source='propagated', track_id=pose.track_id))
    if flagged:
        logger.warning(f"{flagged} keypoints fell outside displacement field "
                       f"{field.source_frame}->{field.target_frame}; sampled at the nearest edge")
    return boxes


def box_iou(a: Box, b: Box) -> float:
    pa = shapely_box(a[0], a[1], a[0] + a[2], a[1] + a[3])
    pb = shapely_box(b[0], b[1], b[0] + b[2], b[1] + b[3])
    union = pa.union(pb).area
    return float(pa.intersection(pb).area / union) if union > 0 else 0.0


def box_nms(boxes: Sequence[Box], scores: Sequence[float], iou_threshold: float = NMS_IOU) -> List[int]:
    """
    Greedy non-maximum suppression.

    Returns:
        Indices of kept boxes in descending score order (stable for ties)
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigError(f"NMS IoU threshold must be in (0, 1), got {iou_threshold}")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind='mergesort')
    kept: List[int] = []
    for i in order:
        if all(box_iou(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(int(i))
    return kept


def greedy_match(similarity: np.ndarray, prev_ids: Sequence[int], floor: float) -> List[Tuple[int, int]]:
    """
    Greedy assignment on a (P, C) similarity matrix.

    Repeatedly takes the largest remaining similarity at or above the floor,
    ties broken by (previous id, current index). This is not an optimal
    assignment.

    Returns:
        (previous row, current column) pairs in the order they were taken
    """
    candidates = [
        (-similarity[p, c], prev_ids[p], c, p)
        for p in range(similarity.shape[0]) for c in range(similarity.shape[1])
        if similarity[p, c] >= floor
    ]
    candidates.sort()
    used_prev, used_cur, pairs = set(), set(), []
    for _, _, c, p in candidates:
        if p in used_prev or c in used_cur:
            continue
        used_prev.add(p)
        used_cur.add(c)
        pairs.append((p, c))
    return pairs


def _association_area(instance: PersonInstance, keypoints: np.ndarray) -> float:
    if instance.area > 0:
        return instance.area
    bounds = box_from_keypoints(keypoints, instance.visibility, 0.0)
    return 0.0 if bounds is None else bounds[2] * bounds[3]


def pose_similarity(prev_keypoints: np.ndarray, prev: PersonInstance, cur: PersonInstance, falloff: Sequence[float]) -> float:
    """OKS between propagated previous keypoints (as reference) and a current pose."""
    reference = attrs.evolve(prev, keypoints=prev_keypoints, area=_association_area(prev, prev_keypoints))
    if reference.num_labeled == 0 or reference.area <= 0:
        return 0.0
    return oks(reference, cur, falloff)


def _fresh_order(poses: Sequence[PersonInstance], indices: Sequence[int]) -> List[int]:
    def key(i):
        mean = poses[i].keypoints.mean(axis=0)
        return -poses[i].score, float(mean[0]), float(mean[1]), i
    return sorted(indices, key=key)


def associate(
    prev: Sequence[TrackedPose],
    cur: Sequence[PersonInstance],
    falloff: Sequence[float],
    frame_index: int,
    next_id: int,
    floor: float = OKS_ASSOCIATION_FLOOR,
    prev_keypoints: Optional[Sequence[np.ndarray]] = None
) -> Tuple[List[TrackedPose], int]:
    """
    Link current poses to previous tracks.

    Args:
        prev: Live tracks
        cur: Poses estimated in the current frame
        falloff: Per-keypoint OKS constants
        frame_index: Index of the current frame
        next_id: First unused track id
        floor: Minimum OKS for a link
        prev_keypoints: Previous keypoints moved into the current frame
            (defaults to the stored keypoints)

    Returns:
        (tracked poses in the order of `cur`, next unused id)
    """
    moved = list(prev_keypoints) if prev_keypoints is not None else [p.keypoints for p in prev]
    similarity = np.zeros((len(prev), len(cur)))
    for p, track in enumerate(prev):
        for c, pose in enumerate(cur):
            similarity[p, c] = pose_similarity(moved[p], track.instance, pose, falloff)

    assigned: Dict[int, int] = {}
    for p, c in greedy_match(similarity, [t.track_id for t in prev], floor):
        assigned[c] = prev[p].track_id

    unmatched = [c for c in range(len(cur)) if c not in assigned]
    for c in _fresh_order(cur, unmatched):
        assigned[c] = next_id
        next_id += 1

    tracked = [TrackedPose(instance=cur[c], track_id=assigned[c], frame_index=frame_index) for c in range(len(cur))]
    return tracked, next_id


EstimatorFn = Callable[[np.ndarray, Sequence[Box], Sequence[float]], List[PersonInstance]]


@attrs.define
class TrackingResult:
    frames: List[List[TrackedPose]]
    mota: Optional[MOTAResult] = None
    flagged_keypoints: int = 0

    @property
    def track_ids(self) -> List[int]:
        return sorted({pose.track_id for frame in self.frames for pose in frame})

    def as_instances(self) -> List[List[PersonInstance]]:
        return [[pose.as_instance() for pose in frame] for frame in self.frames]


class PoseTracker:
    """
    Frame-by-frame tracker state.

    Live tracks keep their last pose and are moved through every displacement
    field until they are matched again or fall out of the window.
    """

    def __init__(self, falloff: Sequence[float], config: Optional[TrackingConfig] = None):
        self.falloff = tuple(falloff)
        self.config = config or TrackingConfig()
        self.next_id = 0
        self.flagged = 0
        # track id -> (last matched pose, its keypoints moved to the latest frame)
        self._live: Dict[int, Tuple[TrackedPose, np.ndarray]] = {}

    @property
    def live_tracks(self) -> List[TrackedPose]:
        return [pose for pose, _ in self._live.values()]

    def advance(self, field: DisplacementField) -> List[CandidateBox]:
        """Move every live track through a field; returns boxes of the tracks seen last frame."""
        boxes = []
        for track_id, (pose, moved) in list(self._live.items()):
            shifts, outside = field.sample(moved, track_id)
            self.flagged += int(outside.sum())
            moved = moved + shifts
            self._live[track_id] = (pose, moved)
            if pose.frame_index == field.source_frame:
                bounds = box_from_keypoints(moved, pose.instance.visibility, self.config.box_extension)
                if bounds is not None:
                    boxes.append(CandidateBox(bounds, pose.instance.score, 'propagated', track_id))
        return boxes

    def update(self, poses: Sequence[PersonInstance], frame_index: int) -> List[TrackedPose]:
        for track_id, (pose, _) in list(self._live.items()):
            if frame_index - pose.frame_index > self.config.window:
                logger.debug(f"Track {track_id} expired at frame {frame_index}")
                del self._live[track_id]

        live = sorted(self._live.items())
        tracked, self.next_id = associate(
            [pose for _, (pose, _) in live],
            poses,
            self.falloff,
            frame_index,
            self.next_id,
            self.config.oks_floor,
            [moved for _, (_, moved) in live],
        )
        for pose in tracked:
            self._live[pose.track_id] = (pose, pose.keypoints.copy())
        return tracked


def _estimate(estimator, image: np.ndarray, boxes: Sequence[Box], scores: Sequence[float]) -> List[PersonInstance]:
    if hasattr(estimator, 'estimate'):
        return estimator.estimate(image, boxes, scores)
    return estimator(image, boxes, scores)


def track_sequence(
    frames: Sequence[np.ndarray],
    fields: Sequence[DisplacementField],
    estimator: Union[EstimatorFn, object],
    falloff: Sequence[float],
    detections: Optional[Sequence[Sequence[Tuple[Box, float]]]] = None,
    config: Optional[TrackingConfig] = None,
    gt_frames: Optional[Sequence[Sequence[PersonInstance]]] = None,
    match_rule=None
) -> TrackingResult:
    """
    Track poses through a video.

    Args:
        frames: Images in temporal order
        fields: Displacement field t -> t+1 for every consecutive pair
        estimator: HeatmapPoseEstimator or a callable (image, boxes, scores) -> poses
        falloff: Per-keypoint OKS constants
        detections: Per-frame (box, score) detector output
        config: TrackingConfig
        gt_frames: Optional ground truth; enables the MOTA result
        match_rule: Joint matching rule for MOTA

    Returns:
        TrackingResult

    Raises:
        ShapeError: If the sequence lengths disagree
    """
    config = config or TrackingConfig()
    n = len(frames)
    if len(fields) != max(n - 1, 0):
        raise ShapeError("Need one displacement field per consecutive frame pair",
                         dimension='frames', expected=max(n - 1, 0), actual=len(fields))
    detections = detections if detections is not None else [[] for _ in range(n)]
    if len(detections) != n:
        raise ShapeError("Need one detection list per frame", dimension='frames', expected=n, actual=len(detections))

    tracker = PoseTracker(falloff, config)
    results: List[List[TrackedPose]] = []
    for t, image in enumerate(frames):
        candidates = [CandidateBox(tuple(float(v) for v in box), float(score)) for box, score in detections[t]]
        if t > 0:
            field = fields[t - 1]
            field.check_frame(np.asarray(frames[t - 1]).shape)
            propagated = tracker.advance(field)
            if config.use_propagated_boxes:
                candidates += propagated

        kept = box_nms([c.box for c in candidates], [c.score for c in candidates], config.nms_iou) if candidates else []
        boxes = [candidates[i].box for i in kept]
        scores = [candidates[i].score for i in kept]
        poses = _estimate(estimator, image, boxes, scores) if boxes else []
        tracked = tracker.update(poses, t)
        results.append(tracked)
        logger.debug(f"Frame {t}: {len(candidates)} candidate boxes, {len(kept)} after NMS, {len(tracked)} poses")

    if tracker.flagged:
        logger.warning(f"{tracker.flagged} keypoints were sampled outside their displacement field")

    result = TrackingResult(frames=results, flagged_keypoints=tracker.flagged)
    if gt_frames is not None:
        result.mota = mota(result.as_instances(), gt_frames, match_rule)
    logger.info(f"Tracked {n} frames: {len(result.track_ids)} tracks")
    return result
