"""
Keypoint evaluation: OKS, COCO-style AP/AR, PCKh and per-keypoint MOTA.

The AP suite follows the matching and accumulation rules of the COCO
keypoint evaluator: detections sorted by score (stable), at most 20 per
image, greedy assignment to the best unmatched ground truth, ground truths
outside the area band ignored, 101-point interpolated precision.
"""

import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import attrs
import numpy as np
import pandas as pd

from .config import (
    AREA_RANGES, HEAD_SIZE_FACTOR, MAX_DETECTIONS, MPII_JOINT_GROUPS, OKS_THRESHOLDS,
    PCKH_ALPHA, RECALL_THRESHOLDS
)
from .errors import MetricError, ShapeError


logger = logging.getLogger(__name__)

# pelvis and thorax (MPII ordering) are left out of the PCKh total
PCKH_EXCLUDED_JOINTS = (6, 7)


def _as_points(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64).reshape(-1, 2)


def _optional_array(value) -> Optional[np.ndarray]:
    return None if value is None else np.asarray(value, dtype=np.float64)


@attrs.define(eq=False)
class PersonInstance:
    """
    One annotated or detected person.

    Attributes:
        keypoints: (K, 2) pixel coordinates
        visibility: (K,) labels in {0, 1, 2}
        area: Object scale squared (s^2) used by OKS
        falloff: Optional (K,) per-keypoint OKS constants k_i
        head_box: Optional (x1, y1, x2, y2) head box for PCKh
        box: Optional (x, y, w, h) person box
        score: Detection score
        confidences: Optional (K,) per-keypoint confidences
        track_id: Optional track identity
        image_id: Optional image identifier
    """

    keypoints: np.ndarray = attrs.field(converter=_as_points)
    visibility: np.ndarray = attrs.field(converter=lambda v: np.asarray(v, dtype=np.int64).reshape(-1))
    area: float = 0.0
    falloff: Optional[np.ndarray] = attrs.field(default=None, converter=_optional_array)
    head_box: Optional[Tuple[float, float, float, float]] = None
    box: Optional[Tuple[float, float, float, float]] = None
    score: float = 1.0
    confidences: Optional[np.ndarray] = attrs.field(default=None, converter=_optional_array)
    track_id: Optional[int] = None
    image_id: Optional[int] = None

    def __attrs_post_init__(self):
        k = len(self.keypoints)
        if len(self.visibility) != k:
            raise ShapeError("Visibility length does not match keypoints", dimension='K', expected=k, actual=len(self.visibility))
        if self.falloff is not None:
            if len(self.falloff) != k:
                raise ShapeError("Falloff length does not match keypoints", dimension='K', expected=k, actual=len(self.falloff))
            if np.any(self.falloff <= 0):
                raise MetricError("OKS falloff constants must be positive")

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)

    @property
    def num_labeled(self) -> int:
        return int(np.count_nonzero(self.visibility > 0))


def oks(gt: PersonInstance, dt: PersonInstance, falloff: Optional[Sequence[float]] = None) -> float:
    """
    Object keypoint similarity of a detection against a ground truth.

    OKS = sum_i exp(-d_i^2 / (2 s^2 k_i^2)) [v_i > 0] / sum_i [v_i > 0]
    with s^2 = gt.area.

    Raises:
        MetricError: If the ground truth has no labeled keypoint, no
            positive area or no falloff constants
    """
    k = np.asarray(falloff if falloff is not None else gt.falloff, dtype=np.float64) if (falloff is not None or gt.falloff is not None) else None
    if k is None:
        raise MetricError("OKS needs per-keypoint falloff constants")
    labeled = gt.visibility > 0
    if not labeled.any():
        raise MetricError("OKS is undefined for a ground truth without labeled keypoints")
    if gt.area <= 0:
        raise MetricError(f"OKS needs a positive ground-truth area, got {gt.area}")
    if dt.num_keypoints != gt.num_keypoints:
        raise ShapeError("Detection and ground truth keypoint counts differ",
                         dimension='K', expected=gt.num_keypoints, actual=dt.num_keypoints)

    d2 = np.sum((dt.keypoints - gt.keypoints) ** 2, axis=1)
    e = d2 / (2.0 * gt.area * k ** 2)
    return float(np.exp(-e[labeled]).sum() / labeled.sum())


def oks_matrix(dts: Sequence[PersonInstance], gts: Sequence[PersonInstance], falloff: Sequence[float]) -> np.ndarray:
    """(D, G) OKS matrix; ground truths without labeled keypoints score 0."""
    ious = np.zeros((len(dts), len(gts)))
    for g, gt in enumerate(gts):
        if gt.num_labeled == 0 or gt.area <= 0:
            continue
        for d, dt in enumerate(dts):
            ious[d, g] = oks(gt, dt, falloff)
    return ious


@attrs.define
class EvalResult:
    """
    COCO-style keypoint AP/AR. Entries are -1 when no ground truth falls in
    the corresponding area band.

    Attributes:
        precision: (T, R, A) interpolated precision per threshold, recall
            point and area band
        recall: (T, A) max recall per threshold and area band
    """

    AP: float
    AP50: float
    AP75: float
    AP_M: float
    AP_L: float
    AR: float
    AR50: float
    AR75: float
    AR_M: float
    AR_L: float
    precision: np.ndarray = attrs.field(eq=False, repr=False)
    recall: np.ndarray = attrs.field(eq=False, repr=False)
    thresholds: np.ndarray = attrs.field(eq=False, repr=False)

    def summary(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in
                ('AP', 'AP50', 'AP75', 'AP_M', 'AP_L', 'AR', 'AR50', 'AR75', 'AR_M', 'AR_L')}

    def ap_per_threshold(self, area: str = 'all') -> np.ndarray:
        a = list(AREA_RANGES).index(area)
        p = self.precision[:, :, a]
        return np.array([row[row > -1].mean() if np.any(row > -1) else -1.0 for row in p])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([self.summary()])


def _evaluate_image(
    gts: Sequence[PersonInstance],
    dts: Sequence[PersonInstance],
    area_range: Tuple[float, float],
    thresholds: np.ndarray,
    falloff: Sequence[float],
    max_dets: int
) -> Optional[Dict[str, np.ndarray]]:
    if not gts and not dts:
        return None

    gt_ignore = np.array([
        int(g.num_labeled == 0 or g.area < area_range[0] or g.area > area_range[1]) for g in gts
    ], dtype=np.int64)
    gt_order = np.argsort(gt_ignore, kind='mergesort')
    gts = [gts[i] for i in gt_order]
    gt_ignore = gt_ignore[gt_order]
    dt_order = np.argsort([-d.score for d in dts], kind='mergesort')[:max_dets]
    dts = [dts[i] for i in dt_order]

    ious = oks_matrix(dts, gts, falloff)
    n_t, n_g, n_d = len(thresholds), len(gts), len(dts)
    gt_match = -np.ones((n_t, n_g), dtype=np.int64)
    dt_match = -np.ones((n_t, n_d), dtype=np.int64)
    dt_ignore = np.zeros((n_t, n_d), dtype=bool)

    if n_g and n_d:
        for t, threshold in enumerate(thresholds):
            for d in range(n_d):
                best = min(threshold, 1 - 1e-10)
                m = -1
                for g in range(n_g):
                    if gt_match[t, g] >= 0:
                        continue
                    # a regular match outranks any ignored ground truth
                    if m > -1 and gt_ignore[m] == 0 and gt_ignore[g] == 1:
                        break
                    if ious[d, g] < best:
                        continue
                    best = ious[d, g]
                    m = g
                if m == -1:
                    continue
                dt_ignore[t, d] = bool(gt_ignore[m])
                dt_match[t, d] = m
                gt_match[t, m] = d

    outside = np.array([d.area < area_range[0] or d.area > area_range[1] for d in dts], dtype=bool)
    dt_ignore |= (dt_match < 0) & outside[None, :]
    return {
        'scores': np.array([d.score for d in dts], dtype=np.float64),
        'dt_match': dt_match,
        'dt_ignore': dt_ignore,
        'gt_ignore': gt_ignore,
    }


def _accumulate(evals: List[Dict[str, np.ndarray]], n_t: int, recall_thresholds: np.ndarray):
    precision = -np.ones((n_t, len(recall_thresholds)))
    recall = -np.ones(n_t)
    if not evals:
        return precision, recall

    scores = np.concatenate([e['scores'] for e in evals])
    order = np.argsort(-scores, kind='mergesort')
    dt_match = np.concatenate([e['dt_match'] for e in evals], axis=1)[:, order]
    dt_ignore = np.concatenate([e['dt_ignore'] for e in evals], axis=1)[:, order]
    gt_ignore = np.concatenate([e['gt_ignore'] for e in evals])
    npig = int(np.count_nonzero(gt_ignore == 0))
    if npig == 0:
        return precision, recall

    tps = (dt_match >= 0) & ~dt_ignore
    fps = (dt_match < 0) & ~dt_ignore
    tp_sum = np.cumsum(tps, axis=1).astype(np.float64)
    fp_sum = np.cumsum(fps, axis=1).astype(np.float64)

    for t in range(n_t):
        tp, fp = tp_sum[t], fp_sum[t]
        nd = len(tp)
        rc = tp / npig
        pr = (tp / (fp + tp + np.spacing(1))).tolist()
        recall[t] = rc[-1] if nd else 0.0

        for i in range(nd - 1, 0, -1):
            if pr[i] > pr[i - 1]:
                pr[i - 1] = pr[i]
        q = np.zeros(len(recall_thresholds))
        indices = np.searchsorted(rc, recall_thresholds, side='left')
        for r, p in enumerate(indices):
            if p >= nd:
                break
            q[r] = pr[p]
        precision[t] = q
    return precision, recall


def _mean_valid(values: np.ndarray) -> float:
    valid = values[values > -1]
    return float(valid.mean()) if valid.size else -1.0


def coco_ap_suite(
    gts: Mapping[int, Sequence[PersonInstance]],
    dts: Mapping[int, Sequence[PersonInstance]],
    falloff: Sequence[float],
    thresholds: np.ndarray = OKS_THRESHOLDS,
    max_dets: int = MAX_DETECTIONS
) -> EvalResult:
    """
    AP and AR over OKS thresholds for per-image ground truths and detections.

    Args:
        gts: Ground truths keyed by image id
        dts: Scored detections keyed by image id
        falloff: Per-keypoint OKS constants
        thresholds: OKS thresholds (0.50:0.05:0.95)
        max_dets: Detections kept per image

    Returns:
        EvalResult
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    image_ids = sorted(set(gts) | set(dts))
    n_a = len(AREA_RANGES)
    precision = -np.ones((len(thresholds), len(RECALL_THRESHOLDS), n_a))
    recall = -np.ones((len(thresholds), n_a))

    for a, (label, area_range) in enumerate(AREA_RANGES.items()):
        evals = []
        for image_id in image_ids:
            result = _evaluate_image(list(gts.get(image_id, [])), list(dts.get(image_id, [])),
                                     area_range, thresholds, falloff, max_dets)
            if result is not None:
                evals.append(result)
        precision[:, :, a], recall[:, a] = _accumulate(evals, len(thresholds), RECALL_THRESHOLDS)

    labels = list(AREA_RANGES)
    all_a, med_a, large_a = labels.index('all'), labels.index('medium'), labels.index('large')

    def at(threshold: float) -> Optional[int]:
        hits = np.where(np.isclose(thresholds, threshold))[0]
        return int(hits[0]) if hits.size else None

    def ap(area: int, t: Optional[int] = None) -> float:
        return _mean_valid(precision[:, :, area] if t is None else precision[t, :, area])

    def ar(area: int, t: Optional[int] = None) -> float:
        return _mean_valid(recall[:, area] if t is None else recall[t:t + 1, area])

    t50, t75 = at(0.5), at(0.75)
    result = EvalResult(
        AP=ap(all_a),
        AP50=ap(all_a, t50) if t50 is not None else -1.0,
        AP75=ap(all_a, t75) if t75 is not None else -1.0,
        AP_M=ap(med_a),
        AP_L=ap(large_a),
        AR=ar(all_a),
        AR50=ar(all_a, t50) if t50 is not None else -1.0,
        AR75=ar(all_a, t75) if t75 is not None else -1.0,
        AR_M=ar(med_a),
        AR_L=ar(large_a),
        precision=precision,
        recall=recall,
        thresholds=thresholds,
    )
    logger.info(f"COCO keypoint AP={result.AP:.4f} AP50={result.AP50:.4f} AR={result.AR:.4f} over {len(image_ids)} images")
    return result


@attrs.define
class PCKhResult:
    """
    PCKh rates stored as fractions in [0, 1].

    Attributes:
        per_joint: (K,) rate per joint (nan where never labeled)
        counts: (K,) labeled joints evaluated
        groups: Rate per joint group (Head, Sho, Elb, Wri, Hip, Kne, Ank)
        total: Count-weighted rate over all evaluated joints
        alpha: Threshold fraction of the head size
        skipped: Instances without a head box
    """

    per_joint: np.ndarray
    counts: np.ndarray
    groups: Dict[str, float]
    total: float
    alpha: float
    skipped: int = 0

    def percent(self) -> Dict[str, float]:
        view = {name: 100.0 * rate for name, rate in self.groups.items()}
        view['Mean'] = 100.0 * self.total
        return view

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([self.percent()])


def head_size(head_box: Sequence[float]) -> float:
    """HEAD_SIZE_FACTOR times the head box diagonal."""
    x1, y1, x2, y2 = head_box
    return HEAD_SIZE_FACTOR * float(np.hypot(x2 - x1, y2 - y1))


def pckh(
    preds: Sequence[PersonInstance],
    gts: Sequence[PersonInstance],
    alpha: float = PCKH_ALPHA,
    groups: Mapping[str, Sequence[int]] = MPII_JOINT_GROUPS,
    excluded: Sequence[int] = PCKH_EXCLUDED_JOINTS
) -> PCKhResult:
    """
    Fraction of labeled joints within alpha * head size of the ground truth.

    A joint is correct when its distance is <= alpha * l with l = 0.6 x the
    head box diagonal. Ground truths without a head box are skipped and
    counted.
    """
    if len(preds) != len(gts):
        raise MetricError(f"PCKh needs one prediction per ground truth, got {len(preds)} vs {len(gts)}")
    k = gts[0].num_keypoints if gts else 0
    correct = np.zeros(k)
    counts = np.zeros(k)
    skipped = 0

    for pred, gt in zip(preds, gts):
        if gt.head_box is None:
            skipped += 1
            continue
        threshold = alpha * head_size(gt.head_box)
        labeled = gt.visibility > 0
        dist = np.linalg.norm(pred.keypoints - gt.keypoints, axis=1)
        counts += labeled
        correct += labeled & (dist <= threshold)

    if skipped:
        logger.warning(f"PCKh skipped {skipped} instances without a head box")

    with np.errstate(invalid='ignore', divide='ignore'):
        per_joint = correct / counts

    group_rates = {}
    for name, joints in groups.items():
        joints = [j for j in joints if j < k]
        n = counts[joints].sum()
        group_rates[name] = float(correct[joints].sum() / n) if n else float('nan')

    included = np.array([j not in excluded for j in range(k)], dtype=bool)
    n_total = counts[included].sum()
    total = float(correct[included].sum() / n_total) if n_total else float('nan')
    return PCKhResult(per_joint=per_joint, counts=counts, groups=group_rates, total=total, alpha=alpha, skipped=skipped)


class HeadNormalizedRule:
    """Match when the distance is within alpha x head size of the ground truth."""

    def __init__(self, alpha: float = PCKH_ALPHA):
        self.alpha = alpha

    def threshold(self, gt: PersonInstance) -> float:
        if gt.head_box is None:
            raise MetricError("Head-normalized matching needs ground-truth head boxes")
        return self.alpha * head_size(gt.head_box)


class PixelRadiusRule:
    """Match when the distance is within a fixed pixel radius."""

    def __init__(self, radius: float):
        self.radius = radius

    def threshold(self, gt: PersonInstance) -> float:
        return self.radius


@attrs.define
class MOTAResult:
    """
    Multi-object tracking accuracy per keypoint type and in total.

    Attributes:
        per_keypoint: (K,) MOTA (nan for keypoints never labeled)
        total: 1 - (FN + FP + IDSW) / GT summed over keypoint types
        misses, false_positives, id_switches, num_gt: (K,) counts
    """

    per_keypoint: np.ndarray
    total: float
    misses: np.ndarray
    false_positives: np.ndarray
    id_switches: np.ndarray
    num_gt: np.ndarray

    def to_frame(self, names: Optional[Sequence[str]] = None) -> pd.DataFrame:
        names = list(names) if names is not None else [str(j) for j in range(len(self.per_keypoint))]
        frame = pd.DataFrame({
            'keypoint': names,
            'mota': self.per_keypoint,
            'misses': self.misses,
            'false_positives': self.false_positives,
            'id_switches': self.id_switches,
            'num_gt': self.num_gt,
        })
        return frame


def _greedy_matches(distances: np.ndarray, limits: np.ndarray) -> List[Tuple[int, int]]:
    """Greedy minimum-distance one-to-one matching within per-ground-truth limits."""
    candidates = [
        (distances[g, p], g, p)
        for g in range(distances.shape[0]) for p in range(distances.shape[1])
        if distances[g, p] <= limits[g]
    ]
    candidates.sort()
    used_g, used_p, matches = set(), set(), []
    for _, g, p in candidates:
        if g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        matches.append((g, p))
    return matches


def mota(
    tracked_frames: Sequence[Sequence[PersonInstance]],
    gt_frames: Sequence[Sequence[PersonInstance]],
    match_rule=None
) -> MOTAResult:
    """
    Per-keypoint MOTA over a frame-aligned sequence.

    For each keypoint type and frame, labeled ground-truth joints are matched
    greedily to predicted joints within the rule's distance. An identity
    switch is counted when a ground-truth track is matched to a different
    predicted track id than at its previous match.

    Args:
        tracked_frames: Predictions per frame, each with a track_id
        gt_frames: Ground truths per frame, each with a track_id
        match_rule: HeadNormalizedRule (default) or PixelRadiusRule

    Raises:
        MetricError: If the sequences have different lengths
    """
    if len(tracked_frames) != len(gt_frames):
        raise MetricError(f"Frame counts differ: {len(tracked_frames)} predicted vs {len(gt_frames)} ground truth")
    rule = match_rule or HeadNormalizedRule()

    k = next((inst.num_keypoints for frame in list(gt_frames) + list(tracked_frames) for inst in frame), 0)
    misses = np.zeros(k, dtype=np.int64)
    false_pos = np.zeros(k, dtype=np.int64)
    switches = np.zeros(k, dtype=np.int64)
    num_gt = np.zeros(k, dtype=np.int64)
    last_match: Dict[Tuple[int, int], int] = {}

    for frame_preds, frame_gts in zip(tracked_frames, gt_frames):
        limits_all = np.array([rule.threshold(gt) for gt in frame_gts])
        for j in range(k):
            gts = [g for g, gt in enumerate(frame_gts) if gt.visibility[j] > 0]
            preds = [p for p, pred in enumerate(frame_preds) if pred.visibility[j] > 0]
            num_gt[j] += len(gts)
            if gts and preds:
                gt_points = np.array([frame_gts[g].keypoints[j] for g in gts])
                pred_points = np.array([frame_preds[p].keypoints[j] for p in preds])
                distances = np.linalg.norm(gt_points[:, None, :] - pred_points[None, :, :], axis=2)
                matches = _greedy_matches(distances, limits_all[gts])
            else:
                matches = []

            misses[j] += len(gts) - len(matches)
            false_pos[j] += len(preds) - len(matches)
            for g, p in matches:
                gt_id = frame_gts[gts[g]].track_id
                pred_id = frame_preds[preds[p]].track_id
                key = (j, gt_id)
                if key in last_match and last_match[key] != pred_id:
                    switches[j] += 1
                last_match[key] = pred_id

    with np.errstate(invalid='ignore', divide='ignore'):
        per_keypoint = 1.0 - (misses + false_pos + switches) / num_gt.astype(np.float64)
    per_keypoint[num_gt == 0] = np.nan
    total_gt = num_gt.sum()
    total = float(1.0 - (misses.sum() + false_pos.sum() + switches.sum()) / total_gt) if total_gt else float('nan')
    logger.info(f"MOTA {total:.4f}: FN={misses.sum()} FP={false_pos.sum()} IDSW={switches.sum()} GT={total_gt}")
    return MOTAResult(per_keypoint=per_keypoint, total=total, misses=misses,
                      false_positives=false_pos, id_switches=switches, num_gt=num_gt)
