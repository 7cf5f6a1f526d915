"""
Heatmap pipeline: person boxes, affine crops, augmentation, Gaussian
targets, weighted loss, flip testing and quarter-offset decoding.

Coordinate frames: image pixels -> crop (network input) pixels via the crop
transform, then heatmap pixels via a further 1/stride scaling. HeatmapSet
stores the inverse (heatmap -> image) for every instance so decoded
coordinates land in the original image.
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import attrs
import cv2
import numpy as np
from affine import Affine

from .config import (
    DEFAULT_ASPECT, FLIP_PROB, HALF_BODY_MIN_VISIBLE, HALF_BODY_PADDING, HALF_BODY_PROB,
    HEATMAP_SIGMA, HEATMAP_STRIDE, HEATMAP_TRUNCATE_SIGMAS, QUARTER_OFFSET,
    ROTATION_RANGE, SCALE_RANGE, KeypointSchema
)
from .errors import ConfigError, ShapeError
from .metrics import PersonInstance
from .tensor import Tensor, mse_loss, no_grad


logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]


@attrs.define(frozen=True)
class PersonBox:
    """
    Person box normalized to the crop aspect ratio.

    Attributes:
        center: (x, y) in image pixels
        scale: (w, h) in image pixels after aspect extension
        source: Original (x, y, w, h) box
    """

    center: Tuple[float, float]
    scale: Tuple[float, float]
    source: Box

    @property
    def bounds(self) -> Box:
        """(x, y, w, h) of the extended box."""
        w, h = self.scale
        return self.center[0] - w / 2, self.center[1] - h / 2, w, h


@attrs.define
class HeatmapSet:
    """
    Per-instance keypoint heatmaps.

    Attributes:
        maps: (N, K, H', W') confidence maps
        inverse: Per-instance heatmap -> image transform
        weights: Optional (N, K) per-keypoint loss weights (targets only)
    """

    maps: np.ndarray
    inverse: List[Affine] = attrs.field(factory=list)
    weights: Optional[np.ndarray] = None

    @property
    def num_keypoints(self) -> int:
        return self.maps.shape[1]

    @property
    def size(self) -> Tuple[int, int]:
        return self.maps.shape[2], self.maps.shape[3]


@attrs.define(frozen=True)
class AugmentationConfig:
    """
    Training-time augmentation.

    Attributes:
        rotation_range: Degrees, sampled uniformly
        scale_range: Box scale jitter, sampled uniformly
        flip_prob: Horizontal flip probability
        flip_pairs: Left/right keypoint index pairs
        half_body_prob: Probability of a half-body re-crop
        half_body_min_visible: Labeled keypoints required for a half-body re-crop
        half_body_padding: Box growth around the selected keypoints
        upper_body: Keypoint indices of the upper body
        enabled: Master switch; when off every sample is a plain crop
    """

    rotation_range: Tuple[float, float] = ROTATION_RANGE
    scale_range: Tuple[float, float] = SCALE_RANGE
    flip_prob: float = FLIP_PROB
    flip_pairs: Tuple[Tuple[int, int], ...] = ()
    half_body_prob: float = HALF_BODY_PROB
    half_body_min_visible: int = HALF_BODY_MIN_VISIBLE
    half_body_padding: float = HALF_BODY_PADDING
    upper_body: Tuple[int, ...] = ()
    enabled: bool = True

    @classmethod
    def for_schema(cls, schema: KeypointSchema, **overrides) -> "AugmentationConfig":
        return cls(flip_pairs=schema.flip_pairs, upper_body=schema.upper_body, **overrides)


def aspect_of(input_size: Tuple[int, int]) -> float:
    """Height:width ratio of an (height, width) input size."""
    return input_size[0] / input_size[1]


def extend_box_to_aspect(box: Box, aspect: float = DEFAULT_ASPECT) -> PersonBox:
    """
    Grow a box symmetrically about its center until height / width == aspect.

    Args:
        box: (x, y, w, h) in image pixels
        aspect: Target height:width ratio (4:3 by default)

    Returns:
        PersonBox; the box never shrinks

    Raises:
        ShapeError: If the box has non-positive width or height
    """
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise ShapeError("Person box needs positive width and height", dimension='box', expected='> 0', actual=(w, h))
    center = (x + w / 2.0, y + h / 2.0)
    if h / w < aspect:
        h = w * aspect
    elif h / w > aspect:
        w = h / aspect
    return PersonBox(center=center, scale=(w, h), source=(x, y, float(box[2]), float(box[3])))


def box_from_keypoints(keypoints: np.ndarray, visibility: np.ndarray, extension: float) -> Optional[Box]:
    """Bounding box of labeled keypoints grown by `extension` of its length per side."""
    labeled = keypoints[np.asarray(visibility) > 0]
    if len(labeled) == 0:
        return None
    x0, y0 = labeled.min(axis=0)
    x1, y1 = labeled.max(axis=0)
    w, h = max(x1 - x0, 1.0), max(y1 - y0, 1.0)
    w_ext, h_ext = w * (1 + extension), h * (1 + extension)
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    return cx - w_ext / 2.0, cy - h_ext / 2.0, w_ext, h_ext


def crop_transform(
    box: PersonBox,
    out_size: Tuple[int, int],
    rotation: float = 0.0,
    scale_jitter: float = 1.0,
    flip: bool = False
) -> Affine:
    """
    Image -> crop transform for an (height, width) output.

    The box center maps to the output center; the box (scaled by
    scale_jitter) fills the output; rotation is in degrees about the center;
    a flip mirrors the output columns (x' = width - 1 - x).
    """
    out_h, out_w = out_size
    if scale_jitter <= 0:
        raise ShapeError("Degenerate crop transform", dimension='scale', expected='> 0', actual=scale_jitter)
    sx = out_w / (box.scale[0] * scale_jitter)
    sy = out_h / (box.scale[1] * scale_jitter)
    transform = (
        Affine.translation(out_w / 2.0, out_h / 2.0)
        * Affine.rotation(rotation)
        * Affine.scale(sx, sy)
        * Affine.translation(-box.center[0], -box.center[1])
    )
    if flip:
        transform = Affine(-1.0, 0.0, out_w - 1.0, 0.0, 1.0, 0.0) * transform
    if abs(transform.determinant) < 1e-12:
        raise ShapeError("Degenerate crop transform", dimension='determinant', expected='!= 0', actual=transform.determinant)
    return transform


def affine_matrix(transform: Affine) -> np.ndarray:
    """2x3 matrix in the layout cv2 expects."""
    return np.array([[transform.a, transform.b, transform.c],
                     [transform.d, transform.e, transform.f]], dtype=np.float64)


def apply_affine(transform: Affine, points: np.ndarray) -> np.ndarray:
    """Map (..., 2) points through an affine transform."""
    points = np.asarray(points, dtype=np.float64)
    x, y = points[..., 0], points[..., 1]
    return np.stack([transform.a * x + transform.b * y + transform.c,
                     transform.d * x + transform.e * y + transform.f], axis=-1)


@attrs.define
class CropResult:
    image: np.ndarray
    transform: Affine

    def tensor(self) -> Tensor:
        return images_to_tensor([self.image])


def crop_affine(
    image: np.ndarray,
    box: PersonBox,
    out_size: Tuple[int, int],
    rotation: float = 0.0,
    scale_jitter: float = 1.0,
    flip: bool = False
) -> CropResult:
    """
    Bilinearly warp the box region of an (H, W, C) image to out_size.

    Returns:
        The crop and the image -> crop transform
    """
    transform = crop_transform(box, out_size, rotation, scale_jitter, flip)
    out_h, out_w = out_size
    warped = cv2.warpAffine(image, affine_matrix(transform), (int(out_w), int(out_h)), flags=cv2.INTER_LINEAR)
    if warped.ndim == 2:
        warped = warped[:, :, None]
    return CropResult(image=warped, transform=transform)


def images_to_tensor(images: Sequence[np.ndarray], dtype=np.float32) -> Tensor:
    """Stack (H, W, C) uint8 images into an (N, C, H, W) tensor scaled to [0, 1]."""
    batch = np.stack([np.asarray(img) for img in images]).astype(dtype)
    if np.issubdtype(np.asarray(images[0]).dtype, np.integer):
        batch /= 255.0
    return Tensor(np.ascontiguousarray(batch.transpose(0, 3, 1, 2)))


def heatmap_from_image(transform: Affine, stride: int = HEATMAP_STRIDE) -> Affine:
    """Image -> heatmap transform given the image -> crop transform."""
    return Affine.scale(1.0 / stride) * transform


def heatmap_to_input_transform(stride: int = HEATMAP_STRIDE) -> Affine:
    return Affine.scale(stride)


def flip_keypoints(
    keypoints: np.ndarray,
    visibility: np.ndarray,
    width: int,
    flip_pairs: Sequence[Tuple[int, int]]
) -> Tuple[np.ndarray, np.ndarray]:
    """Mirror keypoints horizontally (x' = width - 1 - x) and swap paired channels."""
    perm = _flip_permutation(len(keypoints), flip_pairs)
    flipped = np.array(keypoints, dtype=np.float64)
    flipped[:, 0] = width - 1 - flipped[:, 0]
    return flipped[perm], np.asarray(visibility)[perm]


def _flip_permutation(k: int, flip_pairs: Sequence[Tuple[int, int]]) -> np.ndarray:
    perm = np.arange(k)
    seen = set()
    for a, b in flip_pairs:
        if a == b or a in seen or b in seen or not (0 <= a < k and 0 <= b < k):
            raise ConfigError(f"Flip pairs must be disjoint index pairs in [0, {k}), got {list(flip_pairs)}")
        seen.update((a, b))
        perm[a], perm[b] = b, a
    return perm


def generate_target(
    keypoints: np.ndarray,
    visibility: np.ndarray,
    out_size: Tuple[int, int],
    sigma: float = HEATMAP_SIGMA
) -> HeatmapSet:
    """
    Unit-peak Gaussian targets at quantized keypoint locations.

    Args:
        keypoints: (K, 2) keypoints in heatmap pixels
        visibility: (K,) labels; v > 0 means labeled
        out_size: Heatmap (height, width)
        sigma: Gaussian standard deviation in heatmap pixels

    Returns:
        HeatmapSet with maps (1, K, H', W') and weights (1, K); unlabeled or
        out-of-map keypoints get an all-zero map and weight 0
    """
    height, width = out_size
    k = len(keypoints)
    maps = np.zeros((k, height, width), dtype=np.float32)
    weights = (np.asarray(visibility) > 0).astype(np.float32)
    radius = int(np.ceil(HEATMAP_TRUNCATE_SIGMAS * sigma))

    for j in range(k):
        if weights[j] == 0:
            continue
        mu_x = int(np.floor(keypoints[j, 0] + 0.5))
        mu_y = int(np.floor(keypoints[j, 1] + 0.5))
        if not (0 <= mu_x < width and 0 <= mu_y < height):
            weights[j] = 0
            continue
        x0, x1 = max(0, mu_x - radius), min(width, mu_x + radius + 1)
        y0, y1 = max(0, mu_y - radius), min(height, mu_y + radius + 1)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        dist2 = (xs - mu_x) ** 2 + (ys - mu_y) ** 2
        patch = np.exp(-dist2 / (2.0 * sigma ** 2))
        patch[dist2 > (HEATMAP_TRUNCATE_SIGMAS * sigma) ** 2] = 0.0
        maps[j, y0:y1, x0:x1] = patch

    return HeatmapSet(maps=maps[None], inverse=[], weights=weights[None])


def weighted_heatmap_loss(pred: Tensor, target: HeatmapSet) -> Tensor:
    """MSE between predicted and target heatmaps with per-keypoint weights."""
    return mse_loss(pred, Tensor(target.maps.astype(pred.dtype)), target.weights)


def decode_maps(maps: np.ndarray) -> np.ndarray:
    """
    Argmax with quarter offset, in heatmap pixels.

    The argmax takes the first maximum in row-major order. Along each axis the
    location moves 0.25 px toward the larger of its two neighbours; there is
    no offset when the neighbours are equal or one lies outside the map.

    Args:
        maps: (N, K, H, W)

    Returns:
        (N, K, 3) array of (x, y, confidence)
    """
    n, k, height, width = maps.shape
    flat = maps.reshape(n, k, -1)
    index = np.argmax(flat, axis=2)
    confidence = np.take_along_axis(flat, index[..., None], axis=2)[..., 0]
    py, px = np.divmod(index, width)

    coords = np.stack([px, py], axis=-1).astype(np.float64)
    nn, kk = np.meshgrid(np.arange(n), np.arange(k), indexing='ij')

    inner_x = (px > 0) & (px < width - 1)
    right = maps[nn, kk, py, np.minimum(px + 1, width - 1)]
    left = maps[nn, kk, py, np.maximum(px - 1, 0)]
    coords[..., 0] += np.where(inner_x, np.sign(right - left), 0.0) * QUARTER_OFFSET

    inner_y = (py > 0) & (py < height - 1)
    down = maps[nn, kk, np.minimum(py + 1, height - 1), px]
    up = maps[nn, kk, np.maximum(py - 1, 0), px]
    coords[..., 1] += np.where(inner_y, np.sign(down - up), 0.0) * QUARTER_OFFSET

    return np.concatenate([coords, confidence[..., None].astype(np.float64)], axis=-1)


def decode(heatmaps: HeatmapSet) -> np.ndarray:
    """
    Decode keypoints into original image coordinates.

    Returns:
        (N, K, 3) array of (x, y, confidence)
    """
    if heatmaps.maps.size == 0:
        raise ShapeError("Cannot decode empty heatmaps", dimension='size', expected='> 0', actual=0)
    result = decode_maps(heatmaps.maps)
    for i, inverse in enumerate(heatmaps.inverse):
        result[i, :, :2] = apply_affine(inverse, result[i, :, :2])
    return result


def unflip_maps(maps: np.ndarray, flip_pairs: Sequence[Tuple[int, int]], shift: bool = True) -> np.ndarray:
    """Mirror flipped-input heatmaps back, swap paired channels and optionally shift one column right."""
    perm = _flip_permutation(maps.shape[1], flip_pairs)
    restored = maps[:, perm, :, ::-1].copy()
    if shift:
        restored[:, :, :, 1:] = restored[:, :, :, :-1].copy()
    return restored


def flip_average(
    model: Callable[[Tensor], Tensor],
    image: Tensor,
    flip_pairs: Sequence[Tuple[int, int]],
    shift: bool = True
) -> HeatmapSet:
    """
    Average the heatmaps of an image and of its horizontal mirror.

    Args:
        model: Maps an (N, 3, H, W) tensor to (N, K, H', W') heatmaps
        image: Input batch
        flip_pairs: Left/right keypoint pairs
        shift: Shift the un-mirrored maps one column right

    Returns:
        HeatmapSet whose inverse maps heatmap pixels to input pixels
    """
    with no_grad():
        plain = model(image).data
        mirrored = model(Tensor(np.ascontiguousarray(image.data[:, :, :, ::-1]))).data
    restored = unflip_maps(mirrored, flip_pairs, shift)
    stride = image.shape[2] // plain.shape[2]
    averaged = (plain + restored) / 2.0
    return HeatmapSet(maps=averaged, inverse=[heatmap_to_input_transform(stride)] * plain.shape[0])


def half_body_transform(
    keypoints: np.ndarray,
    visibility: np.ndarray,
    box: PersonBox,
    config: AugmentationConfig,
    rng: np.random.Generator,
    aspect: float = DEFAULT_ASPECT
) -> PersonBox:
    """
    With probability config.half_body_prob, re-center the box on the upper
    or lower body keypoints.

    The new box bounds the selected keypoints, is extended to the aspect
    ratio and then grown by config.half_body_padding. Instances with fewer
    than config.half_body_min_visible labeled keypoints are left unchanged.
    """
    labeled = np.asarray(visibility) > 0
    if labeled.sum() < config.half_body_min_visible or rng.random() >= config.half_body_prob:
        return box

    upper = [i for i in config.upper_body if labeled[i]]
    lower = [i for i in range(len(keypoints)) if i not in config.upper_body and labeled[i]]
    choose_upper = rng.random() < 0.5
    selected = upper if (choose_upper and len(upper) > 2) or len(lower) <= 2 else lower
    if len(selected) < 2:
        return box

    points = keypoints[selected]
    x0, y0 = points.min(axis=0)
    x1, y1 = points.max(axis=0)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return box
    extended = extend_box_to_aspect((x0, y0, x1 - x0, y1 - y0), aspect)
    w, h = extended.scale
    return PersonBox(
        center=extended.center,
        scale=(w * config.half_body_padding, h * config.half_body_padding),
        source=box.source,
    )


def instance_score(confidences: np.ndarray, box_score: float = 1.0, mode: str = 'mean') -> float:
    """Instance score from keypoint confidences: their mean, or the mean times the box score."""
    mean = float(np.mean(confidences))
    if mode == 'mean':
        return mean
    if mode == 'box_product':
        return mean * float(box_score)
    raise ConfigError(f"Unknown instance score mode '{mode}', expected 'mean' or 'box_product'")


@attrs.define
class TrainingSample:
    image: np.ndarray
    target: HeatmapSet
    transform: Affine


def prepare_training_sample(
    image: np.ndarray,
    instance: PersonInstance,
    config: AugmentationConfig,
    input_size: Tuple[int, int],
    rng: np.random.Generator,
    stride: int = HEATMAP_STRIDE,
    sigma: float = HEATMAP_SIGMA
) -> TrainingSample:
    """
    Augment, crop and build targets for one annotated person.

    The instance box is extended to the input aspect, optionally re-centered
    on half the body, jittered in scale and rotation, optionally flipped and
    warped; keypoints follow the same transform (paired channels swap on a
    flip) and become Gaussian targets at 1/stride resolution.
    """
    aspect = aspect_of(input_size)
    keypoints = np.asarray(instance.keypoints, dtype=np.float64)
    visibility = np.asarray(instance.visibility)
    box = extend_box_to_aspect(instance.box, aspect)

    rotation, scale, flip = 0.0, 1.0, False
    if config.enabled:
        box = half_body_transform(keypoints, visibility, box, config, rng, aspect)
        scale = float(rng.uniform(*config.scale_range))
        rotation = float(rng.uniform(*config.rotation_range))
        flip = bool(rng.random() < config.flip_prob)

    crop = crop_affine(image, box, input_size, rotation, scale, flip)
    warped = apply_affine(crop.transform, keypoints)
    if flip:
        perm = _flip_permutation(len(keypoints), config.flip_pairs)
        warped, visibility = warped[perm], visibility[perm]

    heat_size = (input_size[0] // stride, input_size[1] // stride)
    target = generate_target(warped / stride, visibility, heat_size, sigma)
    target.inverse = [~heatmap_from_image(crop.transform, stride)]
    return TrainingSample(image=crop.image, target=target, transform=crop.transform)


@attrs.define
class HeatmapPoseEstimator:
    """
    Top-down pose estimation over person boxes.

    Attributes:
        model: Network mapping (N, 3, H, W) inputs to heatmaps
        input_size: Network input (height, width)
        schema: Keypoint schema (flip pairs)
        flip_test: Average with the mirrored input
        shift: One-column shift of un-mirrored maps
        score_mode: Instance score rule ('mean' or 'box_product')
        batch_size: Crops per forward pass
    """

    model: Callable[[Tensor], Tensor]
    input_size: Tuple[int, int]
    schema: KeypointSchema
    flip_test: bool = True
    shift: bool = True
    score_mode: str = 'mean'
    batch_size: int = 16

    def estimate(
        self,
        image: np.ndarray,
        boxes: Sequence[Box],
        box_scores: Optional[Sequence[float]] = None
    ) -> List[PersonInstance]:
        if len(boxes) == 0:
            return []
        box_scores = list(box_scores) if box_scores is not None else [1.0] * len(boxes)
        if hasattr(self.model, 'eval'):
            self.model.eval()

        aspect = aspect_of(self.input_size)
        results: List[PersonInstance] = []
        for start in range(0, len(boxes), self.batch_size):
            chunk = boxes[start:start + self.batch_size]
            crops = [crop_affine(image, extend_box_to_aspect(box, aspect), self.input_size) for box in chunk]
            batch = images_to_tensor([crop.image for crop in crops])
            if self.flip_test:
                heatmaps = flip_average(self.model, batch, self.schema.flip_pairs, self.shift)
            else:
                with no_grad():
                    heatmaps = HeatmapSet(maps=self.model(batch).data)
            stride = self.input_size[0] // heatmaps.maps.shape[2]
            heatmaps.inverse = [~heatmap_from_image(crop.transform, stride) for crop in crops]
            decoded = decode(heatmaps)

            for offset, (box, coords) in enumerate(zip(chunk, decoded)):
                score = instance_score(coords[:, 2], box_scores[start + offset], self.score_mode)
                results.append(PersonInstance(
                    keypoints=coords[:, :2],
                    visibility=np.full(len(coords), 2, dtype=np.int64),
                    confidences=coords[:, 2],
                    box=tuple(float(v) for v in box),
                    area=float(box[2] * box[3]),
                    score=score,
                ))
        logger.debug(f"Estimated {len(results)} poses")
        return results
