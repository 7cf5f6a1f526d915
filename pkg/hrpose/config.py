"""
Configuration settings for hrpose.

This module contains the configuration constants, presets and keypoint schemas
used throughout the toolkit, plus the reader for the key-value text format
and its environment-variable overrides.
"""

import logging
import os
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import attrs
import numpy as np

from .errors import ConfigError


logger = logging.getLogger(__name__)

# Project paths
PROJECT_ROOT = Path(__file__).parent.parent
DATA_DIR = PROJECT_ROOT / "data"
OUTPUT_DIR = PROJECT_ROOT / "output"
CHECKPOINT_DIR = OUTPUT_DIR / "checkpoints"
RESULTS_DIR = OUTPUT_DIR / "results"
REPORTS_DIR = OUTPUT_DIR / "reports"

# Checkpoint archive layout
CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BUFFER = "tensors.bin"
CHECKPOINT_FORMAT = "hrpose-flat-v1"
DISPLACEMENT_MAGIC = b"HRDF"

# Logging configuration
LOG_LEVEL = "INFO"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Environment override prefix for every config key
ENV_PREFIX = "HRPOSE_"

# Numerical defaults
DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
HEAD_INIT_STD = 0.001
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Heatmap settings
HEATMAP_STRIDE = 4
HEATMAP_SIGMA = 1.0
HEATMAP_TRUNCATE_SIGMAS = 3.0
QUARTER_OFFSET = 0.25
DEFAULT_ASPECT = 4.0 / 3.0  # height : width

# Augmentation defaults
ROTATION_RANGE = (-45.0, 45.0)
SCALE_RANGE = (0.65, 1.35)
FLIP_PROB = 0.5
HALF_BODY_PROB = 0.3
HALF_BODY_MIN_VISIBLE = 8
HALF_BODY_PADDING = 1.5

# Tracking settings
OKS_ASSOCIATION_FLOOR = 0.2
NMS_IOU = 0.5
BOX_PROPAGATION_EXTENSION = 0.15
ASSOCIATION_WINDOW = 1

# Evaluation settings
OKS_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
MAX_DETECTIONS = 20
AREA_RANGES = {
    'all': (0.0, 1e10),
    'medium': (32.0 ** 2, 96.0 ** 2),
    'large': (96.0 ** 2, 1e10),
}
PCKH_ALPHA = 0.5
HEAD_SIZE_FACTOR = 0.6

# Architecture presets (w8 is a desk-scale test preset, without a published reference)
ARCH_PRESETS = {
    'w32': {'width': 32},
    'w48': {'width': 48},
    'w8': {'width': 8},
}

# #Params (millions) and GFLOPs reported for the canonical networks
REFERENCE_COSTS = {
    ('w32', (256, 192)): {'params_m': 28.5, 'gflops': 7.10},
    ('w48', (256, 192)): {'params_m': 63.6, 'gflops': 14.6},
    ('w32', (384, 288)): {'params_m': 28.5, 'gflops': 16.0},
    ('w48', (384, 288)): {'params_m': 63.6, 'gflops': 32.9},
    ('w32', (256, 256)): {'params_m': 28.5, 'gflops': 9.5},
}
PARAMS_TOLERANCE = 0.02
FLOPS_TOLERANCE = 0.10

# Learning-rate presets (epoch milestones)
LR_PRESETS = {
    'coco': {'base_lr': 1e-3, 'milestones': [(170, 1e-4), (200, 1e-5)], 'total_epochs': 210},
    'posetrack': {'base_lr': 1e-4, 'milestones': [(10, 1e-5), (15, 1e-6)], 'total_epochs': 20},
}

# COCO per-keypoint sigmas; the OKS falloff constant is k_i = 2 * sigma_i
COCO_SIGMAS = np.array([
    0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72,
    0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89
]) / 10.0

KEYPOINT_SCHEMAS = {
    'coco': {
        'names': [
            'nose', 'left_eye', 'right_eye', 'left_ear', 'right_ear',
            'left_shoulder', 'right_shoulder', 'left_elbow', 'right_elbow',
            'left_wrist', 'right_wrist', 'left_hip', 'right_hip',
            'left_knee', 'right_knee', 'left_ankle', 'right_ankle'
        ],
        'flip_pairs': [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)],
        'upper_body': list(range(11)),
        'falloff': (2.0 * COCO_SIGMAS).tolist(),
    },
    'mpii': {
        'names': [
            'r_ankle', 'r_knee', 'r_hip', 'l_hip', 'l_knee', 'l_ankle',
            'pelvis', 'thorax', 'upper_neck', 'head_top',
            'r_wrist', 'r_elbow', 'r_shoulder', 'l_shoulder', 'l_elbow', 'l_wrist'
        ],
        'flip_pairs': [(0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13)],
        'upper_body': [7, 8, 9, 10, 11, 12, 13, 14, 15],
        'falloff': [0.1] * 16,
    },
    'synth5': {
        'names': ['head', 'left_hand', 'right_hand', 'left_foot', 'right_foot'],
        'flip_pairs': [(1, 2), (3, 4)],
        'upper_body': [0, 1, 2],
        'falloff': [0.1] * 5,
    },
}

# PCKh joint groups over the MPII ordering; pelvis and thorax are not evaluated
MPII_JOINT_GROUPS = {
    'Head': [9],
    'Sho': [12, 13],
    'Elb': [11, 14],
    'Wri': [10, 15],
    'Hip': [2, 3],
    'Kne': [1, 4],
    'Ank': [0, 5],
}


def _pairs_converter(pairs: Iterable[Iterable[int]]) -> Tuple[Tuple[int, int], ...]:
    return tuple((int(a), int(b)) for a, b in pairs)


@attrs.define(frozen=True)
class KeypointSchema:
    """
    Keypoint naming, mirroring and falloff for one dataset convention.

    Attributes:
        name: Schema identifier (coco, mpii, synth5 or custom)
        names: Keypoint names in channel order
        flip_pairs: Left/right index pairs swapped under horizontal mirroring
        upper_body: Indices forming the upper-body subset for half-body crops
        falloff: Per-keypoint OKS falloff constants k_i
    """

    name: str
    names: Tuple[str, ...] = attrs.field(converter=tuple)
    flip_pairs: Tuple[Tuple[int, int], ...] = attrs.field(converter=_pairs_converter)
    upper_body: Tuple[int, ...] = attrs.field(converter=tuple)
    falloff: Tuple[float, ...] = attrs.field(converter=lambda v: tuple(float(x) for x in v))

    @property
    def num_keypoints(self) -> int:
        return len(self.names)

    @property
    def lower_body(self) -> Tuple[int, ...]:
        return tuple(i for i in range(self.num_keypoints) if i not in self.upper_body)

    def flip_permutation(self) -> np.ndarray:
        """Channel permutation that swaps every flip pair."""
        perm = np.arange(self.num_keypoints)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm

    @classmethod
    def preset(cls, name: str) -> "KeypointSchema":
        if name not in KEYPOINT_SCHEMAS:
            raise ConfigError(f"Unknown keypoint schema '{name}', expected one of {sorted(KEYPOINT_SCHEMAS)}")
        return cls(name=name, **KEYPOINT_SCHEMAS[name])


def read_key_value_file(path: Path) -> Dict[str, str]:
    """
    Read a key-value text configuration file.

    Args:
        path: Path to a file of `key = value` lines with `#` comments

    Returns:
        Mapping of dotted keys to raw string values

    Raises:
        FileNotFoundError: If the file doesn't exist
        ConfigError: If a line is malformed or a key repeats
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    values: Dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
        values[key] = value

    logger.debug(f"Read {len(values)} config keys from {path}")
    return values


def env_key(key: str, prefix: str = ENV_PREFIX) -> str:
    """Environment variable name overriding a dotted config key."""
    return prefix + key.upper().replace('.', '_')


def apply_env_overrides(
    values: Mapping[str, str],
    known_keys: Iterable[str],
    environ: Optional[Mapping[str, str]] = None,
    prefix: str = ENV_PREFIX
) -> Dict[str, str]:
    """
    Overlay environment variables onto parsed config values.

    Args:
        values: Values read from the config file
        known_keys: Every key the target config accepts
        environ: Environment mapping (defaults to os.environ)
        prefix: Variable prefix

    Returns:
        New mapping with overrides applied
    """
    environ = os.environ if environ is None else environ
    merged = dict(values)
    for key in known_keys:
        name = env_key(key, prefix)
        if name in environ:
            logger.info(f"Config override from environment: {name}")
            merged[key] = environ[name]
    return merged


def check_known_keys(values: Mapping[str, str], known_keys: Iterable[str], source: str) -> None:
    unknown = sorted(set(values) - set(known_keys))
    if unknown:
        raise ConfigError(f"Unknown config keys in {source}: {unknown}")


def parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ConfigError(f"Not a boolean: {value!r}")


def parse_int_list(value: str) -> List[int]:
    try:
        return [int(part) for part in value.split(',') if part.strip()]
    except ValueError as e:
        raise ConfigError(f"Not an integer list: {value!r}") from e


def parse_float_pair(value: str) -> Tuple[float, float]:
    parts = [p for p in value.split(',') if p.strip()]
    if len(parts) != 2:
        raise ConfigError(f"Expected two comma-separated numbers, got {value!r}")
    return float(parts[0]), float(parts[1])


def parse_size(value: str) -> Tuple[int, int]:
    """Parse an `HxW` size string into (height, width)."""
    parts = value.lower().replace('×', 'x').split('x')
    if len(parts) != 2:
        raise ConfigError(f"Expected size as HxW, got {value!r}")
    try:
        height, width = int(parts[0]), int(parts[1])
    except ValueError as e:
        raise ConfigError(f"Expected size as HxW, got {value!r}") from e
    if height <= 0 or width <= 0:
        raise ConfigError(f"Size must be positive, got {value!r}")
    return height, width


def parse_milestones(value: str) -> List[Tuple[int, float]]:
    """Parse `epoch:lr, epoch:lr` milestone lists."""
    milestones = []
    for part in value.split(','):
        part = part.strip()
        if not part:
            continue
        if ':' not in part:
            raise ConfigError(f"Milestone must be epoch:lr, got {part!r}")
        epoch, lr = part.split(':', 1)
        milestones.append((int(epoch), float(lr)))
    return milestones
