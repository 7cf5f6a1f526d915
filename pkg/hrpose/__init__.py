"""
hrpose - High-resolution keypoint network toolkit

A numpy implementation of a multi-resolution pose network with its own
autograd engine, plus the surrounding pipeline.

This package provides functionality to:
- Build the network from a declarative spec and audit its cost
- Train it on heatmap targets with augmentation and Adam
- Decode heatmaps into keypoints and score them with OKS AP/AR, PCKh and MOTA
- Track poses through video with displacement-field box propagation
"""

__version__ = "0.1.0"
__author__ = "hrpose Development Team"

from .builder import HRNetSpec, build_hrnet, count_exchange_units, describe
from .audit import cost_report, count_flops, count_params, compare_reference, ablation_report
from .heatmap import HeatmapPoseEstimator, decode, flip_average, generate_target
from .metrics import PersonInstance, coco_ap_suite, mota, oks, pckh
from .tracking import TrackingConfig, associate, box_nms, propagate_boxes, track_sequence
from .loader import load_annotations, load_checkpoint, load_results
from .exporter import save_annotations, save_checkpoint, save_results
from .synthetic import SyntheticSpec, generate_synthetic
from .trainer import RunConfig, load_run_config, predict, train
from .utils import setup_logging, ensure_directories

__all__ = [
    # Network
    'HRNetSpec',
    'build_hrnet',
    'count_exchange_units',
    'describe',
    'cost_report',
    'count_flops',
    'count_params',
    'compare_reference',
    'ablation_report',

    # Heatmaps and evaluation
    'HeatmapPoseEstimator',
    'decode',
    'flip_average',
    'generate_target',
    'PersonInstance',
    'coco_ap_suite',
    'mota',
    'oks',
    'pckh',

    # Tracking
    'TrackingConfig',
    'associate',
    'box_nms',
    'propagate_boxes',
    'track_sequence',

    # Data and training
    'load_annotations',
    'load_checkpoint',
    'load_results',
    'save_annotations',
    'save_checkpoint',
    'save_results',
    'SyntheticSpec',
    'generate_synthetic',
    'RunConfig',
    'load_run_config',
    'predict',
    'train',

    # Utilities
    'setup_logging',
    'ensure_directories',
]
