"""Shared fixtures for the hrpose test suite."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from hrpose.builder import HRNetSpec
from hrpose.config import KeypointSchema
from hrpose.metrics import PersonInstance


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def synth_schema():
    return KeypointSchema.preset('synth5')


@pytest.fixture
def coco_schema():
    return KeypointSchema.preset('coco')


@pytest.fixture
def desk_spec(synth_schema):
    """Desk-scale network predicting the synthetic keypoints."""
    return HRNetSpec.preset('w8', num_keypoints=synth_schema.num_keypoints)


@pytest.fixture
def tiny_spec():
    """Smallest network with the full topology, for fast forward/backward passes."""
    return HRNetSpec(width=2, units_per_block=1, stage1_units=1, stage1_width=4, stem_width=4, num_keypoints=3)


def make_person(keypoints, visibility=None, area=1000.0, falloff=0.1, **kwargs) -> PersonInstance:
    """Build a PersonInstance with a uniform falloff."""
    keypoints = np.asarray(keypoints, dtype=np.float64)
    k = len(keypoints)
    visibility = np.full(k, 2) if visibility is None else visibility
    return PersonInstance(keypoints=keypoints, visibility=visibility, area=area, falloff=[falloff] * k, **kwargs)


@pytest.fixture
def person_factory():
    return make_person
