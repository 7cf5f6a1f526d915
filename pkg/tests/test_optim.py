"""Tests for the Adam update and learning-rate schedules."""

import numpy as np
import pytest

from hrpose.errors import ConfigError, ShapeError
from hrpose.optim import AdamState, LrSchedule, adam_step
from hrpose.tensor import Tensor


def param(value):
    return Tensor(np.full((1, 1, 1, 1), value), dtype=np.float64)


class TestAdam:

    def test_first_step_moves_by_learning_rate(self):
        params = {'w': param(1.0)}
        adam_step(params, {'w': np.ones((1, 1, 1, 1))}, AdamState(lr=0.01))
        assert params['w'].data.item() == pytest.approx(0.99, abs=1e-6)

    def test_step_is_scale_invariant(self):
        small, large = {'w': param(0.0)}, {'w': param(0.0)}
        adam_step(small, {'w': np.full((1, 1, 1, 1), 1e-3)}, AdamState(lr=0.1))
        adam_step(large, {'w': np.full((1, 1, 1, 1), 1e3)}, AdamState(lr=0.1))
        assert small['w'].data.item() == pytest.approx(large['w'].data.item(), rel=1e-4)

    def test_missing_gradient_leaves_parameter(self):
        params = {'w': param(1.0), 'b': param(2.0)}
        state = adam_step(params, {'w': np.ones((1, 1, 1, 1)), 'b': None}, AdamState())
        assert params['b'].data.item() == 2.0
        assert 'b' not in state.m
        assert state.t == 1

    def test_minimizes_quadratic(self):
        params = {'w': param(1.0)}
        state = AdamState(lr=0.05)
        for _ in range(200):
            adam_step(params, {'w': 2.0 * params['w'].data}, state)
        assert abs(params['w'].data.item()) < 0.1

    def test_gradient_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step({'w': param(1.0)}, {'w': np.ones((1, 1, 1, 2))}, AdamState())

    @pytest.mark.parametrize('lr', [0.0, -1e-3])
    def test_learning_rate_must_be_positive(self, lr):
        with pytest.raises(ConfigError):
            AdamState(lr=lr)


class TestLrSchedule:

    def test_coco_preset(self):
        schedule = LrSchedule.preset('coco')
        assert schedule.total_epochs == 210
        assert schedule.lr_at(169) == 1e-3
        assert schedule.lr_at(170) == 1e-4
        assert schedule.lr_at(209) == 1e-5

    def test_posetrack_preset(self):
        rates = LrSchedule.preset('posetrack').as_list()
        assert len(rates) == 20
        assert rates[9] == 1e-4
        assert rates[10] == 1e-5
        assert rates[15] == 1e-6

    def test_no_milestones(self):
        assert LrSchedule(base_lr=0.01, milestones=[], total_epochs=3).as_list() == [0.01] * 3

    def test_milestones_must_increase(self):
        with pytest.raises(ConfigError):
            LrSchedule(base_lr=1e-3, milestones=[(5, 1e-4), (5, 1e-5)], total_epochs=10)

    def test_milestone_beyond_schedule(self):
        with pytest.raises(ConfigError):
            LrSchedule(base_lr=1e-3, milestones=[(10, 1e-4)], total_epochs=10)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            LrSchedule.preset('imagenet')
