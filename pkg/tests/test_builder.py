"""Tests for HRNet construction, the layer tree and exchange-unit gradients."""

import numpy as np
import pytest

from hrpose.builder import (
    ExchangeUnit, ExchangeUnitSpec, FusionMode, HRNetSpec, branch_shapes, build_exchange_block, build_exchange_unit, build_head,
    build_hrnet, build_stage1, build_stem, count_exchange_units, describe, forward, load_hrnet_spec,
)
from hrpose.errors import BuildError, ConfigError, ShapeError
from hrpose.tensor import Tensor, check_gradients, mse_loss, mul, sum as tensor_sum


class TestHRNetSpec:

    def test_w32_branch_widths(self):
        spec = HRNetSpec.preset('w32')
        assert spec.branch_widths == (32, 64, 128, 256)
        assert spec.input_multiple == 32

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            HRNetSpec.preset('w64')

    def test_empty_stage_rejected(self):
        with pytest.raises(BuildError):
            HRNetSpec(stage_blocks=(1, 0, 3))

    def test_fusion_mode_aliases(self):
        assert FusionMode.parse('final-only') is FusionMode.FINAL_ONLY
        assert FusionMode.parse('AcrossStageOnly') is FusionMode.ACROSS_STAGE_ONLY
        with pytest.raises(ConfigError):
            FusionMode.parse('partial')

    def test_dict_round_trip(self):
        spec = HRNetSpec.preset('w48', fusion_mode='final_only', num_keypoints=16)
        assert HRNetSpec.from_dict(spec.to_dict()) == spec

    def test_from_dict_rejects_unknown_fields(self):
        with pytest.raises(ConfigError):
            HRNetSpec.from_dict({'width': 32, 'depth': 50})

    def test_load_from_file_with_env_override(self, tmp_path):
        path = tmp_path / "model.cfg"
        path.write_text("# network\nmodel.arch = w32\nmodel.fusion_mode = across_stage_only\n")
        spec = load_hrnet_spec(path, environ={'HRPOSE_MODEL_WIDTH': '48'})
        assert spec.width == 48
        assert spec.fusion_mode is FusionMode.ACROSS_STAGE_ONLY

    def test_load_rejects_unknown_key(self, tmp_path):
        path = tmp_path / "model.cfg"
        path.write_text("model.widht = 32\n")
        with pytest.raises(ConfigError):
            load_hrnet_spec(path, environ={})


class TestExchangeUnitSpec:

    def test_path_kinds(self):
        spec = ExchangeUnitSpec(in_widths=(32, 64, 128), out_widths=(32, 64, 128), emit=(0, 1, 2))
        assert spec.path(1, 1) == 'identity'
        assert spec.path(0, 2) == 'down x2'
        assert spec.path(2, 0) == 'up x4'

    def test_width_count_mismatch(self):
        with pytest.raises(BuildError):
            ExchangeUnitSpec(in_widths=(32, 64), out_widths=(32,), emit=(0,))

    def test_expansion_requires_full_emit(self):
        with pytest.raises(BuildError):
            ExchangeUnitSpec(in_widths=(32, 64), out_widths=(32, 64), emit=(0,), expansion_widths=(128,))


class TestBuildHRNet:

    def test_canonical_exchange_unit_count(self):
        model = build_hrnet(HRNetSpec.preset('w32'), materialize=False)
        assert count_exchange_units(model) == 8

    def test_branch_shapes_per_stage(self):
        model = build_hrnet(HRNetSpec.preset('w32'), materialize=False)
        shapes = branch_shapes(model, (256, 192))
        assert shapes[0] == [(1, 32, 64, 48), (1, 64, 32, 24), (1, 128, 16, 12)]
        assert shapes[4][-1] == (1, 256, 8, 6)
        # final unit only produces the head branch
        assert shapes[-1] == [(1, 32, 64, 48)]

    def test_stage_blocks_by_stage(self):
        spec = HRNetSpec.preset('w32')
        assert [len(build_exchange_block(stage, spec)) for stage in (2, 3, 4)] == [1, 4, 3]
        with pytest.raises(BuildError):
            build_exchange_block(5, spec)

    def test_stem_quarters_resolution(self):
        rows = []
        assert build_stem(64).trace((1, 3, 256, 192), rows, 'stem') == (1, 64, 64, 48)
        # two 3x3 convolutions with batch-norm: 3*64*9 + 64*64*9 + 2 * 128
        assert sum(row.params for row in rows) == 1728 + 36864 + 256

    def test_stage1_creates_second_branch(self):
        rows = []
        shapes = build_stage1(HRNetSpec.preset('w32')).trace((1, 64, 64, 48), rows, 'stage1')
        assert shapes == [(1, 32, 64, 48), (1, 64, 32, 24)]

    def test_stage1_all_branches_variant(self):
        rows = []
        spec = HRNetSpec.preset('w32', all_branches_from_start=True)
        shapes = build_stage1(spec).trace((1, 64, 64, 48), rows, 'stage1')
        assert shapes[-2:] == [(1, 128, 16, 12), (1, 256, 8, 6)]

    def test_final_unit_emits_one_branch(self):
        unit = build_exchange_unit(ExchangeUnitSpec(in_widths=(2, 4), out_widths=(2, 4), emit=(0,)))
        assert unit.trace([(1, 2, 8, 8), (1, 4, 4, 4)], [], 'unit') == [(1, 2, 8, 8)]

    def test_unit_appends_expansion_branch(self):
        spec = ExchangeUnitSpec(in_widths=(2, 4), out_widths=(2, 4), emit=(0, 1), expansion_widths=(8,))
        shapes = build_exchange_unit(spec).trace([(1, 2, 8, 8), (1, 4, 4, 4)], [], 'unit')
        assert shapes == [(1, 2, 8, 8), (1, 4, 4, 4), (1, 8, 2, 2)]

    def test_head_is_one_by_one_conv(self):
        spec = HRNetSpec.preset('w32')
        rows = []
        shapes = [(1, 32, 64, 48), (1, 64, 32, 24), (1, 128, 16, 12), (1, 256, 8, 6)]
        assert build_head(spec).trace(shapes, rows, 'head') == (1, 17, 64, 48)
        assert sum(row.params for row in rows) == 32 * 17 + 17

    def test_head_branch_out_of_range(self):
        with pytest.raises(BuildError):
            build_hrnet(HRNetSpec.preset('w32', head_branch=5), materialize=False)

    def test_unmaterialized_forward_fails(self, tiny_spec):
        model = build_hrnet(tiny_spec, materialize=False)
        with pytest.raises(BuildError):
            model(Tensor(np.zeros((2, 3, 32, 32))))

    def test_input_size_must_be_divisible(self, tiny_spec):
        model = build_hrnet(tiny_spec)
        with pytest.raises(ShapeError) as excinfo:
            model(Tensor(np.zeros((2, 3, 32, 40))))
        assert excinfo.value.dimension == 'W'

    def test_forward_produces_quarter_resolution_heatmaps(self, tiny_spec):
        model = build_hrnet(tiny_spec)
        out = model(Tensor(np.random.default_rng(1).normal(size=(2, 3, 64, 32)).astype(np.float32)))
        assert out.shape == (2, 3, 16, 8)

    def test_same_seed_same_weights(self, tiny_spec):
        a = build_hrnet(tiny_spec, rng=np.random.default_rng(5))
        b = build_hrnet(tiny_spec, rng=np.random.default_rng(5))
        for (name_a, pa), (name_b, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert name_a == name_b
            np.testing.assert_array_equal(pa.value.data, pb.value.data)

    def test_parameter_names_are_unique_paths(self):
        model = build_hrnet(HRNetSpec.preset('w32'), materialize=False)
        names = [name for name, _ in model.named_parameters()]
        assert len(names) == len(set(names))
        assert all(param.name == name for name, param in model.named_parameters())

    def test_every_parameter_receives_gradient(self, tiny_spec):
        model = build_hrnet(tiny_spec)
        rng = np.random.default_rng(2)
        image = Tensor(rng.normal(size=(2, 3, 32, 32)).astype(np.float32))
        target = Tensor(rng.uniform(size=(2, 3, 8, 8)).astype(np.float32))
        mse_loss(model(image), target).backward()
        missing = [name for name, param in model.named_parameters() if param.grad is None]
        assert missing == []

    def test_heatmap_wrapper_maps_back_to_input_pixels(self, tiny_spec):
        model = build_hrnet(tiny_spec).eval()
        heatmaps = forward(model, Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))
        assert heatmaps.maps.shape == (1, 3, 8, 8)
        assert heatmaps.inverse[0].a == 4.0

    def test_all_branches_variant_within_canonical_budget(self):
        canonical = build_hrnet(HRNetSpec.preset('w32'), materialize=False)
        variant = build_hrnet(HRNetSpec.preset('w32', all_branches_from_start=True), materialize=False)
        assert variant.num_parameters() <= canonical.num_parameters()
        assert all(len(plan.widths) == 4 for plan in variant.plans)

    def test_describe_payload(self, desk_spec):
        text, payload = describe(build_hrnet(desk_spec, materialize=False), (64, 64))
        assert payload['output_shape'] == [1, 5, 16, 16]
        assert payload['exchange_units'] == 8
        assert 'stage1' in text


class TestExchangeUnitGradients:

    @pytest.mark.parametrize('seed', range(10))
    def test_two_branch_unit(self, seed):
        rng = np.random.default_rng(seed)
        unit = ExchangeUnit(ExchangeUnitSpec(in_widths=(2, 4), out_widths=(2, 4), emit=(0, 1)))
        unit.initialize(rng, dtype=np.float64)
        params = [param.value for param in unit.parameters()]
        readouts = [Tensor(rng.normal(size=shape), dtype=np.float64) for shape in ((2, 2, 4, 4), (2, 4, 2, 2))]

        def fn(x1, x2):
            y1, y2 = unit.aggregate([x1, x2])
            return tensor_sum(mul(y1, readouts[0])) + tensor_sum(mul(y2, readouts[1]))

        inputs = [rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 4, 2, 2))]
        assert check_gradients(fn, inputs, params=params) < 1e-4

    def test_mismatched_branch_resolution(self):
        unit = ExchangeUnit(ExchangeUnitSpec(in_widths=(2, 4), out_widths=(2, 4), emit=(0, 1)))
        unit.initialize(np.random.default_rng(0))
        with pytest.raises(ShapeError):
            unit([Tensor(np.zeros((2, 2, 4, 4))), Tensor(np.zeros((2, 4, 4, 4)))])


def zero_parameters(module):
    for param in module.parameters():
        param.value.data[...] = 0.0


class TestZeroedWeights:

    def test_exchange_unit_passes_identity_branch_through(self, rng):
        unit = ExchangeUnit(ExchangeUnitSpec(in_widths=(2, 4, 8), out_widths=(2, 4, 8), emit=(0, 1, 2)))
        unit.initialize(rng)
        zero_parameters(unit)
        unit.eval()
        xs = [Tensor(rng.uniform(size=shape).astype(np.float32)) for shape in ((2, 2, 8, 8), (2, 4, 4, 4), (2, 8, 2, 2))]
        for y, x in zip(unit(xs), xs):
            np.testing.assert_array_equal(y.data, x.data)

    def test_heatmaps_equal_head_bias(self, tiny_spec, rng):
        model = build_hrnet(tiny_spec).eval()
        zero_parameters(model)
        bias = np.array([0.1, 0.2, 0.3], dtype=np.float32).reshape(1, 3, 1, 1)
        model.head.conv.bias.value.data[...] = bias
        out = model(Tensor(rng.normal(size=(2, 3, 32, 32)).astype(np.float32)))
        np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (2, 3, 8, 8)))
