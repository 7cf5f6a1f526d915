"""Tests for parameter and FLOP accounting and the ablation reports."""

import pytest

from hrpose.audit import (
    ablation_report, compare_reference, cost_report, count_flops, count_params, input_size_sweep, reference_cost,
)
from hrpose.builder import HRNetSpec, build_hrnet
from hrpose.config import REFERENCE_COSTS
from hrpose.errors import ConfigError


@pytest.fixture(scope='module')
def w32_report():
    return cost_report(build_hrnet(HRNetSpec.preset('w32'), materialize=False), (256, 192))


class TestCostReport:

    def test_w32_matches_reference(self, w32_report):
        result = compare_reference('w32', (256, 192), w32_report)
        assert result['params_ok']
        assert result['gflops_ok']
        assert result['ok']

    @pytest.mark.parametrize('arch, input_size', sorted(REFERENCE_COSTS))
    def test_every_reference_point(self, arch, input_size):
        report = cost_report(build_hrnet(HRNetSpec.preset(arch), materialize=False), input_size)
        result = compare_reference(arch, input_size, report)
        assert result['params_ok'], result
        assert result['gflops_ok'], result

    def test_traced_params_match_parameter_count(self, w32_report):
        model = build_hrnet(HRNetSpec.preset('w32'), materialize=False)
        assert w32_report.total_params == count_params(model)

    def test_w48_params_match_reference(self):
        report = cost_report(build_hrnet(HRNetSpec.preset('w48'), materialize=False), (256, 192))
        assert compare_reference('w48', (256, 192), report)['params_ok']

    def test_report_tables(self, w32_report):
        frame = w32_report.to_frame()
        assert frame['params'].sum() == w32_report.total_params
        assert frame['flops'].sum() == w32_report.total_flops
        assert 'conv' in ' '.join(w32_report.by_kind().index)
        assert w32_report.to_dict()['input_size'] == [256, 192]

    def test_unknown_reference(self):
        with pytest.raises(ConfigError):
            reference_cost('w8', (256, 192))

    def test_params_independent_of_input_size(self, desk_spec):
        model = build_hrnet(desk_spec, materialize=False)
        small, large = cost_report(model, (64, 64)), cost_report(model, (128, 128))
        assert small.total_params == large.total_params
        # stride-2 and upsampling layers keep every map at a fixed fraction of the input
        assert large.total_flops == pytest.approx(4 * small.total_flops, rel=1e-9)


class TestAblation:

    @pytest.fixture(scope='class')
    def report(self):
        return ablation_report('w32').set_index('variant')

    def test_exchange_units_per_fusion_mode(self, report):
        assert report.loc['final_only', 'exchange_units'] == 1
        assert report.loc['across_stage_only', 'exchange_units'] == 3
        assert report.loc['full', 'exchange_units'] == 8

    def test_head_branch_heatmap_sizes(self, report):
        sizes = [report.loc[f"head_branch_{r}", 'heatmap_size'] for r in range(1, 5)]
        assert sizes == ['64x48', '32x24', '16x12', '8x6']

    def test_all_branches_from_start_variant(self, report):
        assert report.loc['all_branches_from_start', 'params'] <= report.loc['full', 'params']

    def test_input_size_sweep(self):
        sweep = input_size_sweep('w32', [(256, 192), (384, 288)])
        assert sweep['params'].nunique() == 1
        assert sweep.loc[1, 'area_ratio'] == pytest.approx(2.25)
        assert sweep.loc[1, 'gflops_ratio'] == pytest.approx(2.25, rel=1e-9)

    def test_w48_flops_scale_with_input_area(self):
        sweep = input_size_sweep('w48', [(256, 192), (384, 288)])
        assert 2.20 <= sweep.loc[1, 'gflops_ratio'] <= 2.30

    def test_count_flops_in_gflops(self, w32_report):
        model = build_hrnet(HRNetSpec.preset('w32'), materialize=False)
        assert count_flops(model, (256, 192)) == pytest.approx(w32_report.total_gflops)
