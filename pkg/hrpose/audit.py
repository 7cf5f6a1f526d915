"""
Parameter and FLOP accounting.

Costs come from tracing a built (possibly unmaterialized) network at a given
input size. One multiply-accumulate counts as one FLOP; batch-norm, ReLU,
upsample and elementwise sums count one op per output element.
"""

import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import attrs
import pandas as pd

from .builder import FusionMode, HRNet, HRNetSpec, build_hrnet, count_exchange_units
from .config import FLOPS_TOLERANCE, REFERENCE_COSTS, PARAMS_TOLERANCE
from .errors import ConfigError
from .layers import GraphModule, TraceRow


logger = logging.getLogger(__name__)


@attrs.define
class CostReport:
    """
    Cost of a network at one input size.

    Attributes:
        input_size: (height, width)
        rows: One TraceRow per leaf layer or aggregation
        total_params: Learnable scalars (running statistics excluded)
        total_flops: Multiply-accumulates plus elementwise ops
    """

    input_size: Tuple[int, int]
    rows: List[TraceRow]
    total_params: int
    total_flops: int

    @property
    def total_gflops(self) -> float:
        return self.total_flops / 1e9

    @property
    def params_m(self) -> float:
        return self.total_params / 1e6

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([attrs.asdict(row) for row in self.rows],
                             columns=['name', 'kind', 'params', 'flops', 'output_shape'])
        frame['output_shape'] = frame['output_shape'].map(lambda s: 'x'.join(str(d) for d in s))
        return frame

    def by_kind(self) -> pd.DataFrame:
        return self.to_frame().groupby('kind')[['params', 'flops']].sum().sort_values('flops', ascending=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'input_size': list(self.input_size),
            'total_params': self.total_params,
            'total_gflops': self.total_gflops,
            'rows': [
                {**attrs.asdict(row), 'output_shape': list(row.output_shape)}
                for row in self.rows
            ],
        }


def count_params(model: GraphModule) -> int:
    """Every learnable scalar: conv weights and biases, batch-norm gamma and beta."""
    return model.num_parameters()


def cost_report(model: HRNet, input_size: Tuple[int, int]) -> CostReport:
    rows: List[TraceRow] = []
    model.trace((1, 3, int(input_size[0]), int(input_size[1])), rows)
    report = CostReport(
        input_size=(int(input_size[0]), int(input_size[1])),
        rows=rows,
        total_params=int(sum(row.params for row in rows)),
        total_flops=int(sum(row.flops for row in rows)),
    )
    logger.debug(f"Cost at {input_size[0]}x{input_size[1]}: {report.params_m:.3f}M params, {report.total_gflops:.3f} GFLOPs")
    return report


def count_flops(model: HRNet, input_size: Tuple[int, int]) -> float:
    """GFLOPs of one forward pass at (height, width)."""
    return cost_report(model, input_size).total_gflops


def reference_cost(arch: str, input_size: Tuple[int, int]) -> Dict[str, float]:
    key = (arch, (int(input_size[0]), int(input_size[1])))
    if key not in REFERENCE_COSTS:
        known = [f"{a}@{h}x{w}" for a, (h, w) in REFERENCE_COSTS]
        raise ConfigError(f"No reference cost for {arch} at {input_size[0]}x{input_size[1]}; known: {known}")
    return REFERENCE_COSTS[key]


def compare_reference(arch: str, input_size: Tuple[int, int], report: CostReport) -> Dict[str, Any]:
    """
    Check a report against the reference cost of the same network.

    Returns:
        Dictionary with measured and target values, relative deviations and
        pass flags (params within 2%, GFLOPs within 10%)
    """
    target = reference_cost(arch, input_size)
    params_dev = report.params_m / target['params_m'] - 1.0
    flops_dev = report.total_gflops / target['gflops'] - 1.0
    result = {
        'arch': arch,
        'input_size': f"{input_size[0]}x{input_size[1]}",
        'params_m': report.params_m,
        'target_params_m': target['params_m'],
        'params_deviation': params_dev,
        'params_ok': abs(params_dev) <= PARAMS_TOLERANCE,
        'gflops': report.total_gflops,
        'target_gflops': target['gflops'],
        'gflops_deviation': flops_dev,
        'gflops_ok': abs(flops_dev) <= FLOPS_TOLERANCE,
    }
    result['ok'] = result['params_ok'] and result['gflops_ok']
    level = logging.INFO if result['ok'] else logging.WARNING
    logger.log(level, f"{arch} @ {result['input_size']}: {report.params_m:.2f}M ({params_dev:+.1%}), "
                      f"{report.total_gflops:.2f} GFLOPs ({flops_dev:+.1%})")
    return result


def _variant_row(label: str, spec: HRNetSpec, input_size: Tuple[int, int]) -> Dict[str, Any]:
    model = build_hrnet(spec, materialize=False)
    report = cost_report(model, input_size)
    head_rows = [row for row in report.rows if row.name.startswith('head.')]
    return {
        'variant': label,
        'fusion_mode': spec.fusion_mode.value,
        'all_branches_from_start': spec.all_branches_from_start,
        'head_branch': spec.head_branch,
        'exchange_units': count_exchange_units(model),
        'residual_units': sum(sum(plan.units) for plan in model.plans),
        'params': report.total_params,
        'gflops': report.total_gflops,
        'heatmap_size': 'x'.join(str(d) for d in head_rows[-1].output_shape[2:]),
    }


def ablation_report(arch: str, input_size: Tuple[int, int] = (256, 192), num_keypoints: int = 17) -> pd.DataFrame:
    """
    Structural report of the ablation variants: the three fusion modes, the
    resolution-maintenance network and heads on each of the four branches.
    """
    base = HRNetSpec.preset(arch, num_keypoints=num_keypoints)
    variants = [
        ('final_only', attrs.evolve(base, fusion_mode=FusionMode.FINAL_ONLY)),
        ('across_stage_only', attrs.evolve(base, fusion_mode=FusionMode.ACROSS_STAGE_ONLY)),
        ('full', base),
        ('all_branches_from_start', attrs.evolve(base, all_branches_from_start=True)),
    ]
    variants += [(f"head_branch_{r}", attrs.evolve(base, head_branch=r)) for r in range(1, base.num_branches + 1)]

    rows = []
    for label, spec in variants:
        logger.info(f"Auditing variant {label}")
        rows.append(_variant_row(label, spec, input_size))
    return pd.DataFrame(rows)


def input_size_sweep(arch: str, sizes: Sequence[Tuple[int, int]], num_keypoints: int = 17) -> pd.DataFrame:
    """Params and GFLOPs of one network over several input sizes, with the area-scaling ratio."""
    model = build_hrnet(HRNetSpec.preset(arch, num_keypoints=num_keypoints), materialize=False)
    rows = []
    base: Optional[float] = None
    for size in sizes:
        gflops = count_flops(model, size)
        base = gflops if base is None else base
        rows.append({
            'input_size': f"{size[0]}x{size[1]}",
            'params': count_params(model),
            'gflops': gflops,
            'gflops_ratio': gflops / base,
            'area_ratio': (size[0] * size[1]) / (sizes[0][0] * sizes[0][1]),
        })
    return pd.DataFrame(rows)
