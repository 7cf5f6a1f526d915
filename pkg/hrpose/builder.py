"""
HRNet construction from a declarative spec.

The network is a stem, a stage of residual bottlenecks, a degenerate exchange
unit that creates the second branch, and a sequence of exchange blocks. Each
block runs residual units on every branch in parallel and then (depending on
the fusion mode) an exchange unit computing Y_k = relu(sum_i a(X_i, k)).
Units that end a stage also emit the next lower-resolution branch.
"""

import enum
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import attrs
import numpy as np

from . import tensor as T
from .config import (
    ARCH_PRESETS, DEFAULT_DTYPE, HEAD_INIT_STD, HEATMAP_STRIDE,
    apply_env_overrides, check_known_keys, parse_bool, parse_int_list, read_key_value_file
)
from .errors import BuildError, ConfigError, ShapeError
from .layers import (
    BatchNorm2d, Conv2d, GraphModule, Identity, ModuleList, ReLU, Sequential,
    Shape, TraceRow, Upsample, add_all, trace_add
)
from .tensor import Tensor


logger = logging.getLogger(__name__)


class FusionMode(str, enum.Enum):
    FINAL_ONLY = 'final_only'
    ACROSS_STAGE_ONLY = 'across_stage_only'
    FULL = 'full'

    @classmethod
    def parse(cls, value: Any) -> "FusionMode":
        if isinstance(value, cls):
            return value
        normalized = str(value).strip().replace('-', '_')
        aliases = {'finalonly': cls.FINAL_ONLY, 'acrossstageonly': cls.ACROSS_STAGE_ONLY, 'full': cls.FULL}
        key = normalized.lower().replace('_', '')
        if key not in aliases:
            raise ConfigError(f"Unknown fusion mode '{value}', expected one of {[m.value for m in cls]}")
        return aliases[key]


MID_WIDTH_RULES = ('source', 'target')


@attrs.define(frozen=True)
class HRNetSpec:
    """
    Declarative description of an HRNet.

    Attributes:
        width: Width C of the highest-resolution branch
        stage_blocks: Exchange-block counts of stages 2, 3, 4, ...
        units_per_block: Residual units per branch in each exchange block
        stage1_units: Bottleneck units in stage 1
        stage1_width: Bottleneck width (output width is 4x)
        stem_width: Channels produced by the stem
        fusion_mode: Which exchange units are kept
        all_branches_from_start: Create every branch after stage 1
        head_branch: 1-based branch feeding the heatmap regressor
        num_keypoints: Heatmap channels K
        downsample_mid_width: Width of intermediate convs in multi-step
            downsample paths ('source' or 'target' branch width)
    """

    width: int = attrs.field(default=32, validator=attrs.validators.gt(0))
    stage_blocks: Tuple[int, ...] = attrs.field(default=(1, 4, 3), converter=tuple)
    units_per_block: int = attrs.field(default=4, validator=attrs.validators.ge(0))
    stage1_units: int = attrs.field(default=4, validator=attrs.validators.gt(0))
    stage1_width: int = 64
    stem_width: int = 64
    fusion_mode: FusionMode = attrs.field(default=FusionMode.FULL, converter=FusionMode.parse)
    all_branches_from_start: bool = False
    head_branch: int = 1
    num_keypoints: int = attrs.field(default=17, validator=attrs.validators.gt(0))
    downsample_mid_width: str = attrs.field(default='source', validator=attrs.validators.in_(MID_WIDTH_RULES))

    @stage_blocks.validator
    def _check_stage_blocks(self, attribute, value):
        if not value or any(int(n) < 1 for n in value):
            raise BuildError(f"Every stage needs at least one exchange block, got {value}")

    @property
    def num_branches(self) -> int:
        return len(self.stage_blocks) + 1

    @property
    def branch_widths(self) -> Tuple[int, ...]:
        return tuple(self.width * 2 ** r for r in range(self.num_branches))

    @property
    def stage1_out(self) -> int:
        return self.stage1_width * 4

    @property
    def input_multiple(self) -> int:
        # stem halves twice, then one halving per extra branch
        return 2 ** (self.num_branches + 1)

    @classmethod
    def preset(cls, name: str, **overrides) -> "HRNetSpec":
        if name not in ARCH_PRESETS:
            raise ConfigError(f"Unknown architecture preset '{name}', expected one of {sorted(ARCH_PRESETS)}")
        return cls(**{**ARCH_PRESETS[name], **overrides})

    def to_dict(self) -> Dict[str, Any]:
        values = attrs.asdict(self)
        values['stage_blocks'] = list(self.stage_blocks)
        values['fusion_mode'] = self.fusion_mode.value
        return values

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "HRNetSpec":
        known = {field.name for field in attrs.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"Unknown HRNetSpec fields: {sorted(unknown)}")
        return cls(**values)


SPEC_KEYS = (
    'arch', 'width', 'stage_blocks', 'units_per_block', 'stage1_units', 'fusion_mode',
    'all_branches_from_start', 'head_branch', 'num_keypoints', 'downsample_mid_width'
)


def spec_from_mapping(values: Mapping[str, str]) -> HRNetSpec:
    """Build an HRNetSpec from raw key-value strings (keys without the `model.` prefix)."""
    check_known_keys(values, SPEC_KEYS, 'model section')
    parsers = {
        'width': int,
        'stage_blocks': lambda v: tuple(parse_int_list(v)),
        'units_per_block': int,
        'stage1_units': int,
        'fusion_mode': FusionMode.parse,
        'all_branches_from_start': parse_bool,
        'head_branch': int,
        'num_keypoints': int,
        'downsample_mid_width': str,
    }
    try:
        fields = {key: parsers[key](value) for key, value in values.items() if key != 'arch'}
    except ValueError as e:
        raise ConfigError(f"Invalid model config value: {e}") from e
    if 'arch' in values:
        return HRNetSpec.preset(values['arch'], **fields)
    return HRNetSpec(**fields)


def load_hrnet_spec(path: Path, environ: Optional[Mapping[str, str]] = None) -> HRNetSpec:
    """
    Load an HRNetSpec from a key-value text file.

    Keys may be bare (`width = 32`) or carry the `model.` section prefix.
    Every key can be overridden with HRPOSE_MODEL_<KEY>.
    """
    raw = read_key_value_file(path)
    values = {key[len('model.'):] if key.startswith('model.') else key: value for key, value in raw.items()}
    check_known_keys(values, SPEC_KEYS, str(path))
    values = apply_env_overrides(values, SPEC_KEYS, environ, prefix='HRPOSE_MODEL_')
    spec = spec_from_mapping(values)
    logger.info(f"Loaded HRNet spec from {path}: width={spec.width}, fusion={spec.fusion_mode.value}")
    return spec


@attrs.define(frozen=True)
class ExchangeUnitSpec:
    """
    Shape of one exchange unit.

    Attributes:
        in_widths: Widths of the s input branches (highest resolution first)
        out_widths: Width of output Y_k for every input index k
        emit: Indices k actually computed (all of them except in a final unit)
        expansion_widths: Widths of new branches appended after Y_s, each
            derived from the previous lowest-resolution output
        mid_width: Intermediate width rule of multi-step downsample paths
    """

    in_widths: Tuple[int, ...] = attrs.field(converter=tuple)
    out_widths: Tuple[int, ...] = attrs.field(converter=tuple)
    emit: Tuple[int, ...] = attrs.field(converter=tuple)
    expansion_widths: Tuple[int, ...] = attrs.field(default=(), converter=tuple)
    mid_width: str = 'source'

    def __attrs_post_init__(self):
        if len(self.in_widths) != len(self.out_widths):
            raise BuildError(f"Exchange unit needs one output width per input, got {self.in_widths} -> {self.out_widths}")
        if any(k < 0 or k >= len(self.in_widths) for k in self.emit):
            raise BuildError(f"Exchange unit emits unknown branches {self.emit}")
        if self.expansion_widths and tuple(self.emit) != tuple(range(len(self.in_widths))):
            raise BuildError("A branch-creating exchange unit must emit every branch")

    @property
    def in_branches(self) -> int:
        return len(self.in_widths)

    def path(self, i: int, k: int) -> str:
        """Describe a(X_i, k): identity, down x n, up x factor, or a same-resolution width change."""
        if i == k:
            return 'identity' if self.in_widths[i] == self.out_widths[k] else 'conv3x3'
        if i < k:
            return f"down x{k - i}"
        return f"up x{2 ** (i - k)}"


def conv_bn(in_width: int, out_width: int, kernel: int = 3, stride: int = 1, relu: bool = True) -> Sequential:
    layers = [Conv2d(in_width, out_width, kernel, stride=stride), BatchNorm2d(out_width)]
    if relu:
        layers.append(ReLU())
    return Sequential(*layers)


class BasicBlock(GraphModule):
    """Residual unit of two 3x3 convolutions with an identity skip."""

    def __init__(self, width: int):
        super().__init__()
        self.conv1 = Conv2d(width, width, 3)
        self.bn1 = BatchNorm2d(width)
        self.relu = ReLU()
        self.conv2 = Conv2d(width, width, 3)
        self.bn2 = BatchNorm2d(width)

    def forward(self, x: Tensor) -> Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(T.add(out, x))

    def trace(self, shape: Shape, rows: List[TraceRow], name: str) -> Shape:
        out = self.conv1.trace(shape, rows, f"{name}.conv1")
        out = self.bn1.trace(out, rows, f"{name}.bn1")
        out = self.relu.trace(out, rows, f"{name}.relu1")
        out = self.conv2.trace(out, rows, f"{name}.conv2")
        out = self.bn2.trace(out, rows, f"{name}.bn2")
        out = trace_add([out, shape], rows, f"{name}.add")
        return self.relu.trace(out, rows, f"{name}.relu2")


class Bottleneck(GraphModule):
    """Residual bottleneck 1x1 -> 3x3 -> 1x1 (4x expansion) with optional projection skip."""

    def __init__(self, in_width: int, width: int = 64, expansion: int = 4):
        super().__init__()
        out_width = width * expansion
        self.conv1 = Conv2d(in_width, width, 1)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, out_width, 1)
        self.bn3 = BatchNorm2d(out_width)
        self.relu = ReLU()
        self.projection = conv_bn(in_width, out_width, 1, relu=False) if in_width != out_width else None

    def forward(self, x: Tensor) -> Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        skip = self.projection(x) if self.projection is not None else x
        return self.relu(T.add(out, skip))

    def trace(self, shape: Shape, rows: List[TraceRow], name: str) -> Shape:
        out = self.conv1.trace(shape, rows, f"{name}.conv1")
        out = self.bn1.trace(out, rows, f"{name}.bn1")
        out = self.relu.trace(out, rows, f"{name}.relu1")
        out = self.conv2.trace(out, rows, f"{name}.conv2")
        out = self.bn2.trace(out, rows, f"{name}.bn2")
        out = self.relu.trace(out, rows, f"{name}.relu2")
        out = self.conv3.trace(out, rows, f"{name}.conv3")
        out = self.bn3.trace(out, rows, f"{name}.bn3")
        skip = self.projection.trace(shape, rows, f"{name}.projection") if self.projection is not None else shape
        out = trace_add([out, skip], rows, f"{name}.add")
        return self.relu.trace(out, rows, f"{name}.relu3")


class BranchExpansion(Sequential):
    """Y_{s+1} = relu(bn(conv3x3 stride 2 (Y_s)))."""

    def __init__(self, in_width: int, out_width: int):
        super().__init__(Conv2d(in_width, out_width, 3, stride=2), BatchNorm2d(out_width), ReLU())


def build_path(spec: ExchangeUnitSpec, i: int, k: int) -> GraphModule:
    """Module computing a(X_i, k) before summation (no trailing ReLU)."""
    in_width, out_width = spec.in_widths[i], spec.out_widths[k]
    if i == k:
        if in_width == out_width:
            return Identity()
        return conv_bn(in_width, out_width, 3, relu=False)
    if i < k:
        steps = k - i
        mid = in_width if spec.mid_width == 'source' else out_width
        layers: List[GraphModule] = []
        width = in_width
        for _ in range(steps - 1):
            layers += [Conv2d(width, mid, 3, stride=2), BatchNorm2d(mid), ReLU()]
            width = mid
        layers += [Conv2d(width, out_width, 3, stride=2), BatchNorm2d(out_width)]
        return Sequential(*layers)
    return Sequential(Conv2d(in_width, out_width, 1), BatchNorm2d(out_width), Upsample(2 ** (i - k)))


class ExchangeUnit(GraphModule):
    """Fusion layer Y_k = relu(sum_i a(X_i, k)), optionally emitting new branches."""

    def __init__(self, spec: ExchangeUnitSpec):
        super().__init__()
        self.spec = spec
        self.paths = ModuleList([
            ModuleList([build_path(spec, i, k) for i in range(spec.in_branches)]) for k in spec.emit
        ])
        self.relu = ReLU()
        expansions = []
        previous = spec.out_widths[-1]
        for width in spec.expansion_widths:
            expansions.append(BranchExpansion(previous, width))
            previous = width
        self.expansions = ModuleList(expansions)

    def _check_shapes(self, shapes: Sequence[Shape]) -> None:
        if len(shapes) != self.spec.in_branches:
            raise ShapeError("Exchange unit got the wrong number of branches",
                             dimension='branches', expected=self.spec.in_branches, actual=len(shapes))
        base_h, base_w = shapes[0][2], shapes[0][3]
        for i, shape in enumerate(shapes):
            if shape[1] != self.spec.in_widths[i]:
                raise ShapeError(f"Exchange unit branch {i + 1} width mismatch",
                                 dimension='C', expected=self.spec.in_widths[i], actual=shape[1])
            expected = (base_h // 2 ** i, base_w // 2 ** i)
            if (shape[2], shape[3]) != expected or base_h % 2 ** i or base_w % 2 ** i:
                raise ShapeError(f"Exchange unit branch {i + 1} resolution mismatch",
                                 dimension='HW', expected=expected, actual=(shape[2], shape[3]))

    def aggregate(self, xs: Sequence[Tensor]) -> List[Tensor]:
        """Pre-activation sums sum_i a(X_i, k) for every emitted k."""
        self._check_shapes([x.shape for x in xs])
        return [add_all([path(x) for path, x in zip(paths, xs)]) for paths in self.paths]

    def forward(self, xs: Sequence[Tensor]) -> List[Tensor]:
        outputs = [self.relu(total) for total in self.aggregate(xs)]
        for expansion in self.expansions:
            outputs.append(expansion(outputs[-1]))
        return outputs

    def trace(self, shapes: Sequence[Shape], rows: List[TraceRow], name: str) -> List[Shape]:
        self._check_shapes(shapes)
        outputs = []
        for j, (k, paths) in enumerate(zip(self.spec.emit, self.paths)):
            traced = [path.trace(shape, rows, f"{name}.paths.{j}.{i}") for i, (path, shape) in enumerate(zip(paths, shapes))]
            total = trace_add(traced, rows, f"{name}.sum{k + 1}")
            outputs.append(self.relu.trace(total, rows, f"{name}.relu{k + 1}"))
        for e, expansion in enumerate(self.expansions):
            outputs.append(expansion.trace(outputs[-1], rows, f"{name}.expansions.{e}"))
        return outputs

    def extra_repr(self) -> str:
        return f"in={list(self.spec.in_widths)}, emit={[k + 1 for k in self.spec.emit]}, new={list(self.spec.expansion_widths)}"


class ExchangeBlock(GraphModule):
    """Residual units on every branch followed by an optional exchange unit or bare branch expansion."""

    def __init__(
        self,
        widths: Sequence[int],
        units: Sequence[int],
        unit: Optional[ExchangeUnit] = None,
        expansion: Optional[BranchExpansion] = None
    ):
        super().__init__()
        self.widths = tuple(widths)
        self.units = tuple(units)
        self.branches = ModuleList([Sequential(*[BasicBlock(w) for _ in range(n)]) for w, n in zip(widths, units)])
        self.exchange = unit
        self.expansion = expansion

    def forward(self, xs: Sequence[Tensor]) -> List[Tensor]:
        ys = [branch(x) for branch, x in zip(self.branches, xs)]
        if self.exchange is not None:
            return self.exchange(ys)
        if self.expansion is not None:
            ys.append(self.expansion(ys[-1]))
        return ys

    def trace(self, shapes: Sequence[Shape], rows: List[TraceRow], name: str) -> List[Shape]:
        ys = [branch.trace(shape, rows, f"{name}.branches.{r}") for r, (branch, shape) in enumerate(zip(self.branches, shapes))]
        if self.exchange is not None:
            return self.exchange.trace(ys, rows, f"{name}.exchange")
        if self.expansion is not None:
            ys.append(self.expansion.trace(ys[-1], rows, f"{name}.expansion"))
        return ys

    def extra_repr(self) -> str:
        return f"widths={list(self.widths)}, units={list(self.units)}"


class Stage1(GraphModule):
    """Bottleneck units followed by the degenerate single-input exchange unit creating the parallel branches."""

    def __init__(self, bottlenecks: Sequential, transition: ExchangeUnit):
        super().__init__()
        self.bottlenecks = bottlenecks
        self.transition = transition

    def forward(self, x: Tensor) -> List[Tensor]:
        return self.transition([self.bottlenecks(x)])

    def trace(self, shape: Shape, rows: List[TraceRow], name: str) -> List[Shape]:
        out = self.bottlenecks.trace(shape, rows, f"{name}.bottlenecks")
        return self.transition.trace([out], rows, f"{name}.transition")


class Head(GraphModule):
    """1x1 heatmap regressor on the selected branch."""

    def __init__(self, in_width: int, num_keypoints: int, branch: int):
        super().__init__()
        self.branch = branch
        self.conv = Conv2d(in_width, num_keypoints, 1, bias=True, init='normal', std=HEAD_INIT_STD)

    def _select(self, xs):
        return xs[0] if len(xs) == 1 else xs[self.branch - 1]

    def forward(self, xs: Sequence[Tensor]) -> Tensor:
        return self.conv(self._select(xs))

    def trace(self, shapes: Sequence[Shape], rows: List[TraceRow], name: str) -> Shape:
        return self.conv.trace(self._select(shapes), rows, f"{name}.conv")


class HRNet(GraphModule):
    """Full network: stem, stage 1, exchange blocks, head."""

    def __init__(self, spec: HRNetSpec, stem: Sequential, stage1: Stage1, blocks: ModuleList, head: Head):
        super().__init__()
        self.spec = spec
        self.stem = stem
        self.stage1 = stage1
        self.blocks = blocks
        self.head = head

    def _check_input(self, shape: Shape) -> None:
        if shape[1] != 3:
            raise ShapeError("HRNet expects RGB input", dimension='C', expected=3, actual=shape[1])
        multiple = self.spec.input_multiple
        for dim, size in (('H', shape[2]), ('W', shape[3])):
            if size % multiple:
                raise ShapeError(f"Input size must be divisible by {multiple}", dimension=dim, expected=f"multiple of {multiple}", actual=size)

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x.shape)
        xs = self.stage1(self.stem(x))
        for block in self.blocks:
            xs = block(xs)
        return self.head(xs)

    def trace(self, shape: Shape, rows: List[TraceRow], name: str = '') -> Shape:
        self._check_input(shape)
        prefix = f"{name}." if name else ''
        out = self.stem.trace(shape, rows, f"{prefix}stem")
        shapes = self.stage1.trace(out, rows, f"{prefix}stage1")
        for index, block in enumerate(self.blocks):
            shapes = block.trace(shapes, rows, f"{prefix}blocks.{index}")
        return self.head.trace(shapes, rows, f"{prefix}head")


@attrs.define(frozen=True)
class BlockPlan:
    """Layout of one exchange block in the flattened block sequence."""

    stage: int
    widths: Tuple[int, ...] = attrs.field(converter=tuple)
    units: Tuple[int, ...] = attrs.field(converter=tuple)
    fuse: bool
    expand_to: Optional[int]
    final: bool


def build_stem(stem_width: int = 64) -> Sequential:
    """Two 3x3 stride-2 convolutions with batch-norm and ReLU, 3 -> 64 -> 64 channels."""
    return Sequential(
        Conv2d(3, stem_width, 3, stride=2), BatchNorm2d(stem_width), ReLU(),
        Conv2d(stem_width, stem_width, 3, stride=2), BatchNorm2d(stem_width), ReLU(),
    )


def build_stage1(spec: HRNetSpec) -> Stage1:
    bottlenecks = []
    in_width = spec.stem_width
    for _ in range(spec.stage1_units):
        bottlenecks.append(Bottleneck(in_width, spec.stage1_width))
        in_width = spec.stage1_out
    widths = spec.branch_widths
    new_branches = widths[1:] if spec.all_branches_from_start else widths[1:2]
    transition = ExchangeUnit(ExchangeUnitSpec(
        in_widths=(spec.stage1_out,),
        out_widths=(widths[0],),
        emit=(0,),
        expansion_widths=new_branches,
        mid_width=spec.downsample_mid_width,
    ))
    return Stage1(Sequential(*bottlenecks), transition)


def _fusing(spec: HRNetSpec, stage_end: bool, final: bool) -> bool:
    if spec.fusion_mode == FusionMode.FULL or final:
        return True
    return spec.fusion_mode == FusionMode.ACROSS_STAGE_ONLY and stage_end


def canonical_plan(spec: HRNetSpec) -> List[BlockPlan]:
    """Block layout where stage s runs s parallel branches."""
    plans = []
    widths = spec.branch_widths
    last_stage = spec.num_branches
    for offset, n_blocks in enumerate(spec.stage_blocks):
        stage = offset + 2
        for b in range(n_blocks):
            stage_end = b == n_blocks - 1
            final = stage_end and stage == last_stage
            plans.append(BlockPlan(
                stage=stage,
                widths=widths[:stage],
                units=(spec.units_per_block,) * stage,
                fuse=_fusing(spec, stage_end, final),
                expand_to=widths[stage] if stage_end and not final else None,
                final=final,
            ))
    return plans


def _spread(total: int, slots: int) -> List[int]:
    base, extra = divmod(total, slots)
    return [base + 1 if i < extra else base for i in range(slots)]


def all_branches_plan(spec: HRNetSpec, units_override: Optional[Sequence[Sequence[int]]] = None) -> List[BlockPlan]:
    """
    Block layout of the resolution-maintenance variant.

    Every block runs all branches; each branch keeps the total number of
    residual units it has in the canonical network, spread as evenly as
    possible over the blocks (earlier blocks take the remainder).
    """
    n_blocks = sum(spec.stage_blocks)
    widths = spec.branch_widths
    if units_override is None:
        units_per_branch = []
        for r in range(1, spec.num_branches + 1):
            first_stage = max(r, 2)
            blocks_with_branch = sum(spec.stage_blocks[first_stage - 2:])
            units_per_branch.append(_spread(spec.units_per_block * blocks_with_branch, n_blocks))
    else:
        units_per_branch = [list(u) for u in units_override]

    stage_ends = set(np.cumsum(spec.stage_blocks) - 1)
    stages = [s + 2 for s, n in enumerate(spec.stage_blocks) for _ in range(n)]
    plans = []
    for b in range(n_blocks):
        final = b == n_blocks - 1
        plans.append(BlockPlan(
            stage=stages[b],
            widths=widths,
            units=tuple(units_per_branch[r][b] for r in range(spec.num_branches)),
            fuse=_fusing(spec, b in stage_ends, final),
            expand_to=None,
            final=final,
        ))
    return plans


def build_exchange_unit(spec: ExchangeUnitSpec) -> ExchangeUnit:
    return ExchangeUnit(spec)


def _block_from_plan(spec: HRNetSpec, plan: BlockPlan) -> ExchangeBlock:
    unit = expansion = None
    if plan.fuse:
        n = len(plan.widths)
        emit = (spec.head_branch - 1,) if plan.final else tuple(range(n))
        unit = build_exchange_unit(ExchangeUnitSpec(
            in_widths=plan.widths,
            out_widths=plan.widths,
            emit=emit,
            expansion_widths=(plan.expand_to,) if plan.expand_to else (),
            mid_width=spec.downsample_mid_width,
        ))
    elif plan.expand_to:
        expansion = BranchExpansion(plan.widths[-1], plan.expand_to)
    return ExchangeBlock(plan.widths, plan.units, unit, expansion)


def build_exchange_block(stage: int, spec: HRNetSpec) -> List[ExchangeBlock]:
    """
    Build the exchange blocks of one stage of the canonical layout.

    Args:
        stage: Stage index, 2 .. num_branches
        spec: Network spec

    Returns:
        The stage's blocks in order
    """
    if stage < 2 or stage > spec.num_branches:
        raise BuildError(f"Stage index must lie in [2, {spec.num_branches}], got {stage}")
    return [_block_from_plan(spec, plan) for plan in canonical_plan(spec) if plan.stage == stage]


def build_head(spec: HRNetSpec) -> Head:
    if not 1 <= spec.head_branch <= spec.num_branches:
        raise BuildError(f"head_branch must lie in [1, {spec.num_branches}], got {spec.head_branch}")
    return Head(spec.branch_widths[spec.head_branch - 1], spec.num_keypoints, spec.head_branch)


def _assemble(spec: HRNetSpec, plans: Sequence[BlockPlan]) -> HRNet:
    head = build_head(spec)
    blocks = ModuleList([_block_from_plan(spec, plan) for plan in plans])
    model = HRNet(spec, build_stem(spec.stem_width), build_stage1(spec), blocks, head)
    model.plans = list(plans)
    model.assign_names()
    return model


def balanced_all_branches_plan(spec: HRNetSpec) -> List[BlockPlan]:
    """
    Resolution-maintenance layout trimmed to the canonical parameter count.

    Residual units are removed one at a time from the lowest-resolution branch
    (latest block holding the most units first) until the variant has no more
    parameters than the canonical network.
    """
    canonical = _assemble(attrs.evolve(spec, all_branches_from_start=False), canonical_plan(spec)).num_parameters()
    plans = all_branches_plan(spec)
    units = [[plan.units[r] for plan in plans] for r in range(spec.num_branches)]

    while True:
        params = _assemble(spec, all_branches_plan(spec, units)).num_parameters()
        if params <= canonical:
            break
        branch = next((r for r in reversed(range(spec.num_branches)) if sum(units[r]) > 0), None)
        if branch is None:
            break
        counts = units[branch]
        target = max(i for i, n in enumerate(counts) if n == max(counts))
        counts[target] -= 1
    logger.debug(f"Resolution-maintenance layout: units per branch {units}, params {params:,} vs canonical {canonical:,}")
    return all_branches_plan(spec, units)


def build_hrnet(
    spec: HRNetSpec,
    rng: Optional[np.random.Generator] = None,
    materialize: bool = True,
    dtype=DEFAULT_DTYPE
) -> HRNet:
    """
    Build an HRNet from its spec.

    Args:
        spec: Network spec
        rng: Generator for parameter initialization (seed 0 if omitted)
        materialize: Allocate parameter values; shape-only models suffice for audits
        dtype: Parameter precision

    Returns:
        The network
    """
    if not 1 <= spec.head_branch <= spec.num_branches:
        raise BuildError(f"head_branch must lie in [1, {spec.num_branches}], got {spec.head_branch}")
    plans = balanced_all_branches_plan(spec) if spec.all_branches_from_start else canonical_plan(spec)
    model = _assemble(spec, plans)

    if materialize:
        model.initialize(rng if rng is not None else np.random.default_rng(0), dtype)
    logger.debug(
        f"Built HRNet width={spec.width} fusion={spec.fusion_mode.value} blocks={len(plans)} "
        f"params={model.num_parameters():,} materialized={materialize}"
    )
    return model


def count_exchange_units(model: GraphModule) -> int:
    """Exchange units that fuse at least two input branches."""
    return sum(
        1 for _, module in model.named_modules()
        if isinstance(module, ExchangeUnit) and module.spec.in_branches >= 2
    )


def branch_shapes(model: HRNet, input_size: Tuple[int, int]) -> List[List[Shape]]:
    """Per-block output shapes for a 1-image input of (height, width)."""
    rows: List[TraceRow] = []
    shapes = model.stage1.trace(model.stem.trace((1, 3) + tuple(input_size), rows, 'stem'), rows, 'stage1')
    result = []
    for index, block in enumerate(model.blocks):
        shapes = block.trace(shapes, rows, f"blocks.{index}")
        result.append([tuple(s) for s in shapes])
    return result


def forward(model: HRNet, image: Tensor):
    """Run the network and wrap its output as a HeatmapSet in input-pixel coordinates."""
    from .heatmap import HeatmapSet, heatmap_to_input_transform

    maps = model(image)
    stride = image.shape[2] // maps.shape[2]
    return HeatmapSet(maps=maps.data, inverse=[heatmap_to_input_transform(stride)] * maps.shape[0])


def describe(model: HRNet, input_size: Tuple[int, int]) -> Tuple[str, Dict[str, Any]]:
    """
    Render the layer tree with output shapes.

    Returns:
        Indented text and a JSON-ready dict
    """
    rows: List[TraceRow] = []
    output = model.trace((1, 3) + tuple(input_size), rows)
    by_name = {row.name: row for row in rows}

    lines = [f"HRNet width={model.spec.width} fusion={model.spec.fusion_mode.value} input={input_size[0]}x{input_size[1]}"]
    for name, module in model.named_modules():
        if not name:
            continue
        depth = name.count('.') + 1
        row = by_name.get(name)
        shape = f" -> {list(row.output_shape[1:])}" if row is not None else ''
        lines.append(f"{'  ' * depth}{name.rsplit('.', 1)[-1]}: {type(module).__name__}({module.extra_repr()}){shape}")
    lines.append(f"output: {list(output[1:])}")

    payload = {
        'spec': model.spec.to_dict(),
        'input_size': list(input_size),
        'output_shape': list(output),
        'exchange_units': count_exchange_units(model),
        'layers': [attrs.asdict(row) for row in rows],
        'total_params': int(sum(row.params for row in rows)),
        'total_flops': int(sum(row.flops for row in rows)),
    }
    return '\n'.join(lines), json.loads(json.dumps(payload, default=list))
