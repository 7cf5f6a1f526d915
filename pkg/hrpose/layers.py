"""
Named module tree on top of the tensor engine.

A GraphModule registers Parameters and child modules by attribute name, so
every Parameter is reachable from exactly one dotted path. Parameters are
declared with a shape and an initialization rule and only receive values when
the tree is initialized, which lets cost audits walk full-size networks
without allocating them. Each module can `trace` an input shape, appending one
TraceRow per leaf layer with its parameter and FLOP cost.
"""

import logging
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import attrs
import numpy as np

from . import tensor as T
from .config import BN_EPS, BN_MOMENTUM, DEFAULT_DTYPE
from .errors import BuildError, ShapeError
from .tensor import Tensor


logger = logging.getLogger(__name__)

Shape = Tuple[int, int, int, int]

INIT_RULES = ('he_fan_out', 'normal', 'zeros', 'ones')


@attrs.define
class TraceRow:
    """Cost of one leaf layer (or elementwise aggregation) at a traced input size."""

    name: str
    kind: str
    params: int
    flops: int
    output_shape: Tuple[int, ...]


@attrs.define(eq=False)
class Parameter:
    """
    A learnable tensor declared by shape and initialization rule.

    Attributes:
        shape: Tensor shape
        init: One of INIT_RULES
        std: Standard deviation for the `normal` rule
        value: Leaf tensor once initialized, else None
        name: Dotted path within the owning tree
    """

    shape: Tuple[int, ...] = attrs.field(converter=tuple)
    init: str = attrs.field(validator=attrs.validators.in_(INIT_RULES))
    std: Optional[float] = None
    value: Optional[Tensor] = None
    name: str = ''

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def grad(self) -> Optional[np.ndarray]:
        return None if self.value is None else self.value.grad

    def initialize(self, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> None:
        if self.init == 'he_fan_out':
            # weight shape (Cout, Cin, kh, kw)
            fan_out = self.shape[0] * self.shape[2] * self.shape[3]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_out), size=self.shape)
        elif self.init == 'normal':
            data = rng.normal(0.0, self.std, size=self.shape)
        elif self.init == 'zeros':
            data = np.zeros(self.shape)
        else:
            data = np.ones(self.shape)
        self.value = Tensor(data.astype(dtype), requires_grad=True)

    def tensor(self) -> Tensor:
        if self.value is None:
            raise BuildError(f"Parameter '{self.name}' is not initialized; build with materialize=True")
        return self.value


class GraphModule:
    """Base class of every layer and block in the network tree."""

    def __init__(self):
        object.__setattr__(self, '_parameters', {})
        object.__setattr__(self, '_modules', {})
        object.__setattr__(self, 'training', True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, GraphModule):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def trace(self, shape, rows: List[TraceRow], name: str):
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, "GraphModule"]]:
        return iter(self._modules.items())

    def named_modules(self, prefix: str = '') -> Iterator[Tuple[str, "GraphModule"]]:
        yield prefix, self
        for name, module in self._modules.items():
            yield from module.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Parameter]]:
        for name, module in self.named_modules(prefix):
            for pname, param in module._parameters.items():
                yield (f"{name}.{pname}" if name else pname), param

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def named_buffers(self, prefix: str = '') -> Iterator[Tuple[str, np.ndarray]]:
        for name, module in self.named_modules(prefix):
            for bname, buffer in module._buffers().items():
                yield (f"{name}.{bname}" if name else bname), buffer

    def _buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def assign_names(self) -> None:
        for name, param in self.named_parameters():
            param.name = name

    def initialize(self, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> "GraphModule":
        """Allocate every Parameter and buffer in traversal order."""
        self.assign_names()
        for _, module in self.named_modules():
            for param in module._parameters.values():
                param.initialize(rng, dtype)
            module._reset_buffers(dtype)
        return self

    def _reset_buffers(self, dtype) -> None:
        pass

    @property
    def materialized(self) -> bool:
        return all(param.value is not None for param in self.parameters())

    def train(self, mode: bool = True) -> "GraphModule":
        for _, module in self.named_modules():
            object.__setattr__(module, 'training', mode)
        return self

    def eval(self) -> "GraphModule":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            if param.value is not None:
                param.value.zero_grad()

    def num_parameters(self) -> int:
        return sum(param.size for param in self.parameters())

    def extra_repr(self) -> str:
        return ''

    def __repr__(self) -> str:
        lines = [f"{type(self).__name__}({self.extra_repr()})"]
        for name, module in self._modules.items():
            child = repr(module).replace('\n', '\n  ')
            lines.append(f"  ({name}): {child}")
        return '\n'.join(lines)


def _elements(shape: Sequence[int]) -> int:
    return int(np.prod(shape))


class Identity(GraphModule):
    def forward(self, x: Tensor) -> Tensor:
        return x

    def trace(self, shape: Shape, rows: List[TraceRow], name: str) -> Shape:
        return shape


class Conv2d(GraphModule):
    """
    2-D convolution layer.

    Args:
        in_channels: Input width
        out_channels: Output width
        kernel_size: Square kernel size
        stride: Convolution stride
        padding: Zero padding; defaults to kernel_size // 2
        bias: Whether to learn a per-channel bias
        init: Weight initialization rule
        std: Standard deviation for the `normal` rule
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: Optional[int] = None,
        bias: bool = False,
        init: str = 'he_fan_out',
        std: Optional[float] = None
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.weight = Parameter((out_channels, in_channels, kernel_size, kernel_size), init, std=std)
        self.bias = Parameter((1, out_channels, 1, 1), 'zeros') if bias else None

    def forward(self, x: Tensor) -> Tensor:
        bias = self.bias.tensor() if self.bias is not None else None
        return T.conv2d(x, self.weight.tensor(), bias, stride=self.stride, padding=self.padding)

    def trace(self, shape: Shape, rows: List[TraceRow], name: str) -> Shape:
        n, c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"{name}: input channels do not match", dimension='C', expected=self.in_channels, actual=c)
        ho = T.conv_output_size(h, self.kernel_size, self.stride, self.padding)
        wo = T.conv_output_size(w, self.kernel_size, self.stride, self.padding)
        out = (n, self.out_channels, ho, wo)
        # one multiply-accumulate per FLOP
        flops = self.out_channels * self.in_channels * self.kernel_size ** 2 * ho * wo * n
        params = self.weight.size
        if self.bias is not None:
            flops += _elements(out)
            params += self.bias.size
        rows.append(TraceRow(name, 'conv', params, flops, out))
        return out

    def extra_repr(self) -> str:
        return (f"{self.in_channels}, {self.out_channels}, kernel={self.kernel_size}, "
                f"stride={self.stride}, bias={self.bias is not None}")


class BatchNorm2d(GraphModule):
    """Batch normalization with running statistics (eval mode for single-item batches)."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter((1, channels, 1, 1), 'ones')
        self.beta = Parameter((1, channels, 1, 1), 'zeros')
        self.running_mean: Optional[np.ndarray] = None
        self.running_var: Optional[np.ndarray] = None

    def _buffers(self) -> Dict[str, np.ndarray]:
        if self.running_mean is None:
            return {}
        return {'running_mean': self.running_mean, 'running_var': self.running_var}

    def _reset_buffers(self, dtype) -> None:
        self.running_mean = np.zeros(self.channels, dtype=dtype)
        self.running_var = np.ones(self.channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if self.running_mean is None:
            raise BuildError("BatchNorm2d buffers are not initialized; build with materialize=True")
        training = self.training and x.shape[0] > 1
        return T.batchnorm2d(
            x, self.gamma.tensor(), self.beta.tensor(),
            self.running_mean, self.running_var,
            training=training, momentum=self.momentum, eps=self.eps
        )

    def trace(self, shape: Shape, rows: List[TraceRow], name: str) -> Shape:
        if shape[1] != self.channels:
            raise ShapeError(f"{name}: input channels do not match", dimension='C', expected=self.channels, actual=shape[1])
        rows.append(TraceRow(name, 'bn', self.gamma.size + self.beta.size, _elements(shape), shape))
        return shape

    def extra_repr(self) -> str:
        return str(self.channels)


class ReLU(GraphModule):
    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)

    def trace(self, shape: Shape, rows: List[TraceRow], name: str) -> Shape:
        rows.append(TraceRow(name, 'relu', 0, _elements(shape), shape))
        return shape


class Upsample(GraphModule):
    def __init__(self, factor: int):
        super().__init__()
        self.factor = factor

    def forward(self, x: Tensor) -> Tensor:
        return T.nearest_upsample(x, self.factor)

    def trace(self, shape: Shape, rows: List[TraceRow], name: str) -> Shape:
        n, c, h, w = shape
        out = (n, c, h * self.factor, w * self.factor)
        rows.append(TraceRow(name, 'upsample', 0, _elements(out), out))
        return out

    def extra_repr(self) -> str:
        return f"factor={self.factor}"


class Sequential(GraphModule):
    """Modules applied one after another; children are named by position."""

    def __init__(self, *modules: GraphModule):
        super().__init__()
        for index, module in enumerate(modules):
            setattr(self, str(index), module)

    def __len__(self) -> int:
        return len(self._modules)

    def __getitem__(self, index: int) -> GraphModule:
        return self._modules[str(index)]

    def __iter__(self) -> Iterator[GraphModule]:
        return iter(self._modules.values())

    def forward(self, x: Tensor) -> Tensor:
        for module in self._modules.values():
            x = module(x)
        return x

    def trace(self, shape: Shape, rows: List[TraceRow], name: str) -> Shape:
        for child, module in self._modules.items():
            shape = module.trace(shape, rows, f"{name}.{child}")
        return shape


class ModuleList(GraphModule):
    """Indexed container without a forward of its own."""

    def __init__(self, modules: Sequence[GraphModule] = ()):
        super().__init__()
        for module in modules:
            self.append(module)

    def append(self, module: GraphModule) -> None:
        setattr(self, str(len(self._modules)), module)

    def __len__(self) -> int:
        return len(self._modules)

    def __getitem__(self, index: int) -> GraphModule:
        if index < 0:
            index += len(self)
        return self._modules[str(index)]

    def __iter__(self) -> Iterator[GraphModule]:
        return iter(self._modules.values())


def trace_add(shapes: Sequence[Shape], rows: List[TraceRow], name: str) -> Shape:
    """Record the elementwise sum of same-shape inputs."""
    first = tuple(shapes[0])
    for shape in shapes[1:]:
        if tuple(shape) != first:
            raise ShapeError(f"{name}: summed branches disagree, {first} vs {tuple(shape)}")
    if len(shapes) > 1:
        rows.append(TraceRow(name, 'add', 0, _elements(first) * (len(shapes) - 1), first))
    return first


def add_all(tensors: Sequence[Tensor]) -> Tensor:
    total = tensors[0]
    for item in tensors[1:]:
        total = T.add(total, item)
    return total
