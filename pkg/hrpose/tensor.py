"""
Dense NCHW tensors with a reverse-mode gradient tape.

Every operation is a Function subclass; `Function.apply` runs the forward
pass on raw numpy arrays and, when any input requires gradients, attaches the
function instance to the result so `Tensor.backward` can walk the tape.
"""

import contextlib
import logging
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .config import DEFAULT_DTYPE, BN_EPS, BN_MOMENTUM
from .errors import DTypeError, ShapeError, ConfigError


logger = logging.getLogger(__name__)

DIMENSIONS = ('N', 'C', 'H', 'W')
SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording a tape."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """
    A 4-D (N, C, H, W) array that can take part in the gradient tape.

    Attributes:
        data: Contiguous numpy buffer, float32 or float64
        requires_grad: Whether gradients flow into this tensor
        grad: Accumulated gradient (leaf tensors only), same shape as data
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            array = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in SUPPORTED_DTYPES:
            array = data
        else:
            array = np.asarray(data, dtype=DEFAULT_DTYPE)

        if array.dtype not in SUPPORTED_DTYPES:
            raise DTypeError(f"Unsupported tensor dtype {array.dtype}, expected float32 or float64")
        if array.ndim != 4:
            raise ShapeError("Tensor must be 4-D NCHW", dimension='ndim', expected=4, actual=array.ndim)
        for name, size in zip(DIMENSIONS, array.shape):
            if size < 1:
                raise ShapeError("Tensor dimensions must be >= 1", dimension=name, expected='>= 1', actual=size)

        self.data = np.ascontiguousarray(array)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional["Function"] = None

    @classmethod
    def zeros(cls, shape: Tuple[int, int, int, int], dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def scalar(cls, value: float, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> "Tensor":
        return cls(np.full((1, 1, 1, 1), value, dtype=dtype), requires_grad=requires_grad)

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor", dimension='size', expected=1, actual=self.data.size)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """
        Accumulate d(self)/d(leaf) into every reachable leaf's `grad`.

        Raises:
            ShapeError: If self is not a single-element tensor
        """
        if self.data.size != 1:
            raise ShapeError("backward() needs a scalar loss", dimension='size', expected=1, actual=self.data.size)

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(_topological_order(self)):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._ctx is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            parent_grads = node._ctx.backward(grad)
            for parent, parent_grad in zip(node._ctx.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def _topological_order(root: Tensor) -> List[Tensor]:
    # Iterative post-order DFS; parents precede children in the result
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


class Function:
    """Base class of tape nodes. Subclasses implement forward and backward on arrays."""

    def __init__(self, *parents: Tensor):
        self.parents = parents
        self.saved: Tuple = ()

    def save_for_backward(self, *values) -> None:
        self.saved = values

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        dtypes = {t.dtype for t in tensors}
        if len(dtypes) > 1:
            raise DTypeError(f"{cls.__name__} got mixed dtypes {sorted(str(d) for d in dtypes)}")
        ctx = cls(*tensors)
        out = Tensor(ctx.forward(*[t.data for t in tensors], **kwargs))
        if _grad_enabled and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._ctx = ctx
        return out

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    for name, sa, sb in zip(DIMENSIONS, a.shape, b.shape):
        if sa != sb:
            raise ShapeError(f"{op} operands differ in shape {a.shape} vs {b.shape}", dimension=name, expected=sa, actual=sb)


class AddFn(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class MulFn(Function):
    def forward(self, a, b):
        self.save_for_backward(a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        return grad * b, grad * a


class SumFn(Function):
    def forward(self, a):
        self.save_for_backward(a.shape)
        return np.sum(a, dtype=a.dtype).reshape(1, 1, 1, 1)

    def backward(self, grad):
        shape, = self.saved
        return (np.broadcast_to(grad, shape).copy(),)


class ReLUFn(Function):
    def forward(self, x):
        mask = x > 0
        self.save_for_backward(mask)
        return np.where(mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        mask, = self.saved
        # zero gradient at exactly 0
        return (grad * mask,)


class NearestUpsampleFn(Function):
    def forward(self, x, factor: int):
        self.save_for_backward(factor)
        return x.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(self, grad):
        factor, = self.saved
        n, c, h, w = grad.shape
        return (grad.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5)),)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Conv2dFn(Function):
    """Patch-gather (im2col) convolution with a tensordot contraction."""

    def forward(self, x, weight, bias=None, stride: int = 1, padding: int = 0):
        n, c, h, w = x.shape
        cout, cin, kh, kw = weight.shape
        ho = conv_output_size(h, kh, stride, padding)
        wo = conv_output_size(w, kw, stride, padding)

        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]

        out = np.tensordot(cols, weight, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias
        self.save_for_backward(cols, weight, padded.shape, (h, w), stride, padding, bias is not None)
        return np.ascontiguousarray(out, dtype=x.dtype)

    def backward(self, grad):
        cols, weight, padded_shape, (h, w), stride, padding, has_bias = self.saved
        _, _, kh, kw = weight.shape
        ho, wo = grad.shape[2:]

        grad_weight = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 4, 5]))
        grad_cols = np.tensordot(grad, weight, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)

        grad_padded = np.zeros(padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += grad_cols[:, :, i, j]
        grad_x = grad_padded[:, :, padding:padding + h, padding:padding + w]

        grads = [np.ascontiguousarray(grad_x), grad_weight]
        if has_bias:
            grads.append(grad.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1))
        return tuple(grads)


class BatchNorm2dFn(Function):
    def forward(self, x, gamma, beta, running_mean=None, running_var=None,
                training: bool = True, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        if training:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=(0, 2, 3), keepdims=True)
            var = x.var(axis=(0, 2, 3), keepdims=True)
            if running_mean is not None:
                unbiased = var * count / (count - 1) if count > 1 else var
                running_mean *= (1.0 - momentum)
                running_mean += momentum * mean.reshape(-1)
                running_var *= (1.0 - momentum)
                running_var += momentum * unbiased.reshape(-1)
        else:
            mean = running_mean.reshape(1, -1, 1, 1).astype(x.dtype)
            var = running_var.reshape(1, -1, 1, 1).astype(x.dtype)

        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x - mean) * inv_std
        self.save_for_backward(x_hat, inv_std, gamma, training)
        return (gamma * x_hat + beta).astype(x.dtype)

    def backward(self, grad):
        x_hat, inv_std, gamma, training = self.saved
        grad_gamma = (grad * x_hat).sum(axis=(0, 2, 3), keepdims=True)
        grad_beta = grad.sum(axis=(0, 2, 3), keepdims=True)
        grad_x_hat = grad * gamma
        if training:
            count = grad.shape[0] * grad.shape[2] * grad.shape[3]
            grad_x = inv_std / count * (
                count * grad_x_hat
                - grad_x_hat.sum(axis=(0, 2, 3), keepdims=True)
                - x_hat * (grad_x_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            grad_x = grad_x_hat * inv_std
        return grad_x, grad_gamma, grad_beta


class MSELossFn(Function):
    def forward(self, pred, target, weight=None):
        diff = pred - target
        if weight is not None:
            mask = weight[:, :, None, None]
            sq = mask * diff * diff
        else:
            mask = None
            sq = diff * diff
        self.save_for_backward(diff, mask)
        return np.array(sq.mean(), dtype=pred.dtype).reshape(1, 1, 1, 1)

    def backward(self, grad):
        diff, mask = self.saved
        scale = 2.0 * grad.reshape(-1)[0] / diff.size
        grad_pred = scale * diff if mask is None else scale * mask * diff
        grad_pred = grad_pred.astype(diff.dtype)
        return grad_pred, -grad_pred


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, 'add')
    return AddFn.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, 'mul')
    return MulFn.apply(a, b)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return SumFn.apply(a)


def relu(x: Tensor) -> Tensor:
    return ReLUFn.apply(x)


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    if int(factor) != factor or factor < 2:
        raise ShapeError("nearest_upsample needs an integer factor", dimension='factor', expected='>= 2', actual=factor)
    return NearestUpsampleFn.apply(x, factor=int(factor))


def conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0
) -> Tensor:
    """
    2-D cross-correlation of an NCHW input with a (Cout, Cin, kh, kw) kernel.

    Args:
        input: Input tensor (N, Cin, H, W)
        weight: Kernel tensor (Cout, Cin, kh, kw)
        bias: Optional (1, Cout, 1, 1) tensor
        stride: Step between output samples, >= 1
        padding: Zero padding on every spatial side, >= 0

    Returns:
        Output tensor (N, Cout, Ho, Wo) with Ho = floor((H + 2p - kh) / stride) + 1

    Raises:
        ShapeError: If channel counts, bias length or output size don't fit
    """
    if stride < 1:
        raise ShapeError("conv2d stride must be positive", dimension='stride', expected='>= 1', actual=stride)
    if padding < 0:
        raise ShapeError("conv2d padding must be non-negative", dimension='padding', expected='>= 0', actual=padding)
    cout, cin, kh, kw = weight.shape
    if input.shape[1] != cin:
        raise ShapeError("conv2d input channels do not match weight", dimension='C', expected=cin, actual=input.shape[1])
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise ShapeError("conv2d bias must be (1, Cout, 1, 1)", dimension='C', expected=cout, actual=bias.shape[1])
    for name, size, k in (('H', input.shape[2], kh), ('W', input.shape[3], kw)):
        if conv_output_size(size, k, stride, padding) < 1:
            raise ShapeError("conv2d kernel larger than padded input", dimension=name, expected=f'>= {k - 2 * padding}', actual=size)

    tensors = (input, weight) if bias is None else (input, weight, bias)
    return Conv2dFn.apply(*tensors, stride=stride, padding=padding)


def batchnorm2d(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS
) -> Tensor:
    """
    Batch normalization over (N, H, W) per channel.

    Training mode normalizes by batch statistics and updates the running
    statistics in place (unbiased variance); eval mode uses the running ones.
    """
    if eps <= 0:
        raise ConfigError(f"batchnorm eps must be positive, got {eps}")
    channels = input.shape[1]
    for label, value in (('gamma', gamma.shape[1]), ('beta', beta.shape[1]),
                         ('running_mean', len(running_mean)), ('running_var', len(running_var))):
        if value != channels:
            raise ShapeError(f"batchnorm {label} length does not match input", dimension='C', expected=channels, actual=value)
    return BatchNorm2dFn.apply(
        input, gamma, beta,
        running_mean=running_mean, running_var=running_var,
        training=training, momentum=momentum, eps=eps
    )


def mse_loss(pred: Tensor, target: Tensor, weight: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean over all elements of weight_k * (pred - target)^2.

    Args:
        pred: Predicted heatmaps (N, K, H, W)
        target: Target heatmaps, same shape
        weight: Optional per-channel weights of shape (K,) or (N, K)

    Returns:
        Scalar (1, 1, 1, 1) tensor
    """
    _check_same_shape(pred, target, 'mse_loss')
    if weight is not None:
        weight = np.asarray(weight, dtype=pred.dtype)
        n, k = pred.shape[:2]
        if weight.ndim == 1:
            if weight.shape[0] != k:
                raise ShapeError("mse_loss weight length does not match channels", dimension='C', expected=k, actual=weight.shape[0])
            weight = np.broadcast_to(weight, (n, k))
        elif weight.shape != (n, k):
            raise ShapeError(f"mse_loss weight must be (K,) or (N, K), got {weight.shape}", dimension='C', expected=k, actual=weight.shape[-1])
    return MSELossFn.apply(pred, target, weight=weight)


def conv2d_direct(
    x: np.ndarray,
    weight: np.ndarray,
    bias: Optional[np.ndarray] = None,
    stride: int = 1,
    padding: int = 0
) -> np.ndarray:
    """Nested-loop reference convolution on raw arrays, used as a test oracle."""
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(cout):
            for y in range(ho):
                for xo in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += padded[b, ci, y * stride + i, xo * stride + j] * weight[o, ci, i, j]
                    if bias is not None:
                        acc += bias.reshape(-1)[o]
                    out[b, o, y, xo] = acc
    return out


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    params: Sequence[Tensor] = (),
    step: float = 1e-4
) -> float:
    """
    Compare analytic gradients against central finite differences.

    Args:
        fn: Maps input tensors to a scalar tensor; may close over `params`
        inputs: Input arrays, promoted to float64 leaf tensors
        params: Extra float64 leaf tensors used inside fn (checked as well)
        step: Finite-difference step

    Returns:
        Maximum relative error |a - n| / max(|a| + |n|, 1e-8) over all entries
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    leaves = tensors + list(params)
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise DTypeError("Gradient checks run in double precision")
        leaf.requires_grad = True
        leaf.zero_grad()

    fn(*tensors).backward()
    analytic = [leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    worst = 0.0
    with no_grad():
        for leaf, grad in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            for idx in range(flat.size):
                original = flat[idx]
                flat[idx] = original + step
                plus = fn(*tensors).item()
                flat[idx] = original - step
                minus = fn(*tensors).item()
                flat[idx] = original
                numeric = (plus - minus) / (2.0 * step)
                exact = grad.reshape(-1)[idx]
                error = abs(exact - numeric) / max(abs(exact) + abs(numeric), 1e-8)
                worst = max(worst, error)

    logger.debug(f"Gradient check over {len(leaves)} leaves: max relative error {worst:.3e}")
    return worst
