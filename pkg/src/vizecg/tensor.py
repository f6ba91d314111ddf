"""Minimal reverse-mode automatic differentiation engine.

The engine works on :py:class:`~vizecg.tensor.Tensor` objects wrapping 64-bit float numpy arrays. Every
differentiable operation is a :py:class:`~vizecg.tensor.Function` subclass. When any input of an operation
requires a gradient, the operation is appended to the current :py:class:`~vizecg.tensor.Graph` (a tape).
:py:func:`~vizecg.tensor.backward` replays the tape in exact reverse order of forward execution.

>>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
>>> loss = sum_all(x * x)
>>> loss.backward()
>>> x.grad.tolist()
[2.0, 4.0, 6.0]

A graph can be replayed only once. Run a new forward pass to compute new gradients.

>>> loss.backward()
Traceback (most recent call last):
...
vizecg.errors.GraphError: Backward has already been called on this graph.

Use :py:func:`~vizecg.tensor.no_grad` to run forward passes without recording (inference, finite differences).
"""

from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar
from math import prod
from typing import Any, ClassVar, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from vizecg.errors import DimensionError, GraphError, NonFiniteError

__all__ = [
    "Tensor",
    "Function",
    "Graph",
    "Node",
    "no_grad",
    "check_finite",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "softmax_rows",
    "relu",
    "sigmoid",
    "log",
    "clip",
    "sum_all",
    "mean_over_axis",
    "transpose2d",
    "reshape",
    "conv1d",
    "conv2d",
    "channel_norm",
    "global_avg_pool",
    "adaptive_avg_pool_tokens",
    "pooling_matrix",
    "detach",
]

_ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

NORM_EPS = 1e-5  #: variance guard of channel_norm


class Tensor:
    """N-dimensional float64 array with an optional accumulated gradient.

    Leaf tensors (parameters, inputs) accumulate gradients additively across backward calls, call
    :py:meth:`~vizecg.tensor.Tensor.zero_grad` between optimizer steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data: _ArrayLike, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Wrap an array produced by an operation without copying it."""
        tensor = cls.__new__(cls)
        tensor.data = data
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        tensor._node = None
        return tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"Only single-element tensors can be converted, got {self.shape}.")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Same as :py:func:`~vizecg.tensor.backward`."""
        backward(self)

    def detach(self) -> "Tensor":
        return detach(self)

    def __add__(self, other: _ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: _ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: _ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: _ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: _ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other: _ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: float) -> "Tensor":
        return scale(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        name = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{name})"


class Node:
    """A recorded operation: the function instance, its inputs and its output."""

    __slots__ = ("graph", "function", "inputs", "output")

    def __init__(self, graph: "Graph", function: "Function", inputs: tuple[Tensor, ...], output: Tensor):
        self.graph = graph
        self.function = function
        self.inputs = inputs
        self.output = output


class Graph:
    """Ordered record of the operations performed during a forward pass."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def record(self, function: "Function", inputs: tuple[Tensor, ...], output: Tensor) -> None:
        node = Node(self, function, inputs, output)
        output._node = node
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


_GRAPH: ContextVar[Graph | None] = ContextVar("_GRAPH", default=None)
_RECORDING: ContextVar[bool] = ContextVar("_RECORDING", default=True)
_CHECK_FINITE: ContextVar[bool] = ContextVar("_CHECK_FINITE", default=False)


def _current_graph() -> Graph:
    graph = _GRAPH.get()
    if graph is None or graph.consumed:
        graph = Graph()
        _GRAPH.set(graph)
    return graph


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the context."""
    token = _RECORDING.set(False)
    try:
        yield
    finally:
        _RECORDING.reset(token)


@contextmanager
def check_finite() -> Iterator[None]:
    """Assert that every operation output inside the context is finite.

    >>> with check_finite():
    ...     log(Tensor([0.0]))
    Traceback (most recent call last):
    ...
    vizecg.errors.NonFiniteError: Non-finite values produced by Log.
    """
    token = _CHECK_FINITE.set(True)
    try:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            yield
    finally:
        _CHECK_FINITE.reset(token)


class Function:
    """Base class for differentiable operations.

    A subclass implements :py:meth:`~vizecg.tensor.Function.forward` on plain numpy arrays, saving whatever
    it needs on `self`, and :py:meth:`~vizecg.tensor.Function.backward` returning one gradient array (or `None`)
    per input tensor.
    """

    differentiable_inputs: ClassVar[int | None] = None  #: number of leading inputs receiving gradients

    def forward(self, *arrays: np.ndarray, **kws: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kws: Any) -> Tensor:
        function = cls()
        out_data = function.forward(*(tensor.data for tensor in tensors), **kws)
        if _CHECK_FINITE.get() and not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"Non-finite values produced by {cls.__name__}.", op=cls.__name__)
        requires_grad = _RECORDING.get() and any(tensor.requires_grad for tensor in tensors)
        out = Tensor._wrap(out_data, requires_grad=requires_grad)
        if requires_grad:
            _current_graph().record(function, tensors, out)
        return out

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        """Sum a gradient over broadcast axes so that it matches `shape`."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, size in enumerate(shape):
            if size == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


def backward(loss: Tensor, /) -> None:
    """Compute `dLoss/dTensor` for every tensor requiring a gradient reachable from the loss.

    :raises GraphError: if the loss is not a scalar, was not produced by a recorded forward pass or the graph
        was already replayed
    """
    if loss.size != 1:
        raise GraphError("Loss must be a scalar.", shape=list(loss.shape))
    node = loss._node
    if node is None:
        raise GraphError(
            "Loss was not produced by a recorded forward pass.\n\n"
            "Fix: Make sure at least one input requires a gradient and the forward pass is not inside no_grad()."
        )
    graph = node.graph
    if graph.consumed:
        raise GraphError("Backward has already been called on this graph.")
    graph.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    end = graph.nodes.index(node)
    for _node in reversed(graph.nodes[: end + 1]):
        grad = grads.pop(id(_node.output), None)
        if grad is None:
            continue
        _node.output.grad = grad
        input_grads = _node.function.backward(grad)
        for tensor, input_grad in zip(_node.inputs, input_grads):
            if input_grad is None or not tensor.requires_grad:
                continue
            if tensor._node is not None and tensor._node.graph is graph:
                key = id(tensor)
                grads[key] = grads[key] + input_grad if key in grads else input_grad
            elif tensor.grad is None:
                tensor.grad = np.array(input_grad, dtype=np.float64)
            else:
                tensor.grad = tensor.grad + input_grad
    graph.nodes.clear()


def _as_tensor(value: _ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Add(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return self.unbroadcast(grad * self.b, self.a.shape), self.unbroadcast(grad * self.a, self.b.shape)


class Scale(Function):
    def forward(self, a, *, factor: float):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


def add(a: _ArrayLike, b: _ArrayLike) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    return Add.apply(_as_tensor(a), _as_tensor(b))


def sub(a: _ArrayLike, b: _ArrayLike) -> Tensor:
    return add(a, scale(_as_tensor(b), -1.0))


def mul(a: _ArrayLike, b: _ArrayLike) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    return Mul.apply(_as_tensor(a), _as_tensor(b))


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of M×K and K×N tensors.

    >>> matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]])).data.tolist()
    [[5.0, 6.0], [0.0, 0.0]]
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"Cannot multiply matrices of shapes {a.shape} and {b.shape}.", left=list(a.shape), right=list(b.shape)
        )
    return MatMul.apply(a, b)


class SoftmaxRows(Function):
    def forward(self, x):
        shifted = x - x.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        self.y = exp / exp.sum(axis=1, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=1, keepdims=True)),)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax computed with per-row max subtraction.

    >>> softmax_rows(Tensor([[1000.0, 1000.0, 1000.0]])).data.round(12).tolist()
    [[0.333333333333, 0.333333333333, 0.333333333333]]
    """
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}.", shape=list(x.shape))
    return SoftmaxRows.apply(x)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x):
        exp = np.exp(-np.abs(x))
        self.y = np.where(x >= 0, 1.0 / (1.0 + exp), exp / (1.0 + exp))
        return self.y

    def backward(self, grad):
        return (grad * self.y * (1.0 - self.y),)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Clip(Function):
    def forward(self, x, *, low: float, high: float):
        self.mask = (x >= low) & (x <= high)
        return np.clip(x, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


def relu(x: Tensor) -> Tensor:
    """Rectifier, the subgradient at zero is zero."""
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, stable for large `|x|`.

    >>> sigmoid(Tensor([0.0, -1000.0, 1000.0])).data.tolist()
    [0.5, 0.0, 1.0]
    """
    return Sigmoid.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp values into `[low, high]`, the gradient passes where the input lies inside the interval."""
    return Clip.apply(x, low=float(low), high=float(high))


class SumAll(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad):
        return (np.broadcast_to(grad, self.shape).copy(),)


class MeanAxis(Function):
    def forward(self, x, *, axis: int):
        self.shape, self.axis = x.shape, axis
        return x.mean(axis=axis)

    def backward(self, grad):
        n = self.shape[self.axis]
        return (np.broadcast_to(np.expand_dims(grad, self.axis), self.shape) / n,)


def sum_all(x: Tensor) -> Tensor:
    return SumAll.apply(x)


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    """Arithmetic mean over one axis, the axis is removed."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"Axis {axis} is out of range for shape {x.shape}.", shape=list(x.shape), axis=axis)
    return MeanAxis.apply(x, axis=axis % x.ndim)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean of a C×L token map.

    >>> global_avg_pool(Tensor([[1.0, 3.0], [2.0, 2.0]])).data.tolist()
    [2.0, 2.0]
    """
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"global_avg_pool expects a C×L matrix, got shape {x.shape}.", shape=list(x.shape))
    return mean_over_axis(x, 1)


class Transpose2d(Function):
    def forward(self, x):
        return x.T.copy()

    def backward(self, grad):
        return (grad.T,)


class Reshape(Function):
    def forward(self, x, *, shape: tuple[int, ...]):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


def transpose2d(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose2d expects a matrix, got shape {x.shape}.", shape=list(x.shape))
    return Transpose2d.apply(x)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(dim) for dim in shape)
    if prod(shape) != x.size:
        raise DimensionError(
            f"Cannot reshape {x.shape} ({x.size} elements) into {shape} ({prod(shape)} elements).",
            source=list(x.shape),
            target=list(shape),
        )
    return Reshape.apply(x, shape=shape)


def _conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Conv1d(Function):
    """Batched 1D cross-correlation: x N×C_in×T, w C_out×C_in×k."""

    def forward(self, x, w, *, stride: int, padding: int):
        n, c_in, _ = x.shape
        c_out, _, k = w.shape
        self.x_shape, self.w, self.stride, self.padding = x.shape, w, stride, padding
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
        windows = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]  # N, C_in, T', k
        t_out = windows.shape[2]
        self.cols = windows.transpose(0, 2, 1, 3).reshape(n * t_out, c_in * k)
        out = self.cols @ w.reshape(c_out, c_in * k).T  # N*T', C_out
        self.t_out = t_out
        return out.reshape(n, t_out, c_out).transpose(0, 2, 1)

    def backward(self, grad):
        n, c_in, t = self.x_shape
        c_out, _, k = self.w.shape
        stride, padding, t_out = self.stride, self.padding, self.t_out
        grad_rows = grad.transpose(0, 2, 1).reshape(n * t_out, c_out)
        grad_w = (grad_rows.T @ self.cols).reshape(self.w.shape)
        grad_cols = (grad_rows @ self.w.reshape(c_out, c_in * k)).reshape(n, t_out, c_in, k)
        grad_xp = np.zeros((n, c_in, t + 2 * padding))
        for j in range(k):
            grad_xp[:, :, j : j + stride * (t_out - 1) + 1 : stride] += grad_cols[:, :, :, j].transpose(0, 2, 1)
        return grad_xp[:, :, padding : padding + t], grad_w


class Conv2d(Function):
    """Batched 2D cross-correlation: x N×C_in×H×W, w C_out×C_in×k×k."""

    def forward(self, x, w, *, stride: int, padding: int):
        n, c_in, _, _ = x.shape
        c_out, _, k, _ = w.shape
        self.x_shape, self.w, self.stride, self.padding = x.shape, w, stride, padding
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride, :, :]
        h_out, w_out = windows.shape[2], windows.shape[3]
        self.cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c_in * k * k)
        out = self.cols @ w.reshape(c_out, c_in * k * k).T
        self.out_hw = h_out, w_out
        return out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)

    def backward(self, grad):
        n, c_in, h, w = self.x_shape
        c_out, _, k, _ = self.w.shape
        stride, padding = self.stride, self.padding
        h_out, w_out = self.out_hw
        grad_rows = grad.transpose(0, 2, 3, 1).reshape(n * h_out * w_out, c_out)
        grad_w = (grad_rows.T @ self.cols).reshape(self.w.shape)
        grad_cols = (grad_rows @ self.w.reshape(c_out, c_in * k * k)).reshape(n, h_out, w_out, c_in, k, k)
        grad_xp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding))
        h_span, w_span = stride * (h_out - 1) + 1, stride * (w_out - 1) + 1
        for i in range(k):
            for j in range(k):
                tap = grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                grad_xp[:, :, i : i + h_span : stride, j : j + w_span : stride] += tap
        return grad_xp[:, :, padding : padding + h, padding : padding + w], grad_w


def _check_conv(x: Tensor, w: Tensor, spatial: int, stride: int, padding: int) -> None:
    if x.ndim not in (spatial + 1, spatial + 2) or w.ndim != spatial + 2:
        raise DimensionError(
            f"Invalid convolution operand shapes {x.shape} and {w.shape}.", input=list(x.shape), kernel=list(w.shape)
        )
    if x.shape[-spatial - 1] != w.shape[1]:
        raise DimensionError(
            f"Input channels of {x.shape} do not match kernel {w.shape}.", input=list(x.shape), kernel=list(w.shape)
        )
    if spatial == 2 and w.shape[2] != w.shape[3]:
        raise DimensionError(f"Only square kernels are supported, got {w.shape}.", kernel=list(w.shape))
    if stride < 1 or padding < 0:
        raise DimensionError(f"Invalid stride {stride} or padding {padding}.", stride=stride, padding=padding)
    kernel = w.shape[-1]
    for size in x.shape[-spatial:]:
        if kernel > size + 2 * padding:
            raise DimensionError(
                f"Kernel {w.shape} is larger than the padded input {x.shape} (padding {padding}).",
                input=list(x.shape),
                kernel=list(w.shape),
                padding=padding,
            )


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1D cross-correlation with zero padding.

    `x` is C_in×T or N×C_in×T with a leading batch axis, `w` is C_out×C_in×k. The output length is
    `(T + 2·padding − k) // stride + 1`.

    >>> conv1d(Tensor([[1.0, 2.0, 3.0, 4.0]]), Tensor([[[1.0, 1.0]]])).data.tolist()
    [[3.0, 5.0, 7.0]]
    """
    _check_conv(x, w, 1, stride, padding)
    if x.ndim == 2:
        out = Conv1d.apply(reshape(x, (1, *x.shape)), w, stride=stride, padding=padding)
        return reshape(out, out.shape[1:])
    return Conv1d.apply(x, w, stride=stride, padding=padding)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with zero padding and square kernels.

    >>> conv2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), Tensor(np.ones((1, 1, 2, 2)))).data.tolist()
    [[[10.0]]]
    """
    _check_conv(x, w, 2, stride, padding)
    if x.ndim == 3:
        out = Conv2d.apply(reshape(x, (1, *x.shape)), w, stride=stride, padding=padding)
        return reshape(out, out.shape[1:])
    return Conv2d.apply(x, w, stride=stride, padding=padding)


class ChannelNorm(Function):
    """Normalize every channel over its trailing spatial axes, then apply gain and bias."""

    def forward(self, x, gain, bias, *, spatial_dims: int, eps: float):
        self.axes = tuple(range(x.ndim - spatial_dims, x.ndim))
        self.param_axes = tuple(axis for axis in range(x.ndim) if axis != x.ndim - spatial_dims - 1)
        self.param_shape = (x.shape[x.ndim - spatial_dims - 1],) + (1,) * spatial_dims
        mean = x.mean(axis=self.axes, keepdims=True)
        var = x.var(axis=self.axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = (x - mean) * self.inv_std
        self.gain = gain.reshape(self.param_shape)
        self.count = prod(x.shape[axis] for axis in self.axes)
        return self.x_hat * self.gain + bias.reshape(self.param_shape)

    def backward(self, grad):
        x_hat, count = self.x_hat, self.count
        grad_hat = grad * self.gain
        grad_x = (self.inv_std / count) * (
            count * grad_hat
            - grad_hat.sum(axis=self.axes, keepdims=True)
            - x_hat * (grad_hat * x_hat).sum(axis=self.axes, keepdims=True)
        )
        grad_gain = (grad * x_hat).sum(axis=self.param_axes)
        grad_bias = grad.sum(axis=self.param_axes)
        return grad_x, grad_gain, grad_bias


def channel_norm(x: Tensor, gain: Tensor, bias: Tensor, spatial_dims: int = 1, eps: float = NORM_EPS) -> Tensor:
    """Batch-statistics-free normalization.

    The channel axis is the one right before the `spatial_dims` trailing axes, so both C×T and N×C×T inputs
    (or C×H×W and N×C×H×W with `spatial_dims=2`) work. A constant channel maps to its bias.
    """
    channels = x.shape[x.ndim - spatial_dims - 1] if x.ndim > spatial_dims else -1
    if channels < 1 or gain.shape != (channels,) or bias.shape != (channels,):
        raise DimensionError(
            f"channel_norm parameters {gain.shape}, {bias.shape} do not match input {x.shape}.",
            input=list(x.shape),
            gain=list(gain.shape),
        )
    return ChannelNorm.apply(x, gain, bias, spatial_dims=spatial_dims, eps=eps)


def pooling_matrix(size: int, tokens: int) -> np.ndarray:
    """Adaptive mean pooling weights mapping `size` positions onto `tokens` bins.

    Bin `i` averages positions `floor(i·size/tokens)` up to `ceil((i+1)·size/tokens)`.

    >>> pooling_matrix(4, 2).tolist()
    [[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5]]
    """
    weights = np.zeros((tokens, size))
    for i in range(tokens):
        start = (i * size) // tokens
        end = -((-(i + 1) * size) // tokens)
        weights[i, start:end] = 1.0 / (end - start)
    return weights


def adaptive_avg_pool_tokens(x: Tensor, tokens: int) -> Tensor:
    """Pool a C×N feature map into an L×C token matrix."""
    if x.ndim != 2:
        raise DimensionError(f"Expected a C×N feature map, got shape {x.shape}.", shape=list(x.shape))
    return matmul(Tensor(pooling_matrix(x.shape[1], tokens)), transpose2d(x))


def detach(x: Tensor) -> Tensor:
    """Return a tensor sharing the data but cut off from the graph."""
    return Tensor._wrap(x.data, requires_grad=False)
