# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
"""
Dense tensors with reverse-mode differentiation.

Every operation is a :class:`Function` whose ``backward`` is written with tensor operations. When a gradient is
requested with ``create_graph=True`` those operations are recorded like any forward computation, so the gradient
can be differentiated once more. This is what the gradient penalty of the critic needs. Functions flagged with
``second_order = False`` refuse to take part in such a pass.

Gradients accumulate: call :meth:`Tensor.zero_grad` (or the ``zero_grad`` of a module) between steps.

:Example:
>>> x = Tensor(3.0, requires_grad=True)
>>> backward(x * x)
>>> x.grad
array(6.)
"""

import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from typing_extensions import Self

import numpy as np

from fewpoint.errors import CapabilityError, ContractError, DegenerateInputError, DimensionError

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    """Test if operations are currently recorded in the graph (per thread)."""
    return getattr(_grad_mode, 'enabled', True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


@contextmanager
def enable_grad() -> Iterator[None]:
    previous = is_grad_enabled()
    _grad_mode.enabled = True
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Node:
    """
    Record of one operation in the graph.

    Properties
    ----------

    function: The Function class that produced the output.
    inputs: The input tensors, in call order.
    attrs: Non-tensor arguments of the call.
    needs_input_grad: For each input, whether a gradient must be computed.
    output: The output tensor, kept only by functions whose backward reuses it.
    """

    def __init__(self, function: type['Function'], inputs: tuple['Tensor', ...], attrs: dict[str, Any]):
        self.function = function
        self.inputs = inputs
        self.attrs = attrs
        self.needs_input_grad = tuple(t.requires_grad for t in inputs)
        self.output: Tensor | None = None

    def __repr__(self) -> str:
        return f"Node({self.function.name}, inputs={[t.shape for t in self.inputs]})"


class Tensor:
    """
    A dense n-dimensional real array taking part in the autodiff graph.

    Properties
    ----------

    data: The values (numpy array). Integer input is converted to float64.
    requires_grad: Whether gradients flow to this tensor.
    grad: Gradient accumulator with the shape of data, None until a backward pass reaches the tensor.
    name: Optional name, set on parameters.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Self':
        """Return a tensor sharing the values but cut from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def _lift(self, other) -> 'Tensor':
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other) -> 'Tensor':
        return Add.apply(self, self._lift(other))

    def __radd__(self, other) -> 'Tensor':
        return Add.apply(self._lift(other), self)

    def __sub__(self, other) -> 'Tensor':
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other) -> 'Tensor':
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other) -> 'Tensor':
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other) -> 'Tensor':
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other) -> 'Tensor':
        return Div.apply(self, self._lift(other))

    def __rtruediv__(self, other) -> 'Tensor':
        return Div.apply(self._lift(other), self)

    def __neg__(self) -> 'Tensor':
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> 'Tensor':
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other) -> 'Tensor':
        return matmul(self, self._lift(other))

    def __getitem__(self, key) -> 'Tensor':
        return GetItem.apply(self, key=key)

    @property
    def T(self) -> 'Tensor':
        return Transpose.apply(self)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> 'Tensor':
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> 'Tensor':
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


class Function:
    """
    Base class of the differentiable operations.

    Subclasses implement ``forward`` on numpy arrays and ``backward`` on tensors, returning one gradient (or None)
    per input.
    """

    name: str = 'function'
    second_order: bool = True
    keep_output: bool = False

    @classmethod
    def apply(cls, *inputs: Tensor, **attrs) -> Tensor:
        node = Node(cls, inputs, attrs)
        data = cls.forward(node, *(t.data for t in inputs))
        requires_grad = is_grad_enabled() and any(node.needs_input_grad)
        out = Tensor(data, requires_grad=requires_grad)
        if requires_grad:
            out.node = node
            if cls.keep_output:
                node.output = out
        return out

    @staticmethod
    def forward(node: Node, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(node: Node, grad: Tensor) -> tuple[Tensor | None, ...]:
        raise NotImplementedError


def _constant(array: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(np.asarray(array, dtype=like.dtype))


def _reduce_to_shape(array: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if array.shape == shape:
        return array
    lead = array.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, n in enumerate(shape) if n == 1 and array.shape[i + lead] != 1)
    return np.sum(array, axis=axes, keepdims=True).reshape(shape)


class Add(Function):
    name = 'add'

    @staticmethod
    def forward(node, a, b):
        return a + b

    @staticmethod
    def backward(node, grad):
        a, b = node.inputs
        return sum_to(grad, a.shape), sum_to(grad, b.shape)


class Sub(Function):
    name = 'sub'

    @staticmethod
    def forward(node, a, b):
        return a - b

    @staticmethod
    def backward(node, grad):
        a, b = node.inputs
        return sum_to(grad, a.shape), sum_to(-grad, b.shape) if node.needs_input_grad[1] else None


class Mul(Function):
    name = 'mul'

    @staticmethod
    def forward(node, a, b):
        return a * b

    @staticmethod
    def backward(node, grad):
        a, b = node.inputs
        need_a, need_b = node.needs_input_grad
        return (sum_to(grad * b, a.shape) if need_a else None,
                sum_to(grad * a, b.shape) if need_b else None)


class Div(Function):
    name = 'div'

    @staticmethod
    def forward(node, a, b):
        return a / b

    @staticmethod
    def backward(node, grad):
        a, b = node.inputs
        need_a, need_b = node.needs_input_grad
        return (sum_to(grad / b, a.shape) if need_a else None,
                sum_to(-grad * a / (b * b), b.shape) if need_b else None)


class Neg(Function):
    name = 'neg'

    @staticmethod
    def forward(node, a):
        return -a

    @staticmethod
    def backward(node, grad):
        return (-grad,)


class Pow(Function):
    name = 'pow'

    @staticmethod
    def forward(node, a):
        return a ** node.attrs['exponent']

    @staticmethod
    def backward(node, grad):
        (a,) = node.inputs
        exponent = node.attrs['exponent']
        if exponent == 1.0:
            return (grad,)
        if exponent == 2.0:
            return (grad * a * 2.0,)
        return (grad * exponent * a ** (exponent - 1.0),)


class Exp(Function):
    name = 'exp'
    keep_output = True

    @staticmethod
    def forward(node, a):
        return np.exp(a)

    @staticmethod
    def backward(node, grad):
        return (grad * node.output,)


class Log(Function):
    name = 'log'

    @staticmethod
    def forward(node, a):
        return np.log(a)

    @staticmethod
    def backward(node, grad):
        return (grad / node.inputs[0],)


class Sqrt(Function):
    """Square root. The gradient at 0 is taken as 0."""

    name = 'sqrt'
    keep_output = True

    @staticmethod
    def forward(node, a):
        return np.sqrt(a)

    @staticmethod
    def backward(node, grad):
        out = node.output
        positive = out.data > 0
        safe = out + _constant(np.where(positive, 0.0, 1.0), out)
        return (grad * _constant(positive, out) * 0.5 / safe,)


class Abs(Function):
    name = 'abs'

    @staticmethod
    def forward(node, a):
        return np.abs(a)

    @staticmethod
    def backward(node, grad):
        (a,) = node.inputs
        return (grad * _constant(np.sign(a.data), a),)


class Clip(Function):
    name = 'clip'

    @staticmethod
    def forward(node, a):
        return np.clip(a, node.attrs['low'], node.attrs['high'])

    @staticmethod
    def backward(node, grad):
        (a,) = node.inputs
        inside = (a.data >= node.attrs['low']) & (a.data <= node.attrs['high'])
        return (grad * _constant(inside, a),)


class Sigmoid(Function):
    name = 'sigmoid'
    keep_output = True

    @staticmethod
    def forward(node, a):
        return 0.5 * (np.tanh(0.5 * a) + 1.0)

    @staticmethod
    def backward(node, grad):
        out = node.output
        return (grad * out * (1.0 - out),)


class LeakyReLU(Function):
    """Elementwise max(x, slope * x). At exactly 0 the positive branch (slope 1) is used."""

    name = 'leaky_relu'

    @staticmethod
    def forward(node, a):
        return np.where(a >= 0, a, node.attrs['slope'] * a)

    @staticmethod
    def backward(node, grad):
        (a,) = node.inputs
        return (grad * _constant(np.where(a.data >= 0, 1.0, node.attrs['slope']), a),)


class MatMul(Function):
    name = 'matmul'

    @staticmethod
    def forward(node, a, b):
        return a @ b

    @staticmethod
    def backward(node, grad):
        a, b = node.inputs
        need_a, need_b = node.needs_input_grad
        return (grad @ b.T if need_a else None,
                a.T @ grad if need_b else None)


class Transpose(Function):
    name = 'transpose'

    @staticmethod
    def forward(node, a):
        return a.T

    @staticmethod
    def backward(node, grad):
        return (grad.T,)


class Reshape(Function):
    name = 'reshape'

    @staticmethod
    def forward(node, a):
        return a.reshape(node.attrs['shape'])

    @staticmethod
    def backward(node, grad):
        return (reshape(grad, node.inputs[0].shape),)


class BroadcastTo(Function):
    name = 'broadcast_to'

    @staticmethod
    def forward(node, a):
        return np.broadcast_to(a, node.attrs['shape']).copy()

    @staticmethod
    def backward(node, grad):
        return (sum_to(grad, node.inputs[0].shape),)


class SumTo(Function):
    name = 'sum_to'

    @staticmethod
    def forward(node, a):
        return _reduce_to_shape(a, node.attrs['shape'])

    @staticmethod
    def backward(node, grad):
        return (broadcast_to(grad, node.inputs[0].shape),)


class Sum(Function):
    name = 'sum'

    @staticmethod
    def forward(node, a):
        return np.sum(a, axis=node.attrs['axis'], keepdims=node.attrs['keepdims'])

    @staticmethod
    def backward(node, grad):
        (a,) = node.inputs
        axis = node.attrs['axis']
        if not node.attrs['keepdims']:
            if axis is None:
                axes = set(range(a.ndim))
            else:
                axes = {ax % a.ndim for ax in (axis if isinstance(axis, tuple) else (axis,))}
            grad = reshape(grad, tuple(1 if i in axes else n for i, n in enumerate(a.shape)))
        return (broadcast_to(grad, a.shape),)


class Max(Function):
    """
    Maximum along one axis. The gradient goes only to the first maximal entry of each slice.
    First-order only.
    """

    name = 'max'
    second_order = False

    @staticmethod
    def forward(node, a):
        axis = node.attrs['axis']
        node.attrs['argmax'] = np.expand_dims(np.argmax(a, axis=axis), axis)
        return np.max(a, axis=axis)

    @staticmethod
    def backward(node, grad):
        (a,) = node.inputs
        axis = node.attrs['axis']
        routed = np.zeros(a.shape, dtype=a.dtype)
        np.put_along_axis(routed, node.attrs['argmax'], np.expand_dims(grad.data, axis), axis)
        return (_constant(routed, a),)


class Softmax(Function):
    name = 'softmax'
    keep_output = True

    @staticmethod
    def forward(node, a):
        axis = node.attrs['axis']
        shifted = np.exp(a - np.max(a, axis=axis, keepdims=True))
        return shifted / np.sum(shifted, axis=axis, keepdims=True)

    @staticmethod
    def backward(node, grad):
        out = node.output
        axis = node.attrs['axis']
        return (out * (grad - (grad * out).sum(axis=axis, keepdims=True)),)


class Concat(Function):
    name = 'concat'

    @staticmethod
    def forward(node, *arrays):
        return np.concatenate(arrays, axis=node.attrs['axis'])

    @staticmethod
    def backward(node, grad):
        axis = node.attrs['axis'] % grad.ndim
        grads = []
        start = 0
        for t, needed in zip(node.inputs, node.needs_input_grad):
            stop = start + t.shape[axis]
            if needed:
                key = tuple(slice(None) for _ in range(axis)) + (slice(start, stop),)
                grads.append(grad[key])
            else:
                grads.append(None)
            start = stop
        return tuple(grads)


class GetItem(Function):
    name = 'getitem'

    @staticmethod
    def forward(node, a):
        return a[node.attrs['key']]

    @staticmethod
    def backward(node, grad):
        return (IndexAdd.apply(grad, key=node.attrs['key'], shape=node.inputs[0].shape),)


class IndexAdd(Function):
    """Scatter-add of the input into zeros of the given shape. Adjoint of indexing."""

    name = 'index_add'

    @staticmethod
    def forward(node, g):
        out = np.zeros(node.attrs['shape'], dtype=g.dtype)
        np.add.at(out, node.attrs['key'], g)
        return out

    @staticmethod
    def backward(node, grad):
        return (grad[node.attrs['key']],)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError('matmul', a.shape, b.shape)
    return MatMul.apply(a, b)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must be in (0, 1), got {slope}")
    return LeakyReLU.apply(x, slope=slope)


def max_pool_points(features: Tensor) -> Tensor:
    """Columnwise max of a (n_points, d) feature matrix."""
    if features.ndim != 2:
        raise DimensionError('max_pool_points', features.shape)
    if features.shape[0] == 0:
        raise DegenerateInputError("max_pool_points needs at least one point")
    return Max.apply(features, axis=0)


def max_along(x: Tensor, axis: int) -> Tensor:
    if x.shape[axis] == 0:
        raise DegenerateInputError(f"max over an empty axis {axis} of shape {x.shape}")
    return Max.apply(x, axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def sqrt(x: Tensor) -> Tensor:
    return Sqrt.apply(x)


def absolute(x: Tensor) -> Tensor:
    return Abs.apply(x)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    return Clip.apply(x, low=low, high=high)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError('reshape', x.shape, shape)
    return Reshape.apply(x, shape=shape)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return BroadcastTo.apply(x, shape=shape)


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return SumTo.apply(x, shape=shape)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if len(tensors) == 1:
        return tensors[0]
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or any(n != m for i, (n, m) in enumerate(zip(t.shape, reference))
                                           if i != axis % len(reference)):
            raise DimensionError('concat', reference, t.shape)
    return Concat.apply(*tensors, axis=axis)


def take(x: Tensor, indices) -> Tensor:
    """Gather rows (first axis) of x."""
    return GetItem.apply(x, key=np.asarray(indices, dtype=np.intp))


def l1_norm(x: Tensor, axis: int | None = None) -> Tensor:
    return absolute(x).sum(axis=axis)


def l2_norm(x: Tensor, axis: int | None = None) -> Tensor:
    return sqrt((x * x).sum(axis=axis))


def _topological_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from root through requires_grad edges, inputs before outputs."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def _propagate(root: Tensor, create_graph: bool) -> tuple[dict[int, Tensor], list[Tensor]]:
    if root.data.size != 1:
        raise ContractError(f"gradient requested of a non-scalar tensor of shape {root.shape}")
    order = _topological_order(root)
    grads: dict[int, Tensor] = {id(root): Tensor(np.ones_like(root.data))}
    with enable_grad() if create_graph else no_grad():
        for tensor in reversed(order):
            grad = grads.get(id(tensor))
            node = tensor.node
            if grad is None or node is None:
                continue
            if create_graph and not node.function.second_order:
                raise CapabilityError(node.function.name)
            for parent, parent_grad in zip(node.inputs, node.function.backward(node, grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
    return grads, order


def backward(loss: Tensor) -> None:
    """
    Accumulate d loss / d t into ``t.grad`` for every requires_grad tensor reachable from the scalar loss.

    Calling it twice without zeroing adds the gradients twice.

    :param loss: A scalar tensor.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads, order = _propagate(loss, create_graph=False)
    for tensor in order:
        if (grad := grads.get(id(tensor))) is not None:
            tensor.grad = grad.data.copy() if tensor.grad is None else tensor.grad + grad.data


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """
    Gradients of a scalar output with respect to the given inputs, without touching ``.grad``.

    :param output: A scalar tensor.
    :param inputs: Tensors to differentiate with respect to. Unreached inputs get a zero gradient.
    :param create_graph: Record the backward pass so that the returned gradients are differentiable.
    :return: One gradient tensor per input.
    """
    if output.data.size != 1:
        raise ContractError(f"grad needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return [Tensor(np.zeros_like(t.data)) for t in inputs]
    grads, _ = _propagate(output, create_graph=create_graph)
    result = []
    for t in inputs:
        g = grads.get(id(t))
        result.append(Tensor(np.zeros_like(t.data)) if g is None else g)
    return result


def grad_of_grad(critic: Callable[[Tensor], Tensor],
                 point: np.ndarray | Tensor,
                 reduce: Callable[[Tensor], Tensor],
                 wrt: Sequence[Tensor]) -> list[Tensor]:
    """
    Differentiate a scalar function of an input gradient with respect to parameters.

    Computes ``d reduce(d critic(x) / dx) / d wrt`` at ``x = point``. The critic must only use second-order capable
    operations.

    :param critic: Maps an input tensor to a scalar.
    :param point: Where the input gradient is evaluated.
    :param reduce: Maps the input gradient to a scalar, e.g. a gradient penalty.
    :param wrt: Parameters of the critic.
    :return: One gradient per parameter.
    """
    values = point.data if isinstance(point, Tensor) else np.asarray(point)
    x = Tensor(values, requires_grad=True)
    (input_grad,) = grad(critic(x), [x], create_graph=True)
    return grad(reduce(input_grad), wrt)
