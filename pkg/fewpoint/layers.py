# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
"""
Trainable building blocks: a module registry with dotted parameter names, fully connected layers and the freezing
helpers used by the staged training.
"""

import hashlib
from collections.abc import Iterator, Sequence
from contextlib import contextmanager

import numpy as np

from fewpoint.autodiff import Tensor, leaky_relu
from fewpoint.errors import CheckpointError, DimensionError


class Module:
    """
    A container of parameters and sub-modules.

    Attributes holding a :class:`Parameter` or another :class:`Module` are collected by :meth:`named_parameters`
    in assignment order, so parameter names are stable across runs.
    """

    def __init__(self):
        self._children: dict[str, Module | Tensor] = {}

    def __setattr__(self, key, value):
        if isinstance(value, (Module, Tensor)) and not key.startswith('_') and '_children' in self.__dict__:
            self._children[key] = value
        object.__setattr__(self, key, value)

    def add_module(self, name: str, module: 'Module') -> None:
        self._children[name] = module
        object.__setattr__(self, name, module)

    def named_parameters(self, prefix: str = '') -> Iterator[tuple[str, Tensor]]:
        for name, child in self._children.items():
            full_name = f"{prefix}{name}"
            match child:
                case Module():
                    yield from child.named_parameters(f"{full_name}.")
                case Parameter():
                    yield full_name, child

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix: str = '') -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = '') -> None:
        """
        Copy values into the parameters.

        :param state: Name to array mapping. Must hold exactly the parameters of this module.
        :param prefix: Prefix of the names in the state.
        """
        own = dict(self.named_parameters(prefix))
        if unknown := sorted(set(state) - set(own)):
            raise CheckpointError(f"unknown parameter names: {', '.join(unknown)}")
        if missing := sorted(set(own) - set(state)):
            raise CheckpointError(f"missing parameter names: {', '.join(missing)}")
        for name, parameter in own.items():
            value = np.asarray(state[name])
            if value.shape != parameter.shape:
                raise CheckpointError(f"parameter {name}: expected shape {parameter.shape}, got {value.shape}")
            parameter.data = value.astype(parameter.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Parameter(Tensor):
    """A trainable tensor. Gradients are required unless the owning module is frozen."""

    def __init__(self, values: np.ndarray):
        super().__init__(values, requires_grad=True)


class Linear(Module):
    """
    Fully connected layer ``x @ weight + bias`` on a (n, in_features) matrix.

    Weights are drawn uniformly in +-1/sqrt(in_features), biases start at zero.
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_features, out_features)).astype(dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError('linear', x.shape, self.weight.shape)
        return x @ self.weight + self.bias


class MLP(Module):
    """
    Stack of Linear layers with LeakyReLU between them.

    :param widths: Layer widths, input first.
    :param final_activation: Apply LeakyReLU after the last layer too.
    """

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, slope: float = 0.2,
                 final_activation: bool = False, dtype=np.float64):
        super().__init__()
        self.slope = slope
        self.final_activation = final_activation
        self.layers: list[Linear] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            layer = Linear(fan_in, fan_out, rng, dtype)
            self.add_module(f"layer{i}", layer)
            self.layers.append(layer)

    def forward(self, x: Tensor) -> Tensor:
        return self.trace(x)[-1]

    def trace(self, x: Tensor) -> list[Tensor]:
        """Outputs of every layer, after activation."""
        outputs = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_activation:
                x = leaky_relu(x, self.slope)
            outputs.append(x)
        return outputs


@contextmanager
def frozen(*modules: Module) -> Iterator[None]:
    """Stop gradients to the parameters of the given modules inside the block."""
    parameters = [p for module in modules for p in module.parameters()]
    previous = [p.requires_grad for p in parameters]
    for p in parameters:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(parameters, previous):
            p.requires_grad = flag


def parameter_hash(module: Module) -> str:
    """sha256 over parameter names, shapes and bytes."""
    digest = hashlib.sha256()
    for name, p in module.named_parameters():
        digest.update(name.encode())
        digest.update(str(p.shape).encode())
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


def as_tensor(values, dtype=np.float64) -> Tensor:
    """Wrap a point cloud, an array or a tensor as a tensor of the given dtype (no copy of tensors)."""
    if isinstance(values, Tensor):
        return values
    array = getattr(values, 'points', values)
    return Tensor(np.asarray(array, dtype=dtype))
