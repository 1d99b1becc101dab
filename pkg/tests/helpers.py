# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
"""Finite-difference oracles and small builders shared by the tests."""

from collections.abc import Callable

import numpy as np

from fewpoint.autodiff import Tensor, backward
from fewpoint.decoder import DecoderConfig
from fewpoint.encoder import EncoderConfig
from fewpoint.gan import GanConfig
from fewpoint.layers import Module
from fewpoint.network import CompletionNetwork, Variant

EPSILON = 1e-6


def numerical_gradient(f: Callable[[np.ndarray], float], values: np.ndarray, eps: float = EPSILON) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    values = np.array(values, dtype=np.float64)
    gradient = np.zeros_like(values)
    for index in np.ndindex(values.shape):
        saved = values[index]
        values[index] = saved + eps
        plus = f(values)
        values[index] = saved - eps
        minus = f(values)
        values[index] = saved
        gradient[index] = (plus - minus) / (2.0 * eps)
    return gradient


def autodiff_gradient(f: Callable[[Tensor], Tensor], values: np.ndarray) -> np.ndarray:
    x = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
    backward(f(x))
    return x.grad


def check_function_gradient(f: Callable[[Tensor], Tensor], values: np.ndarray, rtol: float = 1e-6,
                            atol: float = 1e-8) -> None:
    expected = numerical_gradient(lambda v: f(Tensor(v)).item(), values)
    np.testing.assert_allclose(autodiff_gradient(f, values), expected, rtol=rtol, atol=atol)


def check_parameter_gradients(loss: Callable[[], Tensor], module: Module, rtol: float = 1e-4, atol: float = 1e-6,
                              entries: int = 12, seed: int = 0) -> None:
    """
    Compare backpropagated parameter gradients with central differences on a few entries of every parameter.

    The loss closure must read the current parameter values each time it is called.
    """
    module.zero_grad()
    backward(loss())
    rng = np.random.default_rng(seed)
    for name, p in module.named_parameters():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        picked = rng.choice(flat.size, size=min(entries, flat.size), replace=False)
        numeric = []
        for i in picked:
            saved = flat[i]
            flat[i] = saved + EPSILON
            plus = loss().item()
            flat[i] = saved - EPSILON
            minus = loss().item()
            flat[i] = saved
            numeric.append((plus - minus) / (2.0 * EPSILON))
        np.testing.assert_allclose(analytic.reshape(-1)[picked], numeric, rtol=rtol, atol=atol, err_msg=name)


def nonzero_fraction(module: Module, sections: list[str] | None = None) -> float:
    """Fraction of parameter entries with a non-zero gradient."""
    total = 0
    nonzero = 0
    for name, p in module.named_parameters():
        if sections is not None and name.split('.')[0] not in sections:
            continue
        total += p.data.size
        if p.grad is not None:
            nonzero += int(np.count_nonzero(p.grad))
    return nonzero / total


def random_cloud(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.normal(size=(n, 3))


def tiny_encoder_config() -> EncoderConfig:
    return EncoderConfig(per_point_dims=[8, 12, 16], pooled_levels=[0, 1, 2], attention_dim=4, mgfv_dim=8)


def tiny_decoder_config(**overrides) -> DecoderConfig:
    values = dict(coarse_n=8, grid_side=2, sa_centroids=4, sa_radius=0.5, sa_k=3, local_dim=4, fc_dims=[16],
                  fold_dims=[8])
    values.update(overrides)
    return DecoderConfig(**values)


def tiny_gan_config(**overrides) -> GanConfig:
    values = dict(token_count=4, memory_units=3, critic_dims=[6], critic_steps=2)
    values.update(overrides)
    return GanConfig(**values)


def tiny_network(variant: Variant = Variant(), seed: int = 0, dtype=np.float64, **decoder) -> CompletionNetwork:
    return CompletionNetwork(tiny_encoder_config(), tiny_decoder_config(**decoder), tiny_gan_config(), variant, seed,
                             dtype)


TINY_SETTINGS = {
    'per_point_dims': [8, 12, 16],
    'attention_dim': 4,
    'mgfv_dim': 8,
    'coarse_n': 8,
    'grid_side': 2,
    'sa_centroids': 4,
    'sa_radius': 0.5,
    'sa_k': 3,
    'local_dim': 4,
    'fc_dims': [16],
    'fold_dims': [8],
    'token_count': 4,
    'memory_units': 3,
    'critic_dims': [6],
    'critic_steps': 2,
}
