# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
"""
Wasserstein GAN with gradient penalty in the space of global feature vectors.

The generator maps the feature of a partial cloud to a corrected feature. The critic reshapes a feature into tokens,
runs external attention against two small learnable memories and scores the result with a fully connected stack.
Real samples are features of complete clouds, fake samples are generator outputs on features of partial clouds.

Batches are (batch, mgfv_dim) tensors.
"""

import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from fewpoint.autodiff import Tensor, clip, grad, l1_norm, l2_norm, log, reshape, sigmoid, softmax
from fewpoint.errors import ContractError
from fewpoint.layers import MLP, Module, Parameter, frozen

logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-7
ATTENTION_EPSILON = 1e-9


@dataclass
class GanConfig:
    """
    Feature GAN settings.

    Properties
    ----------

    gp_lambda: Weight of the gradient penalty.
    critic_steps: Critic updates per generator update.
    alpha: Weight of the adversarial generator term.
    beta: Weight of the L1 feature term.
    token_count: Number of tokens a feature is cut into for external attention.
    memory_units: Rows of the external memories.
    critic_dims: Hidden widths of the critic head.
    unsigned_bce: Use the cross entropy without its leading minus sign.
    """

    gp_lambda: float = 10.0
    critic_steps: int = 5
    alpha: float = 1.0
    beta: float = 10.0
    token_count: int = 16
    memory_units: int = 64
    critic_dims: list[int] = field(default_factory=lambda: [256])
    leaky_slope: float = 0.2
    unsigned_bce: bool = False

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any]) -> 'GanConfig':
        default = cls()
        return cls(gp_lambda=float(settings.get('gp_lambda', default.gp_lambda)),
                   critic_steps=int(settings.get('critic_steps', default.critic_steps)),
                   alpha=float(settings.get('gan_alpha', default.alpha)),
                   beta=float(settings.get('gan_beta', default.beta)),
                   token_count=int(settings.get('token_count', default.token_count)),
                   memory_units=int(settings.get('memory_units', default.memory_units)),
                   critic_dims=list(settings.get('critic_dims', default.critic_dims)),
                   leaky_slope=float(settings.get('leaky_slope', default.leaky_slope)),
                   unsigned_bce=bool(settings.get('unsigned_bce', default.unsigned_bce)))

    def token_dim(self, mgfv_dim: int) -> int:
        return mgfv_dim // self.token_count

    def validate(self, mgfv_dim: int) -> None:
        if self.token_count < 1 or mgfv_dim % self.token_count:
            raise ContractError(f"token_count {self.token_count} must divide mgfv_dim {mgfv_dim}")
        if self.gp_lambda < 0:
            raise ContractError(f"gp_lambda must be >= 0, got {self.gp_lambda}")
        if self.critic_steps < 1:
            raise ContractError(f"critic_steps must be >= 1, got {self.critic_steps}")
        if self.memory_units < 1:
            raise ContractError(f"memory_units must be >= 1, got {self.memory_units}")


def _batch(x: Tensor) -> Tensor:
    return reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


class Generator(Module):
    """Residual pyramid ``x + delta(x)`` with delta going mgfv_dim -> 2 mgfv_dim -> mgfv_dim."""

    def __init__(self, mgfv_dim: int, rng: np.random.Generator, slope: float = 0.2, dtype=np.float64):
        super().__init__()
        self.delta = MLP([mgfv_dim, 2 * mgfv_dim, mgfv_dim], rng, slope, dtype=dtype)

    def generate(self, x: Tensor) -> Tensor:
        if not np.all(np.isfinite(x.data)):
            raise ContractError("generator input must be finite")
        if x.ndim == 1:
            return reshape(self.generate(_batch(x)), x.shape)
        return x + self.delta(x)

    def forward(self, x: Tensor) -> Tensor:
        return self.generate(x)


class ExternalAttention(Module):
    """
    Attention of tokens against a key memory and a value memory shared by all samples.

    The (tokens, memory) map is soft-maxed over the token axis, then each row is L1-normalized over the memory
    axis. The attended values are added to the tokens.
    """

    def __init__(self, token_dim: int, memory_units: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        bound = 1.0 / np.sqrt(token_dim)
        self.memory_key = Parameter(rng.uniform(-bound, bound, size=(memory_units, token_dim)).astype(dtype))
        self.memory_value = Parameter(rng.uniform(-bound, bound, size=(memory_units, token_dim)).astype(dtype))

    def attention(self, tokens: Tensor) -> Tensor:
        """(batch, tokens, memory) map for (batch, tokens, token_dim) input."""
        b, t, d = tokens.shape
        scores = reshape(reshape(tokens, (b * t, d)) @ self.memory_key.T, (b, t, self.memory_key.shape[0]))
        weights = softmax(scores, axis=1)
        return weights / (weights.sum(axis=2, keepdims=True) + ATTENTION_EPSILON)

    def forward(self, tokens: Tensor) -> Tensor:
        """(t, d) or (batch, t, d) tokens in, same shape out."""
        if tokens.ndim == 2:
            return reshape(self.forward(reshape(tokens, (1,) + tokens.shape)), tokens.shape)
        b, t, d = tokens.shape
        weights = reshape(self.attention(tokens), (b * t, self.memory_value.shape[0]))
        return reshape(weights @ self.memory_value, (b, t, d)) + tokens


class Discriminator(Module):
    """Critic: external attention over the feature tokens, then a fully connected head with a raw scalar output."""

    def __init__(self, config: GanConfig, mgfv_dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        config.validate(mgfv_dim)
        self.config = config
        self.mgfv_dim = mgfv_dim
        self.attention = ExternalAttention(config.token_dim(mgfv_dim), config.memory_units, rng, dtype)
        self.head = MLP([mgfv_dim] + config.critic_dims + [1], rng, config.leaky_slope, dtype=dtype)

    def discriminate(self, f: Tensor) -> Tensor:
        """Critic values: a scalar for one (mgfv_dim,) feature, a (batch,) vector for a batch."""
        if not np.all(np.isfinite(f.data)):
            raise ContractError("critic input must be finite")
        batch = _batch(f)
        b = batch.shape[0]
        tokens = reshape(batch, (b, self.config.token_count, self.config.token_dim(self.mgfv_dim)))
        scores = self.head(reshape(self.attention(tokens), (b, self.mgfv_dim)))
        return reshape(scores, () if f.ndim == 1 else (b,))

    def forward(self, f: Tensor) -> Tensor:
        return self.discriminate(f)


@dataclass
class CriticTerms:
    """
    Properties
    ----------

    loss: Quantity minimized by the critic step.
    wasserstein: E[D(real)] - E[D(fake)].
    penalty: E[(|grad D(x_hat)| - 1)^2], before the lambda weight.
    """

    loss: Tensor
    wasserstein: float
    penalty: float


@dataclass
class GeneratorTerms:
    loss: Tensor
    adversarial: float
    l1: float


def _check_pair(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ContractError(f"paired feature batches must have the same shape, got {x.shape} and {y.shape}")


def interpolate(x_real: np.ndarray, x_fake: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """u x_real + (1 - u) x_fake with one uniform u per sample."""
    u = rng.uniform(0.0, 1.0, size=(x_real.shape[0], 1)).astype(x_real.dtype)
    return u * x_real + (1.0 - u) * x_fake


def critic_terms(critic: Callable[[Tensor], Tensor], x_real: Tensor, x_fake: Tensor, gp_lambda: float,
                 rng: np.random.Generator) -> CriticTerms:
    """
    Critic loss E[D(fake)] - E[D(real)] + lambda E[(|grad D(x_hat)| - 1)^2].

    Both batches are detached, only the critic parameters receive gradients.
    """
    x_real, x_fake = _batch(x_real).detach(), _batch(x_fake).detach()
    _check_pair(x_real, x_fake)
    real_score = critic(x_real).mean()
    fake_score = critic(x_fake).mean()
    x_hat = Tensor(interpolate(x_real.data, x_fake.data, rng), requires_grad=True)
    (input_grad,) = grad(critic(x_hat).sum(), [x_hat], create_graph=True)
    penalty = ((l2_norm(input_grad, axis=1) - 1.0) ** 2).mean()
    loss = fake_score - real_score + gp_lambda * penalty
    return CriticTerms(loss, real_score.item() - fake_score.item(), penalty.item())


def discriminator_loss(critic: Callable[[Tensor], Tensor], x_real: Tensor, x_fake: Tensor, seed: int | list[int],
                       gp_lambda: float = 10.0) -> Tensor:
    """Critic loss with the interpolation drawn from ``seed``."""
    return critic_terms(critic, x_real, x_fake, gp_lambda, np.random.default_rng(seed)).loss


def bce(z, t: float, literal: bool = False) -> Tensor:
    """
    Binary cross entropy -(t log z + (1 - t) log(1 - z)) with z clamped to [1e-7, 1 - 1e-7].

    :param literal: Drop the leading minus sign.
    """
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    z = clip(z, BCE_CLAMP, 1.0 - BCE_CLAMP)
    value = t * log(z) + (1.0 - t) * log(1.0 - z)
    return value if literal else -value


def generator_terms(generator: Generator, critic: Module, x: Tensor, y: Tensor, config: GanConfig) -> GeneratorTerms:
    """
    Generator loss alpha (bce(sigmoid D(x), 1) + bce(sigmoid D(G(x)), 1)) + beta mean |y - G(x)|_1.

    The critic is frozen while the loss graph is built, so backpropagation leaves its parameters alone. The target
    features y are detached.
    """
    x, y = _batch(x), _batch(y).detach()
    _check_pair(x, y)
    with frozen(critic):
        fake = generator(x)
        literal = config.unsigned_bce
        adversarial = (bce(sigmoid(critic(x)), 1.0, literal).mean()
                       + bce(sigmoid(critic(fake)), 1.0, literal).mean())
        l1 = l1_norm(y - fake, axis=1).mean()
        loss = config.alpha * adversarial + config.beta * l1
    return GeneratorTerms(loss, adversarial.item(), l1.item())


def generator_loss(generator: Generator, critic: Module, x: Tensor, y: Tensor, config: GanConfig) -> Tensor:
    return generator_terms(generator, critic, x, y, config).loss

