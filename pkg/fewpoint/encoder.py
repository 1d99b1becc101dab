# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
"""
Ensemble encoder.

Two branches read the same cloud: a PointNet-style combined MLP (PN-CMLP) and the same MLP with a self-attention
block after the first embedding layer (T-CMLP). Each branch max-pools several of its per-point layers and
concatenates the pooled vectors. A fully connected layer with LeakyReLU fuses both into the multi-level global
feature vector (MGFV). The partial and the complete clouds go through the same encoder weights.
"""

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from fewpoint.autodiff import Tensor, concat, leaky_relu, max_pool_points, reshape, softmax
from fewpoint.errors import ContractError, DimensionError
from fewpoint.layers import Linear, MLP, Module, as_tensor

MGFV = Tensor


@dataclass
class EncoderConfig:
    """
    Encoder dimensions.

    Properties
    ----------

    per_point_dims: Widths of the shared per-point layers.
    pooled_levels: Indices of the layers feeding the multi-level pooling.
    attention_heads: Number of attention heads (only 1 is implemented).
    attention_dim: Width of queries and keys.
    mgfv_dim: Width of the fused feature vector.
    leaky_slope: LeakyReLU slope.
    """

    per_point_dims: list[int] = field(default_factory=lambda: [64, 128, 256, 512, 1024])
    pooled_levels: list[int] = field(default_factory=lambda: [2, 3, 4])
    attention_heads: int = 1
    attention_dim: int = 256
    mgfv_dim: int = 1024
    leaky_slope: float = 0.2

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any]) -> 'EncoderConfig':
        default = cls()
        dims = list(settings.get('per_point_dims', default.per_point_dims))
        last_three = list(range(max(len(dims) - 3, 0), len(dims)))
        config = cls(per_point_dims=dims,
                     pooled_levels=list(settings.get('pooled_levels', last_three)),
                     attention_heads=int(settings.get('attention_heads', default.attention_heads)),
                     attention_dim=int(settings.get('attention_dim', default.attention_dim)),
                     mgfv_dim=int(settings.get('mgfv_dim', default.mgfv_dim)),
                     leaky_slope=float(settings.get('leaky_slope', default.leaky_slope)))
        config.validate()
        return config

    def validate(self) -> None:
        if not self.per_point_dims or any(d <= 0 for d in self.per_point_dims):
            raise ContractError(f"per_point_dims must be positive widths, got {self.per_point_dims}")
        if not self.pooled_levels or not set(self.pooled_levels) <= set(range(len(self.per_point_dims))):
            raise ContractError(f"pooled_levels {self.pooled_levels} must be layer indices "
                                f"of per_point_dims {self.per_point_dims}")
        if self.attention_heads != 1:
            raise ContractError(f"only single-head attention is implemented, got {self.attention_heads} heads")
        if self.mgfv_dim <= 0 or self.attention_dim <= 0:
            raise ContractError("mgfv_dim and attention_dim must be positive")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ContractError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")

    @property
    def pooled_width(self) -> int:
        """Width of one branch output."""
        return sum(self.per_point_dims[i] for i in self.pooled_levels)


def pool_levels(levels: Sequence[Tensor], pooled: Sequence[int]) -> Tensor:
    return concat([max_pool_points(levels[i]) for i in pooled], axis=0)


class PointNetBranch(Module):
    """PN-CMLP: shared per-point MLP and multi-level max pooling."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.config = config
        self.mlp = MLP([3] + config.per_point_dims, rng, config.leaky_slope, final_activation=True, dtype=dtype)

    def levels(self, points: Tensor) -> list[Tensor]:
        return self.mlp.trace(points)

    def forward(self, points: Tensor) -> Tensor:
        return pool_levels(self.levels(points), self.config.pooled_levels)


class SelfAttention(Module):
    """
    Single-head scaled dot-product self-attention over the points, with residual connections around the
    attention and around a per-point layer.
    """

    def __init__(self, width: int, attention_dim: int, rng: np.random.Generator, slope: float, dtype=np.float64):
        super().__init__()
        self.query = Linear(width, attention_dim, rng, dtype)
        self.key = Linear(width, attention_dim, rng, dtype)
        self.value = Linear(width, width, rng, dtype)
        self.feed_forward = Linear(width, width, rng, dtype)
        self.scale = 1.0 / math.sqrt(attention_dim)
        self.slope = slope

    def weights(self, x: Tensor) -> Tensor:
        """(n, n) attention matrix, each row sums to 1."""
        return softmax(self.query(x) @ self.key(x).T * self.scale, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        h = x + self.weights(x) @ self.value(x)
        return h + leaky_relu(self.feed_forward(h), self.slope)


class TransformerBranch(Module):
    """T-CMLP: embedding layer, self-attention, remaining per-point layers and multi-level max pooling."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.config = config
        dims = config.per_point_dims
        self.embedding = Linear(3, dims[0], rng, dtype)
        self.attention = SelfAttention(dims[0], config.attention_dim, rng, config.leaky_slope, dtype)
        self.mlp = MLP(dims, rng, config.leaky_slope, final_activation=True, dtype=dtype) if len(dims) > 1 else None

    def attention_input(self, points: Tensor) -> Tensor:
        return leaky_relu(self.embedding(points), self.config.leaky_slope)

    def levels(self, points: Tensor) -> list[Tensor]:
        attended = self.attention(self.attention_input(points))
        return [attended] + (self.mlp.trace(attended) if self.mlp is not None else [])

    def forward(self, points: Tensor) -> Tensor:
        return pool_levels(self.levels(points), self.config.pooled_levels)


class Encoder(Module):
    """
    The ensemble encoder.

    :param config: Dimensions.
    :param rng: Generator used for the weight initialization.
    :param use_transformer_branch: Without it the encoder reduces to PN-CMLP followed by the fusion layer.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, use_transformer_branch: bool = True,
                 dtype=np.float64):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = dtype
        self.use_transformer_branch = use_transformer_branch
        self.pn_branch = PointNetBranch(config, rng, dtype)
        if use_transformer_branch:
            self.t_branch = TransformerBranch(config, rng, dtype)
        branches = 2 if use_transformer_branch else 1
        self.fusion = Linear(branches * config.pooled_width, config.mgfv_dim, rng, dtype)

    def pn_cmlp(self, cloud) -> Tensor:
        return self.pn_branch(as_tensor(cloud, self.dtype))

    def t_cmlp(self, cloud) -> Tensor:
        if not self.use_transformer_branch:
            raise ContractError("the transformer branch is disabled in this encoder")
        return self.t_branch(as_tensor(cloud, self.dtype))

    def fuse(self, mgfv_pn: Tensor, mgfv_t: Tensor | None = None) -> MGFV:
        """LeakyReLU(FC(concat(mgfv_pn, mgfv_t)))."""
        parts = [mgfv_pn] if mgfv_t is None else [mgfv_pn, mgfv_t]
        joined = concat(parts, axis=0)
        if joined.shape != (self.fusion.in_features,):
            raise DimensionError('fuse', tuple(p.shape for p in parts), (self.fusion.in_features,))
        fused = self.fusion(reshape(joined, (1, joined.shape[0])))
        return reshape(leaky_relu(fused, self.config.leaky_slope), (self.config.mgfv_dim,))

    def encode(self, cloud) -> MGFV:
        points = as_tensor(cloud, self.dtype)
        if points.ndim != 2 or points.shape[0] == 0 or points.shape[1] != 3:
            raise ContractError(f"encode needs a non-empty (n, 3) cloud, got shape {points.shape}")
        mgfv_pn = self.pn_branch(points)
        mgfv_t = self.t_branch(points) if self.use_transformer_branch else None
        return self.fuse(mgfv_pn, mgfv_t)

    def forward(self, cloud) -> MGFV:
        return self.encode(cloud)
