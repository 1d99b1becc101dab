# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
"""
Coarse-to-fine decoder.

1. A fully connected stack turns the global feature into ``coarse_n`` points.
2. One PointNet++ set-abstraction level extracts local features of the coarse cloud: farthest point sampling of
   centroids, ball query grouping, a shared MLP on neighbor offsets and max pooling per group. Every coarse point
   takes the feature of its nearest centroid.
3. A folding MLP deforms a small 2D grid around each coarse point into ``grid_side**2`` dense points.
"""

from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from fewpoint.autodiff import Tensor, broadcast_to, concat, max_along, reshape, take
from fewpoint.errors import ContractError
from fewpoint.layers import MLP, Module, as_tensor
from fewpoint.metrics import ball_query, knn
from fewpoint.pointcloud import farthest_point_sample


@dataclass
class DecoderConfig:
    coarse_n: int = 64
    grid_side: int = 4
    sa_centroids: int | None = None
    sa_radius: float = 0.25
    sa_k: int = 8
    local_dim: int = 128
    fc_dims: list[int] = field(default_factory=lambda: [1024, 1024])
    fold_dims: list[int] = field(default_factory=lambda: [512, 512])
    grid_scale: float = 0.05
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.sa_centroids is None:
            self.sa_centroids = max(self.coarse_n // 2, 1)

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any]) -> 'DecoderConfig':
        default = cls()
        config = cls(coarse_n=int(settings.get('coarse_n', default.coarse_n)),
                     grid_side=int(settings.get('grid_side', default.grid_side)),
                     sa_centroids=settings.get('sa_centroids'),
                     sa_radius=float(settings.get('sa_radius', default.sa_radius)),
                     sa_k=int(settings.get('sa_k', default.sa_k)),
                     local_dim=int(settings.get('local_dim', default.local_dim)),
                     fc_dims=list(settings.get('fc_dims', default.fc_dims)),
                     fold_dims=list(settings.get('fold_dims', default.fold_dims)),
                     grid_scale=float(settings.get('grid_scale', default.grid_scale)),
                     leaky_slope=float(settings.get('leaky_slope', default.leaky_slope)))
        config.validate()
        return config

    @property
    def detail_n(self) -> int:
        return self.coarse_n * self.grid_side ** 2

    def validate(self) -> None:
        if self.coarse_n < 1 or self.grid_side < 1:
            raise ContractError(f"coarse_n and grid_side must be >= 1, got {self.coarse_n} and {self.grid_side}")
        if not 1 <= self.sa_centroids <= self.coarse_n:
            raise ContractError(f"sa_centroids must be in [1, coarse_n={self.coarse_n}], got {self.sa_centroids}")
        if self.sa_radius <= 0 or self.sa_k < 1 or self.local_dim < 1:
            raise ContractError("sa_radius, sa_k and local_dim must be positive")


def folding_grid(side: int, scale: float) -> np.ndarray:
    """(side*side, 2) grid nodes spanning [-scale, scale]^2."""
    axis = np.linspace(-scale, scale, side) if side > 1 else np.zeros(1)
    u, v = np.meshgrid(axis, axis, indexing='ij')
    return np.stack([u.reshape(-1), v.reshape(-1)], axis=1)


class Decoder(Module):
    """
    :param config: Decoder dimensions.
    :param mgfv_dim: Width of the global feature.
    :param rng: Generator used for weight initialization.
    :param use_pointnetpp_local: Without it the folding input has no local features.
    """

    def __init__(self, config: DecoderConfig, mgfv_dim: int, rng: np.random.Generator,
                 use_pointnetpp_local: bool = True, dtype=np.float64):
        super().__init__()
        config.validate()
        self.config = config
        self.mgfv_dim = mgfv_dim
        self.dtype = dtype
        self.use_pointnetpp_local = use_pointnetpp_local
        slope = config.leaky_slope
        self.coarse_mlp = MLP([mgfv_dim] + config.fc_dims + [config.coarse_n * 3], rng, slope, dtype=dtype)
        if use_pointnetpp_local:
            hidden = max(config.local_dim // 2, 1)
            self.group_mlp = MLP([3, hidden, config.local_dim], rng, slope, final_activation=True, dtype=dtype)
        local = config.local_dim if use_pointnetpp_local else 0
        self.folding = MLP([2 + 3 + local + mgfv_dim] + config.fold_dims + [3], rng, slope, dtype=dtype)
        self.grid = folding_grid(config.grid_side, config.grid_scale).astype(dtype)

    def coarse_generate(self, mgfv: Tensor) -> Tensor:
        """(coarse_n, 3) coarse cloud."""
        if not np.all(np.isfinite(mgfv.data)):
            raise ContractError("decoder input feature must be finite")
        flat = self.coarse_mlp(reshape(mgfv, (1, self.mgfv_dim)))
        return reshape(flat, (self.config.coarse_n, 3))

    def group_offsets(self, coarse: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """
        Set-abstraction grouping.

        :return: The (centroids * k, 3) neighbor offsets, the (centroids, k) groups and the centroid indices.
        """
        config = self.config
        coords = coarse.data.astype(np.float64)
        centroids = farthest_point_sample(coords, config.sa_centroids)
        groups = ball_query(coords[centroids], coords, config.sa_k, config.sa_radius)
        neighbors = take(coarse, groups.reshape(-1))
        centers = take(coarse, np.repeat(centroids, config.sa_k))
        return neighbors - centers, groups, centroids

    def local_features(self, coarse: Tensor) -> Tensor:
        """(coarse_n, local_dim) features, each coarse point taking its nearest centroid's group feature."""
        config = self.config
        offsets, _, centroids = self.group_offsets(coarse)
        features = self.group_mlp(offsets)
        pooled = max_along(reshape(features, (config.sa_centroids, config.sa_k, config.local_dim)), axis=1)
        coords = coarse.data.astype(np.float64)
        nearest = knn(coords, coords[centroids], 1)[:, 0]
        return take(pooled, nearest)

    def fold(self, coarse: Tensor, local: Tensor | None, mgfv: Tensor) -> Tensor:
        """(detail_n, 3) dense cloud: per coarse point and grid node, [u, v, point, local, mgfv] -> offset."""
        config = self.config
        repeats = config.grid_side ** 2
        rows = np.repeat(np.arange(config.coarse_n), repeats)
        anchors = take(coarse, rows)
        parts = [Tensor(np.tile(self.grid, (config.coarse_n, 1))), anchors]
        if local is not None:
            parts.append(take(local, rows))
        parts.append(broadcast_to(reshape(mgfv, (1, self.mgfv_dim)), (config.detail_n, self.mgfv_dim)))
        return anchors + self.folding(concat(parts, axis=1))

    def decode(self, mgfv) -> tuple[Tensor, Tensor]:
        mgfv = as_tensor(mgfv, self.dtype)
        coarse = self.coarse_generate(mgfv)
        local = self.local_features(coarse) if self.use_pointnetpp_local else None
        return coarse, self.fold(coarse, local, mgfv)

    def forward(self, mgfv) -> tuple[Tensor, Tensor]:
        return self.decode(mgfv)
