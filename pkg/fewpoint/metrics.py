# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
"""
Point-set distances and neighborhood queries.

Chamfer distance uses the Euclidean norm, not its square, unless ``squared=True`` is asked. Nearest neighbors
are searched by brute force.
"""

import logging
from dataclasses import dataclass

import numpy as np

from fewpoint.assignment import auction, hungarian
from fewpoint.autodiff import Tensor, l2_norm, take
from fewpoint.errors import ContractError, DegenerateInputError
from fewpoint.pointcloud import PointCloud, farthest_point_sample

logger = logging.getLogger(__name__)

EXACT_EMD_LIMIT = 256


@dataclass
class Assignment:
    """
    A matching between two equal-size point sets.

    Properties
    ----------

    permutation: permutation[i] is the index in S2 matched to point i of S1.
    cost: Mean matched Euclidean distance.
    """

    permutation: np.ndarray
    cost: float


def _points(cloud: PointCloud | np.ndarray) -> np.ndarray:
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise DegenerateInputError(f"point set must be a non-empty (n, 3) array, got shape {points.shape}")
    return points


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, m) squared Euclidean distances, computed coordinate-wise so that the result is exactly symmetric."""
    return np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)


def chamfer(s1: PointCloud | np.ndarray, s2: PointCloud | np.ndarray, squared: bool = False) -> float:
    """
    Symmetric mean nearest-neighbor distance. The sets may differ in size.

    :param s1: First set.
    :param s2: Second set.
    :param squared: Use squared distances instead of distances.
    :return: mean_x min_y |x - y| + mean_y min_x |y - x|.
    """
    d = squared_distances(_points(s1), _points(s2))
    forward = d.min(axis=1)
    backward = d.min(axis=0)
    if not squared:
        forward = np.sqrt(forward)
        backward = np.sqrt(backward)
    return float(forward.mean()) + float(backward.mean())


def chamfer_loss(s1: Tensor, s2: Tensor, squared: bool = False) -> Tensor:
    """
    Differentiable chamfer distance between two (n, 3) tensors.

    Nearest neighbors are chosen on the values, then distances to them are differentiated.
    """
    if s1.ndim != 2 or s2.ndim != 2 or s1.shape[0] == 0 or s2.shape[0] == 0:
        raise DegenerateInputError(f"chamfer needs non-empty point sets, got {s1.shape} and {s2.shape}")
    d = squared_distances(s1.data, s2.data)
    to_s2 = s1 - take(s2, np.argmin(d, axis=1))
    to_s1 = s2 - take(s1, np.argmin(d, axis=0))
    if squared:
        return (to_s2 * to_s2).sum(axis=1).mean() + (to_s1 * to_s1).sum(axis=1).mean()
    return l2_norm(to_s2, axis=1).mean() + l2_norm(to_s1, axis=1).mean()


def _assignment(s1: np.ndarray, s2: np.ndarray, permutation: np.ndarray) -> Assignment:
    distances = np.linalg.norm(s1 - s2[permutation], axis=1)
    return Assignment(permutation, float(distances.mean()))


def _check_same_size(s1: np.ndarray, s2: np.ndarray) -> None:
    if s1.shape[0] != s2.shape[0]:
        raise ContractError(f"EMD needs sets of the same size, got {s1.shape[0]} and {s2.shape[0]}")


def emd_exact(s1: PointCloud | np.ndarray, s2: PointCloud | np.ndarray, limit: int = EXACT_EMD_LIMIT) -> Assignment:
    """
    Earth Mover's Distance by the Hungarian method.

    :param limit: Largest accepted size; bigger sets must use :func:`emd_auction`.
    """
    a, b = _points(s1), _points(s2)
    _check_same_size(a, b)
    if a.shape[0] > limit:
        raise ContractError(f"exact EMD is limited to {limit} points, got {a.shape[0]}; use the auction")
    cost = np.sqrt(squared_distances(a, b))
    return _assignment(a, b, hungarian(cost))


def emd_auction(s1: PointCloud | np.ndarray, s2: PointCloud | np.ndarray, epsilon: float = 0.01) -> Assignment:
    """Earth Mover's Distance within a factor (1 + epsilon) of the optimum."""
    a, b = _points(s1), _points(s2)
    _check_same_size(a, b)
    cost = np.sqrt(squared_distances(a, b))
    return _assignment(a, b, auction(cost, epsilon))


def emd(s1: PointCloud | np.ndarray, s2: PointCloud | np.ndarray, epsilon: float = 0.01,
        limit: int = EXACT_EMD_LIMIT) -> float:
    """
    EMD for evaluation. Sets of different sizes are first brought to the smaller size by farthest point sampling
    of the larger one. Exact up to ``limit`` points, auction beyond.
    """
    a, b = _points(s1), _points(s2)
    if a.shape[0] > b.shape[0]:
        a = a[farthest_point_sample(a, b.shape[0])]
    elif b.shape[0] > a.shape[0]:
        b = b[farthest_point_sample(b, a.shape[0])]
    if a.shape[0] <= limit:
        return emd_exact(a, b, limit).cost
    return emd_auction(a, b, epsilon).cost


def emd_loss(s1: Tensor, s2: Tensor, epsilon: float = 0.01) -> Tensor:
    """Differentiable EMD: mean matched distance under an assignment computed on the values."""
    a, b = s1.data.astype(np.float64), s2.data.astype(np.float64)
    _check_same_size(a, b)
    permutation = emd_auction(a, b, epsilon).permutation
    return l2_norm(s1 - take(s2, permutation), axis=1).mean()


def knn(centers: PointCloud | np.ndarray, cloud: PointCloud | np.ndarray, k: int) -> np.ndarray:
    """
    The k nearest cloud points of each center.

    :return: (n_centers, k) indices, nearest first, ties by lowest index.
    """
    c, p = _points(centers), _points(cloud)
    if not 1 <= k <= p.shape[0]:
        raise ContractError(f"knn needs 1 <= k <= {p.shape[0]}, got {k}")
    order = np.argsort(squared_distances(c, p), axis=1, kind='stable')
    return order[:, :k]


def ball_query(centers: PointCloud | np.ndarray, cloud: PointCloud | np.ndarray, k: int, radius: float) -> np.ndarray:
    """
    Up to k cloud points within radius of each center, nearest first, padded with the nearest one.

    A center with no point in its ball gets its nearest point k times.

    :return: (n_centers, k) indices.
    """
    if k < 1:
        raise ContractError(f"ball query needs k >= 1, got {k}")
    if radius <= 0:
        raise ContractError(f"ball query needs a positive radius, got {radius}")
    c, p = _points(centers), _points(cloud)
    d = squared_distances(c, p)
    order = np.argsort(d, axis=1, kind='stable')
    width = min(k, p.shape[0])
    nearest = order[:, :width]
    inside = np.take_along_axis(d, nearest, axis=1) <= radius * radius
    # the nearest point is outside only when the ball is empty
    inside[:, 0] = True
    groups = np.where(inside, nearest, nearest[:, :1])
    if width < k:
        groups = np.concatenate([groups, np.repeat(groups[:, :1], k - width, axis=1)], axis=1)
    return groups


def reduction_rate(baseline: float, ours: float) -> float:
    """(baseline - ours) / baseline. Negative when ours is worse."""
    if not baseline > 0:
        raise ContractError(f"reduction rate needs a positive baseline, got {baseline}")
    return (baseline - ours) / baseline
