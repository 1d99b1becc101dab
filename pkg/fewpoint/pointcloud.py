# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
"""
Point cloud data model, XYZ file I/O, normalization and the sampling / occlusion primitives.

XYZ files hold one ``x y z`` line per point. Blank lines and lines starting with ``#`` are ignored.
"""

import logging
from dataclasses import dataclass

import numpy as np

from fewpoint.errors import ContractError, DegenerateInputError, ParseError
from fewpoint.tool import create_parent

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class PointCloud:
    """
    An ordered list of 3D points, semantically a multiset.

    Properties
    ----------

    points: (n, 3) float64 array of finite coordinates, n >= 1.
    """

    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ContractError(f"a point cloud needs an (n, 3) array, got shape {points.shape}")
        if points.shape[0] == 0:
            raise DegenerateInputError("a point cloud needs at least one point")
        if not np.all(np.isfinite(points)):
            raise ContractError("point coordinates must be finite")
        self.points = points

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.count

    def multiset_equal(self, other: 'PointCloud', tol: float = 0.0) -> bool:
        """Order-insensitive comparison within an absolute tolerance."""
        if self.count != other.count:
            return False
        return bool(np.all(np.abs(_lexsorted(self.points) - _lexsorted(other.points)) <= tol))

    def is_submultiset_of(self, other: 'PointCloud', tol: float = 0.0) -> bool:
        """Test if every point of this cloud can be matched to a distinct point of the other one."""
        remaining = list(range(other.count))
        for point in self.points:
            for position, index in enumerate(remaining):
                if np.all(np.abs(other.points[index] - point) <= tol):
                    del remaining[position]
                    break
            else:
                return False
        return True


@dataclass(eq=False)
class SamplePair:
    """
    One training or evaluation instance.

    Properties
    ----------

    partial: The incomplete observation.
    gt: The complete cloud.
    class_label: Class name.
    sample_id: Unique identifier.
    """

    partial: PointCloud
    gt: PointCloud
    class_label: str
    sample_id: str

    def __post_init__(self):
        if self.partial.count > self.gt.count:
            raise ContractError(f"sample {self.sample_id}: partial has more points ({self.partial.count}) "
                                f"than ground truth ({self.gt.count})")


def _lexsorted(points: np.ndarray) -> np.ndarray:
    return points[np.lexsort(points.T[::-1])]


def read_xyz(path: str) -> PointCloud:
    """
    Read an XYZ file.

    :param path: File to read.
    :return: The point cloud.
    """
    rows = []
    with open(path, 'r') as f:
        for line_number, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith('#'):
                continue
            fields = stripped.split()
            if len(fields) != 3:
                raise ParseError(path, line_number, f"expected 3 coordinates, got {len(fields)}")
            try:
                values = [float(field) for field in fields]
            except ValueError as e:
                raise ParseError(path, line_number, f"invalid number: {e}") from e
            if not all(np.isfinite(values)):
                raise ParseError(path, line_number, "coordinates must be finite")
            rows.append(values)
    if not rows:
        raise DegenerateInputError(f"{path}: no points")
    return PointCloud(np.array(rows, dtype=np.float64))


def write_xyz(cloud: PointCloud | np.ndarray, path: str) -> None:
    """Write a cloud as an XYZ file, creating parent folders."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise ContractError(f"refusing to write non-finite coordinates to {path}")
    create_parent(path)
    np.savetxt(path, points, fmt='%.17g', delimiter=' ')


def normalize(cloud: PointCloud) -> tuple[PointCloud, np.ndarray, float]:
    """
    Center a cloud at its centroid and scale it to unit max radius.

    :return: The normalized cloud, the center and the scale. The scale is 1 when all points coincide.
    """
    center = cloud.points.mean(axis=0)
    shifted = cloud.points - center
    radius = float(np.max(np.linalg.norm(shifted, axis=1)))
    scale = radius if radius > 0.0 else 1.0
    return PointCloud(shifted / scale), center, scale


def apply_transform(cloud: PointCloud, center: np.ndarray, scale: float) -> PointCloud:
    """Apply the transform returned by :func:`normalize` to another cloud (e.g. the partial paired with a gt)."""
    return PointCloud((cloud.points - center) / scale)


def denormalize(cloud: PointCloud | np.ndarray, center: np.ndarray, scale: float) -> PointCloud:
    """Inverse of :func:`normalize`."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    return PointCloud(points * scale + center)


def random_subsample(cloud: PointCloud, k: int, seed: int | list[int]) -> PointCloud:
    """Draw k points without replacement, deterministically for a given seed."""
    if not 1 <= k <= cloud.count:
        raise ContractError(f"cannot subsample {k} points from a cloud of {cloud.count}")
    rng = np.random.default_rng(seed)
    return PointCloud(cloud.points[rng.choice(cloud.count, size=k, replace=False)])


def farthest_point_sample(points: PointCloud | np.ndarray, k: int, start_index: int = 0) -> np.ndarray:
    """
    Greedy max-min subset selection.

    :param points: Cloud or (n, 3) array.
    :param k: Number of indices to select.
    :param start_index: First selected index.
    :return: The k selected indices, all distinct. Ties are broken by the lowest index.
    """
    array = points.points if isinstance(points, PointCloud) else np.asarray(points)
    n = array.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"cannot select {k} points from a cloud of {n}")
    if not 0 <= start_index < n:
        raise ContractError(f"start index {start_index} out of range for {n} points")
    selected = np.empty(k, dtype=np.intp)
    selected[0] = start_index
    nearest = np.sum((array - array[start_index]) ** 2, axis=1).astype(np.float64)
    # chosen indices are never picked again, even among duplicate points
    nearest[start_index] = -np.inf
    for i in range(1, k):
        selected[i] = int(np.argmax(nearest))
        nearest = np.minimum(nearest, np.sum((array - array[selected[i]]) ** 2, axis=1))
        nearest[selected[: i + 1]] = -np.inf
    return selected


def halfspace_crop(cloud: PointCloud,
                   plane_normal: np.ndarray,
                   keep_fraction_min: float,
                   seed: int | list[int],
                   keep_fraction_max: float = 0.75) -> PointCloud:
    """
    Keep the points on one side of a plane, as a stand-in for a single-viewpoint observation.

    The threshold t is placed so that the kept fraction is drawn uniformly in [keep_fraction_min,
    keep_fraction_max]; every returned point p satisfies p . normal <= t.

    :param cloud: Input cloud.
    :param plane_normal: Non-zero normal of the cutting plane.
    :param keep_fraction_min: Lowest fraction of kept points.
    :param seed: Seed of the kept fraction draw.
    :param keep_fraction_max: Highest fraction of kept points.
    :return: The kept points, in input order.
    """
    normal = np.asarray(plane_normal, dtype=np.float64)
    if normal.shape != (3,) or not np.any(normal):
        raise ContractError(f"plane normal must be a non-zero 3-vector, got {plane_normal}")
    n = cloud.count
    low = int(np.ceil(keep_fraction_min * n))
    high = int(np.floor(keep_fraction_max * n))
    low = max(low, 1)
    if high < low:
        raise DegenerateInputError(
            f"a cloud of {n} points cannot keep a fraction in [{keep_fraction_min}, {keep_fraction_max}]")
    rng = np.random.default_rng(seed)
    kept = int(rng.integers(low, high + 1))
    projections = cloud.points @ normal
    # exactly `kept` points, ties on the plane going to the lowest indices
    order = np.argsort(projections, kind='stable')
    return PointCloud(cloud.points[np.sort(order[:kept])])
