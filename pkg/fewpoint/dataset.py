# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
"""
Synthetic dataset of classed (partial, complete) pairs.

Complete clouds are sampled uniformly by area on eight parametric surfaces with randomized dimensions. Partial
clouds keep one side of a random plane (a stand-in for a single viewpoint) and are subsampled to a fixed count.

Layout of a dataset folder::

    manifest.tsv
    gt/<sample_id>.xyz
    partial/<sample_id>_v<view>.xyz

The manifest is tab-separated with a header line ``sample_id class split gt_path partial_paths``; partial paths
are separated by ``;`` and relative to the folder.
"""

import logging
import math
import os
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from fewpoint.errors import ContractError
from fewpoint.pointcloud import (PointCloud, SamplePair, halfspace_crop, normalize, random_subsample, read_xyz,
                                 write_xyz)
from fewpoint.tool import create_parent, derive_seed

logger = logging.getLogger(__name__)

CLASSES = ['sphere', 'cuboid', 'cylinder', 'cone', 'torus', 'capsule', 'ellipsoid', 'prism']
SPLITS = ['train', 'val', 'test']
MANIFEST = 'manifest.tsv'
MANIFEST_COLUMNS = ['sample_id', 'class', 'split', 'gt_path', 'partial_paths']
MIN_SHAPE_POINTS = 16


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _choose_parts(rng: np.random.Generator, n: int, areas: list[float]) -> np.ndarray:
    weights = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(areas), size=n, p=weights / weights.sum())


def _ring_triple(rng: np.random.Generator, rx: float, ry: float) -> np.ndarray:
    """Three points of the ellipse (rx cos, ry sin, 0) a third of a turn apart; they sum to zero."""
    angle = rng.uniform(0.0, 2.0 * math.pi) + np.arange(3) * (2.0 * math.pi / 3.0)
    return np.stack([rx * np.cos(angle), ry * np.sin(angle), np.zeros(3)], axis=1)


def _sphere(rng, n):
    radius = rng.uniform(0.5, 1.5)
    return radius * _unit_vectors(rng, n), _ring_triple(rng, radius, radius)


def _ellipsoid(rng, n):
    axes = rng.uniform(0.4, 1.0, size=3)
    a, b, c = axes
    largest = max(b * c, a * c, a * b)
    accepted = []
    count = 0
    while count < n:
        u = _unit_vectors(rng, 2 * n)
        # area element of the map from the unit sphere, relative to its maximum
        density = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2) / largest
        keep = u[rng.uniform(size=2 * n) < density]
        accepted.append(keep * axes)
        count += keep.shape[0]
    return np.concatenate(accepted)[:n], _ring_triple(rng, a, b)


def _cuboid(rng, n):
    half = rng.uniform(0.3, 1.0, size=3)
    x, y, z = half
    axis = _choose_parts(rng, n, [y * z, x * z, x * y])
    points = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    sign = rng.choice([-1.0, 1.0], size=n)
    rows = np.arange(n)
    points[rows, axis] = sign * half[axis]
    return points, np.array([[x, y / 2.0, 0.0], [-x, y / 2.0, 0.0], [0.0, -y, 0.0]])


def _cylinder(rng, n):
    radius, height = rng.uniform(0.3, 1.0, size=2)
    cap = math.pi * radius ** 2
    part = _choose_parts(rng, n, [2.0 * math.pi * radius * 2.0 * height, cap, cap])
    angle = rng.uniform(0.0, 2.0 * math.pi, size=n)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.select([part == 0, part == 1], [rng.uniform(-height, height, size=n), np.full(n, height)], -height)
    return np.stack([r * np.cos(angle), r * np.sin(angle), z], axis=1), _ring_triple(rng, radius, radius)


def _capsule(rng, n):
    radius = rng.uniform(0.2, 0.5)
    height = rng.uniform(0.3, 0.8)
    part = _choose_parts(rng, n, [2.0 * math.pi * radius * 2.0 * height, 4.0 * math.pi * radius ** 2])
    angle = rng.uniform(0.0, 2.0 * math.pi, size=n)
    side = np.stack([radius * np.cos(angle), radius * np.sin(angle), rng.uniform(-height, height, size=n)], axis=1)
    d = _unit_vectors(rng, n)
    caps = radius * d
    caps[:, 2] += np.where(d[:, 2] >= 0.0, height, -height)
    return np.where((part == 0)[:, None], side, caps), _ring_triple(rng, radius, radius)


def _torus(rng, n):
    major = rng.uniform(0.6, 1.0)
    minor = rng.uniform(0.15, 0.4)
    accepted = []
    count = 0
    while count < n:
        v = rng.uniform(0.0, 2.0 * math.pi, size=2 * n)
        keep = v[rng.uniform(size=2 * n) < (major + minor * np.cos(v)) / (major + minor)]
        accepted.append(keep)
        count += keep.size
    v = np.concatenate(accepted)[:n]
    u = rng.uniform(0.0, 2.0 * math.pi, size=n)
    ring = major + minor * np.cos(v)
    outer = major + minor
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1), _ring_triple(rng, outer, outer)


def _cone(rng, n):
    radius = rng.uniform(0.4, 1.0)
    height = rng.uniform(0.5, 1.5)
    slant = math.hypot(radius, height)
    part = _choose_parts(rng, n, [math.pi * radius * slant, math.pi * radius ** 2])
    angle = rng.uniform(0.0, 2.0 * math.pi, size=n)
    # lateral area grows linearly with the distance from the apex
    t = np.sqrt(rng.uniform(size=n))
    r = np.where(part == 0, t * radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(part == 0, height * (1.0 - t), 0.0)
    return np.stack([r * np.cos(angle), r * np.sin(angle), z], axis=1)


def _prism(rng, n):
    side = rng.uniform(0.5, 1.0)
    height = rng.uniform(0.3, 1.0)
    circumradius = side / math.sqrt(3.0)
    corners = np.array([[circumradius * math.cos(a), circumradius * math.sin(a)]
                        for a in (math.pi / 2.0, math.pi / 2.0 + 2.0 * math.pi / 3.0,
                                  math.pi / 2.0 + 4.0 * math.pi / 3.0)])
    triangle = math.sqrt(3.0) / 4.0 * side ** 2
    rectangle = side * 2.0 * height
    part = _choose_parts(rng, n, [triangle, triangle, rectangle, rectangle, rectangle])
    points = np.empty((n, 3))
    # uniform in the triangle by the square-root barycentric trick
    s = np.sqrt(rng.uniform(size=n))
    w = rng.uniform(size=n)
    cap_xy = (1.0 - s)[:, None] * corners[0] + (s * (1.0 - w))[:, None] * corners[1] + (s * w)[:, None] * corners[2]
    edge = np.clip(part - 2, 0, 2)
    f = rng.uniform(size=n)[:, None]
    side_xy = (1.0 - f) * corners[edge] + f * corners[(edge + 1) % 3]
    is_cap = (part < 2)[:, None]
    points[:, :2] = np.where(is_cap, cap_xy, side_xy)
    points[:, 2] = np.select([part == 0, part == 1], [np.full(n, height), np.full(n, -height)],
                             rng.uniform(-height, height, size=n))
    return points


# Centrally symmetric samplers return n surface points and three more that sum to zero.
SYMMETRIC_SAMPLERS = {
    'sphere': _sphere,
    'cuboid': _cuboid,
    'cylinder': _cylinder,
    'torus': _torus,
    'capsule': _capsule,
    'ellipsoid': _ellipsoid,
}

SAMPLERS = SYMMETRIC_SAMPLERS | {'cone': _cone, 'prism': _prism}


def generate_shape(class_label: str, n_points: int, seed: int | list[int]) -> PointCloud:
    """
    Sample a normalized surface cloud of a class.

    Centrally symmetric surfaces are sampled in antipodal pairs, plus a zero-sum triple of surface points when the
    count is odd, so their centroid is the origin up to rounding and normalization keeps their exact geometry (a
    sphere lands on radius 1).

    :param class_label: One of :data:`CLASSES`.
    :param n_points: Number of points, at least 16.
    :param seed: Seed of the dimensions and of the sampling.
    """
    if class_label not in SAMPLERS:
        raise ContractError(f"unknown shape class {class_label!r}, expected one of {', '.join(CLASSES)}")
    if n_points < MIN_SHAPE_POINTS:
        raise ContractError(f"a shape needs at least {MIN_SHAPE_POINTS} points, got {n_points}")
    rng = np.random.default_rng(seed)
    if class_label in SYMMETRIC_SAMPLERS:
        odd = n_points % 2
        half, triple = SYMMETRIC_SAMPLERS[class_label](rng, (n_points - 3 * odd) // 2)
        points = np.concatenate([half, -half, triple]) if odd else np.concatenate([half, -half])
    else:
        points = SAMPLERS[class_label](rng, n_points)
    cloud, _, _ = normalize(PointCloud(points))
    return cloud


def view_normal(seed: int | list[int]) -> np.ndarray:
    return _unit_vectors(np.random.default_rng(seed), 1)[0]


def make_pair(gt: PointCloud, view_seed: int | list[int], partial_points: int, keep_fraction_min: float = 0.25,
              keep_fraction_max: float = 0.75, class_label: str = '', sample_id: str = '') -> SamplePair:
    """
    Crop the complete cloud by a random half-space and subsample the kept side.

    :param gt: Normalized complete cloud.
    :param view_seed: Seed of the plane normal, of the kept fraction and of the subsampling.
    :param partial_points: Size of the partial cloud.
    """
    seed = list(view_seed) if isinstance(view_seed, list) else [view_seed]
    cropped = halfspace_crop(gt, view_normal(seed + [0]), keep_fraction_min, seed + [1], keep_fraction_max)
    if cropped.count < partial_points:
        raise ContractError(f"sample {sample_id}: the crop kept {cropped.count} points, "
                            f"fewer than the {partial_points} partial points asked")
    partial = random_subsample(cropped, partial_points, seed + [2])
    return SamplePair(partial, gt, class_label, sample_id)


@dataclass
class DatasetConfig:
    """
    Properties
    ----------

    out_dir: Dataset folder.
    classes: Number of classes, taken in the order of CLASSES.
    per_class: Training samples per class.
    val_per_class, test_per_class: Validation and test samples per class.
    gt_points, partial_points: Sizes of complete and partial clouds.
    train_views, test_views: Partial views per training sample and per validation/test sample.
    """

    out_dir: str = 'data'
    classes: int = 8
    per_class: int = 25
    val_per_class: int = 1
    test_per_class: int = 5
    gt_points: int = 512
    partial_points: int = 128
    train_views: int = 8
    test_views: int = 1
    keep_fraction_min: float = 0.25
    keep_fraction_max: float = 0.75
    seed: int = 0

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any], **overrides) -> 'DatasetConfig':
        default = cls()
        values = {name: type(getattr(default, name))(settings.get(name, getattr(default, name)))
                  for name in ('classes', 'per_class', 'val_per_class', 'test_per_class', 'gt_points',
                               'partial_points', 'train_views', 'test_views', 'keep_fraction_min',
                               'keep_fraction_max', 'seed')}
        values['out_dir'] = str(settings.get('data_dir', default.out_dir))
        values.update({k: v for k, v in overrides.items() if v is not None})
        config = cls(**values)
        config.validate()
        return config

    @property
    def class_labels(self) -> list[str]:
        return CLASSES[:self.classes]

    def validate(self) -> None:
        if not 1 <= self.classes <= len(CLASSES):
            raise ContractError(f"classes must be in [1, {len(CLASSES)}], got {self.classes}")
        if min(self.per_class, self.val_per_class, self.test_per_class) < 0:
            raise ContractError("sample counts per class must be >= 0")
        if self.gt_points < MIN_SHAPE_POINTS:
            raise ContractError(f"gt_points must be >= {MIN_SHAPE_POINTS}, got {self.gt_points}")
        if not 0.0 < self.keep_fraction_min <= self.keep_fraction_max <= 1.0:
            raise ContractError(f"keep fractions must satisfy 0 < min <= max <= 1, "
                                f"got {self.keep_fraction_min} and {self.keep_fraction_max}")
        if not 1 <= self.partial_points <= math.ceil(self.keep_fraction_min * self.gt_points):
            raise ContractError(f"partial_points must be in [1, {math.ceil(self.keep_fraction_min * self.gt_points)}] "
                                f"so that every crop can provide them, got {self.partial_points}")
        if self.train_views < 1 or self.test_views < 1:
            raise ContractError("view counts must be >= 1")

    def count(self, split: str) -> int:
        return {'train': self.per_class, 'val': self.val_per_class, 'test': self.test_per_class}[split]

    def views(self, split: str) -> int:
        return self.train_views if split == 'train' else self.test_views


@dataclass
class ManifestEntry:
    sample_id: str
    class_label: str
    split: str
    gt_path: str
    partial_paths: list[str]


@dataclass
class DatasetManifest:
    """
    Properties
    ----------

    root: Dataset folder; entry paths are relative to it.
    entries: One entry per complete cloud.
    seed: Generation seed, None if unknown.
    """

    root: str
    entries: list[ManifestEntry] = field(default_factory=list)
    seed: int | None = None

    @property
    def path(self) -> str:
        return os.path.join(self.root, MANIFEST)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def classes(self, split: str | None = None) -> list[str]:
        """Class labels in order of first appearance."""
        entries = self.entries if split is None else self.split(split)
        return list(dict.fromkeys(e.class_label for e in entries))


def write_manifest(manifest: DatasetManifest) -> None:
    frame = pd.DataFrame([[e.sample_id, e.class_label, e.split, e.gt_path, ';'.join(e.partial_paths)]
                          for e in manifest.entries], columns=MANIFEST_COLUMNS)
    create_parent(manifest.path)
    with open(manifest.path, 'w', encoding='utf-8', newline='') as f:
        if manifest.seed is not None:
            f.write(f"# seed={manifest.seed}\n")
        frame.to_csv(f, sep='\t', index=False, lineterminator='\n')


def build_dataset(config: DatasetConfig) -> DatasetManifest:
    """
    Generate every cloud of the dataset and its manifest.

    The same configuration always writes the same bytes: each sample draws from generators seeded by
    (seed, sample_id).
    """
    config.validate()
    manifest = DatasetManifest(config.out_dir, seed=config.seed)
    for split in SPLITS:
        for class_label in config.class_labels:
            for index in range(config.count(split)):
                sample_id = f"{split}-{class_label}-{index:04d}"
                gt = generate_shape(class_label, config.gt_points, derive_seed(config.seed, sample_id, 'shape'))
                gt_path = os.path.join('gt', f"{sample_id}.xyz")
                write_xyz(gt, os.path.join(config.out_dir, gt_path))
                partial_paths = []
                for view in range(config.views(split)):
                    pair = make_pair(gt, derive_seed(config.seed, sample_id, 'view', view), config.partial_points,
                                     config.keep_fraction_min, config.keep_fraction_max, class_label, sample_id)
                    partial_path = os.path.join('partial', f"{sample_id}_v{view}.xyz")
                    write_xyz(pair.partial, os.path.join(config.out_dir, partial_path))
                    partial_paths.append(partial_path)
                manifest.entries.append(ManifestEntry(sample_id, class_label, split, gt_path, partial_paths))
        logger.info(f"dataset_split split={split} samples={len(manifest.split(split))}")
    write_manifest(manifest)
    logger.info(f"dataset_written path={manifest.path} samples={len(manifest.entries)}")
    return manifest


def _read_seed(path: str) -> int | None:
    with open(path, encoding='utf-8') as f:
        first = f.readline().strip()
    if first.startswith('# seed='):
        return int(first.removeprefix('# seed='))
    return None


def load_manifest(root: str) -> DatasetManifest:
    """
    Read and check a dataset manifest.

    :raise ContractError: On unknown splits, duplicate sample ids or missing files (all named in the message).
    """
    path = os.path.join(root, MANIFEST)
    frame = pd.read_csv(path, sep='\t', comment='#', dtype=str, keep_default_na=False)
    if list(frame.columns) != MANIFEST_COLUMNS:
        raise ContractError(f"{path}: expected columns {MANIFEST_COLUMNS}, got {list(frame.columns)}")
    duplicates = sorted(frame.loc[frame['sample_id'].duplicated(), 'sample_id'])
    if duplicates:
        raise ContractError(f"{path}: duplicate sample ids {', '.join(duplicates)}")
    unknown = sorted(set(frame['split']) - set(SPLITS))
    if unknown:
        raise ContractError(f"{path}: unknown splits {', '.join(unknown)}")
    entries = [ManifestEntry(row["sample_id"], row["class"], row["split"], row["gt_path"],
                             [p for p in row["partial_paths"].split(";") if p])
               for _, row in frame.iterrows()]
    missing = [p for e in entries for p in [e.gt_path] + e.partial_paths if not os.path.isfile(os.path.join(root, p))]
    if missing:
        raise ContractError(f"{path}: missing files {', '.join(missing[:10])}"
                            + (f" and {len(missing) - 10} more" if len(missing) > 10 else ''))
    empty = [e.sample_id for e in entries if not e.partial_paths]
    if empty:
        raise ContractError(f"{path}: samples without partial clouds {', '.join(empty)}")
    return DatasetManifest(root, entries, _read_seed(path))


def iter_samples(manifest: DatasetManifest, split: str) -> Iterator[SamplePair]:
    """
    Pairs of a split, one per partial view, in manifest order.

    Multi-view samples get ids ``<sample_id>/<view>``.
    """
    for entry in manifest.split(split):
        gt = read_xyz(os.path.join(manifest.root, entry.gt_path))
        many = len(entry.partial_paths) > 1
        for view, partial_path in enumerate(entry.partial_paths):
            partial = read_xyz(os.path.join(manifest.root, partial_path))
            sample_id = f"{entry.sample_id}/{view}" if many else entry.sample_id
            yield SamplePair(partial, gt, entry.class_label, sample_id)


def subsample_seed(seed: int, sample_id: str, input_size: int) -> list[int]:
    """Seed of the evaluation subsampling of one test partial."""
    return derive_seed(seed, sample_id, 'eval', input_size)

