import os

import numpy as np
import pytest

from fewpoint.dataset import (CLASSES, MANIFEST, DatasetConfig, DatasetManifest, ManifestEntry, build_dataset,
                              generate_shape, iter_samples, load_manifest, make_pair, subsample_seed, write_manifest)
from fewpoint.errors import ContractError


def small_config(out_dir, **overrides) -> DatasetConfig:
    values = dict(out_dir=str(out_dir), classes=2, per_class=2, val_per_class=1, test_per_class=1, gt_points=64,
                  partial_points=16, train_views=2, test_views=1, seed=3)
    values.update(overrides)
    return DatasetConfig(**values)


def folder_bytes(root) -> dict[str, bytes]:
    files = {}
    for folder, _, names in os.walk(root):
        for name in names:
            path = os.path.join(folder, name)
            with open(path, 'rb') as f:
                files[os.path.relpath(path, root)] = f.read()
    return files


class TestShapes:

    @pytest.mark.parametrize('n', [17, 200, 201])
    @pytest.mark.parametrize('class_label', CLASSES)
    def test_normalized(self, class_label, n):
        cloud = generate_shape(class_label, n, 7)
        assert cloud.count == n
        np.testing.assert_allclose(cloud.points.mean(axis=0), np.zeros(3), atol=1e-9)
        assert np.linalg.norm(cloud.points, axis=1).max() == pytest.approx(1.0)

    @pytest.mark.parametrize('class_label', CLASSES)
    def test_deterministic(self, class_label):
        np.testing.assert_array_equal(generate_shape(class_label, 50, [1, 2]).points,
                                      generate_shape(class_label, 50, [1, 2]).points)

    @pytest.mark.parametrize('n', [16, 17, 511, 512])
    def test_sphere_has_unit_radius(self, n):
        cloud = generate_shape('sphere', n, 0)
        np.testing.assert_allclose(np.linalg.norm(cloud.points, axis=1), np.ones(n), atol=1e-9)

    @pytest.mark.parametrize('n', [300, 301])
    def test_cuboid_points_lie_on_faces(self, n):
        points = generate_shape('cuboid', n, 1).points
        extent = np.abs(points).max(axis=0)
        on_face = np.isclose(np.abs(points), extent, atol=1e-9).any(axis=1)
        assert on_face.all()

    def test_shapes_differ_between_seeds(self):
        assert not np.array_equal(generate_shape('torus', 64, 1).points, generate_shape('torus', 64, 2).points)

    def test_unknown_class(self):
        with pytest.raises(ContractError, match='teapot'):
            generate_shape('teapot', 64, 0)

    def test_too_few_points(self):
        with pytest.raises(ContractError):
            generate_shape('sphere', 15, 0)


class TestPairs:

    def test_partial_comes_from_the_complete_cloud(self):
        gt = generate_shape('cylinder', 256, 4)
        pair = make_pair(gt, [4, 0], 32, class_label='cylinder', sample_id='s')
        assert pair.partial.count == 32
        assert pair.partial.is_submultiset_of(gt)
        assert (pair.class_label, pair.sample_id) == ('cylinder', 's')

    def test_views_differ(self):
        gt = generate_shape('capsule', 256, 5)
        assert not make_pair(gt, [5, 0], 32).partial.multiset_equal(make_pair(gt, [5, 1], 32).partial)

    def test_crop_too_small(self):
        gt = generate_shape('sphere', 64, 6)
        with pytest.raises(ContractError):
            make_pair(gt, 0, 60)


class TestConfig:

    def test_partial_must_fit_the_smallest_crop(self, tmp_path):
        with pytest.raises(ContractError):
            small_config(tmp_path, partial_points=17).validate()
        small_config(tmp_path, partial_points=16).validate()

    def test_too_many_classes(self, tmp_path):
        with pytest.raises(ContractError):
            small_config(tmp_path, classes=9).validate()

    def test_from_settings(self, tmp_path):
        config = DatasetConfig.from_settings({'data_dir': 'somewhere', 'classes': 3, 'per_class': '4'},
                                             out_dir=str(tmp_path))
        assert (config.out_dir, config.classes, config.per_class) == (str(tmp_path), 3, 4)
        assert config.class_labels == CLASSES[:3]


class TestBuild:

    @pytest.fixture
    def manifest(self, tmp_path):
        return build_dataset(small_config(tmp_path / 'data'))

    def test_layout(self, manifest):
        assert len(manifest.entries) == 2 * (2 + 1 + 1)
        assert [e.sample_id for e in manifest.split('val')] == ['val-sphere-0000', 'val-cuboid-0000']
        first = manifest.split('train')[0]
        assert first.gt_path == os.path.join('gt', 'train-sphere-0000.xyz')
        assert first.partial_paths == [os.path.join('partial', 'train-sphere-0000_v0.xyz'),
                                       os.path.join('partial', 'train-sphere-0000_v1.xyz')]
        with open(manifest.path, encoding='utf-8') as f:
            assert f.readline() == '# seed=3\n'
            assert f.readline() == 'sample_id\tclass\tsplit\tgt_path\tpartial_paths\n'

    def test_same_config_same_bytes(self, tmp_path):
        build_dataset(small_config(tmp_path / 'first'))
        build_dataset(small_config(tmp_path / 'second'))
        first, second = folder_bytes(tmp_path / 'first'), folder_bytes(tmp_path / 'second')
        assert first.keys() == second.keys()
        assert first == second

    def test_load(self, manifest):
        loaded = load_manifest(manifest.root)
        assert loaded.seed == 3
        assert [e.sample_id for e in loaded.entries] == [e.sample_id for e in manifest.entries]
        assert loaded.classes('test') == ['sphere', 'cuboid']

    def test_iter_samples(self, manifest):
        train = list(iter_samples(manifest, 'train'))
        assert len(train) == 8
        assert train[0].sample_id == 'train-sphere-0000/0'
        assert train[1].sample_id == 'train-sphere-0000/1'
        assert (train[0].partial.count, train[0].gt.count) == (16, 64)
        assert train[0].partial.is_submultiset_of(train[0].gt, tol=1e-9)
        test = list(iter_samples(manifest, 'test'))
        assert [s.sample_id for s in test] == ['test-sphere-0000', 'test-cuboid-0000']

    def test_missing_file(self, manifest):
        os.remove(os.path.join(manifest.root, manifest.entries[0].gt_path))
        with pytest.raises(ContractError, match='train-sphere-0000.xyz'):
            load_manifest(manifest.root)

    def test_duplicate_ids(self, manifest):
        manifest.entries.append(manifest.entries[0])
        write_manifest(manifest)
        with pytest.raises(ContractError, match='duplicate'):
            load_manifest(manifest.root)

    def test_unknown_split(self, manifest):
        entry = manifest.entries[0]
        manifest.entries.append(ManifestEntry('x', entry.class_label, 'holdout', entry.gt_path, entry.partial_paths))
        write_manifest(manifest)
        with pytest.raises(ContractError, match='holdout'):
            load_manifest(manifest.root)


def test_manifest_without_seed(tmp_path):
    os.makedirs(tmp_path / 'gt')
    (tmp_path / 'gt' / 'a.xyz').write_text("0 0 0\n")
    write_manifest(DatasetManifest(str(tmp_path), [ManifestEntry('a', 'sphere', 'test', 'gt/a.xyz', ['gt/a.xyz'])]))
    assert os.path.exists(tmp_path / MANIFEST)
    assert load_manifest(str(tmp_path)).seed is None


def test_subsample_seed():
    assert subsample_seed(0, 'test-sphere-0000', 16) == subsample_seed(0, 'test-sphere-0000', 16)
    assert subsample_seed(0, 'test-sphere-0000', 16) != subsample_seed(0, 'test-sphere-0000', 128)
