import itertools

import numpy as np
import pytest

from fewpoint.autodiff import Tensor
from fewpoint.errors import ContractError, DegenerateInputError
from fewpoint.metrics import (EXACT_EMD_LIMIT, ball_query, chamfer, chamfer_loss, emd, emd_auction, emd_exact,
                              emd_loss, knn, reduction_rate)
from fewpoint.pointcloud import PointCloud
from tests.helpers import check_function_gradient, random_cloud


class TestChamfer:

    def test_identical(self):
        points = random_cloud(np.random.default_rng(0), 30)
        assert chamfer(points, points) == 0.0

    def test_two_points(self):
        assert chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == 2.0

    def test_squared(self):
        assert chamfer(np.array([[0.0, 0, 0]]), np.array([[2.0, 0, 0]]), squared=True) == 8.0

    def test_sizes_may_differ(self):
        s1 = np.array([[0.0, 0, 0]])
        s2 = np.array([[1.0, 0, 0], [3.0, 0, 0]])
        # 1 + (1 + 3) / 2
        assert chamfer(s1, s2) == pytest.approx(3.0)

    def test_symmetric_and_order_insensitive(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            s1, s2 = random_cloud(rng, 20), random_cloud(rng, 13)
            assert chamfer(s1, s2) == pytest.approx(chamfer(s2, s1), rel=1e-12)
            assert chamfer(s1, s2) == pytest.approx(chamfer(rng.permutation(s1), s2), rel=1e-12)

    def test_shared_translation_keeps_the_distance(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            s1, s2 = random_cloud(rng, 9), random_cloud(rng, 14)
            shift = rng.uniform(-10.0, 10.0, size=3)
            assert chamfer(s1 + shift, s2 + shift) == pytest.approx(chamfer(s1, s2), abs=1e-9)

    def test_accepts_point_clouds(self):
        points = random_cloud(np.random.default_rng(2), 5)
        assert chamfer(PointCloud(points), points + 1.0) == pytest.approx(chamfer(points, points + 1.0))

    def test_empty(self):
        with pytest.raises(DegenerateInputError):
            chamfer(np.zeros((0, 3)), np.zeros((1, 3)))

    def test_loss_value_matches(self):
        rng = np.random.default_rng(3)
        s1, s2 = random_cloud(rng, 12), random_cloud(rng, 9)
        assert chamfer_loss(Tensor(s1), Tensor(s2)).item() == pytest.approx(chamfer(s1, s2), rel=1e-12)
        assert chamfer_loss(Tensor(s1), Tensor(s2), squared=True).item() == pytest.approx(
            chamfer(s1, s2, squared=True), rel=1e-12)

    def test_loss_gradient(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            target = Tensor(random_cloud(rng, 7))
            check_function_gradient(lambda x: chamfer_loss(x, target), random_cloud(rng, 5), rtol=1e-5, atol=1e-7)


class TestEmd:

    def test_permuted_copy(self):
        rng = np.random.default_rng(5)
        points = random_cloud(rng, 10)
        order = rng.permutation(10)
        result = emd_exact(points, points[order])
        assert result.cost == 0.0
        np.testing.assert_array_equal(order[result.permutation], np.arange(10))

    def test_translation(self):
        points = random_cloud(np.random.default_rng(6), 8)
        # a pure translation is matched to itself: the sum of distances is at least n |t|
        shift = np.array([0.006, 0.0, 0.008])
        assert emd_exact(points, points + shift).cost == pytest.approx(0.01)

    def test_shared_translation_keeps_the_distance(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            s1, s2 = random_cloud(rng, 12), random_cloud(rng, 12)
            shift = rng.uniform(-10.0, 10.0, size=3)
            assert emd_exact(s1 + shift, s2 + shift).cost == pytest.approx(emd_exact(s1, s2).cost, abs=1e-9)
            large = random_cloud(rng, 20)
            assert emd(s1 + shift, large + shift) == pytest.approx(emd(s1, large), abs=1e-9)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            n = int(rng.integers(1, 7))
            s1, s2 = random_cloud(rng, n), random_cloud(rng, n)
            distances = np.linalg.norm(s1[:, None, :] - s2[None, :, :], axis=2)
            best = min(distances[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))
            assert emd_exact(s1, s2).cost == pytest.approx(best, abs=1e-12)

    def test_size_mismatch(self):
        with pytest.raises(ContractError):
            emd_exact(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_exact_limit(self):
        points = random_cloud(np.random.default_rng(7), 3)
        with pytest.raises(ContractError):
            emd_exact(points, points, limit=2)
        assert EXACT_EMD_LIMIT == 256

    def test_bounds_chamfer(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            s1, s2 = random_cloud(rng, 16), random_cloud(rng, 16)
            assert chamfer(s1, s2) <= 2.0 * emd_exact(s1, s2).cost + 1e-12

    def test_auction_close_to_exact(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            s1, s2 = random_cloud(rng, 32), random_cloud(rng, 32)
            exact = emd_exact(s1, s2).cost
            approximate = emd_auction(s1, s2, 0.01).cost
            assert exact - 1e-12 <= approximate <= 1.01 * exact + 1e-12

    def test_unequal_sizes_use_farthest_points(self):
        rng = np.random.default_rng(10)
        small, large = random_cloud(rng, 8), random_cloud(rng, 20)
        assert emd(small, large) == pytest.approx(emd(large, small))

    def test_loss_value(self):
        rng = np.random.default_rng(11)
        s1, s2 = random_cloud(rng, 12), random_cloud(rng, 12)
        assert emd_loss(Tensor(s1), Tensor(s2)).item() == pytest.approx(emd_auction(s1, s2).cost, rel=1e-12)


class TestNeighborhoods:

    def test_knn_nearest_first(self):
        cloud = np.array([[3.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [0.5, 0, 0]])
        np.testing.assert_array_equal(knn(np.zeros((1, 3)), cloud, 3), [[3, 1, 2]])

    def test_knn_ties(self):
        cloud = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        np.testing.assert_array_equal(knn(np.zeros((1, 3)), cloud, 1), [[0]])

    def test_knn_bad_k(self):
        with pytest.raises(ContractError):
            knn(np.zeros((1, 3)), np.zeros((2, 3)), 3)

    def test_ball_query_pads_with_nearest(self):
        cloud = np.array([[0.1, 0, 0], [0.2, 0, 0], [5.0, 0, 0]])
        np.testing.assert_array_equal(ball_query(np.zeros((1, 3)), cloud, 4, 0.5), [[0, 1, 0, 0]])

    def test_ball_query_empty_ball(self):
        cloud = np.array([[5.0, 0, 0], [4.0, 0, 0]])
        np.testing.assert_array_equal(ball_query(np.zeros((1, 3)), cloud, 3, 0.5), [[1, 1, 1]])

    def test_ball_query_bad_arguments(self):
        with pytest.raises(ContractError):
            ball_query(np.zeros((1, 3)), np.zeros((2, 3)), 0, 0.5)
        with pytest.raises(ContractError):
            ball_query(np.zeros((1, 3)), np.zeros((2, 3)), 2, 0.0)


class TestReductionRate:

    def test_values(self):
        assert reduction_rate(2.0, 1.0) == 0.5
        assert reduction_rate(1.0, 1.5) == -0.5

    def test_zero_baseline(self):
        with pytest.raises(ContractError):
            reduction_rate(0.0, 1.0)
