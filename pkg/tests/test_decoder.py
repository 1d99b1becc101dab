import numpy as np
import pytest

from fewpoint.autodiff import Tensor, backward
from fewpoint.decoder import Decoder, DecoderConfig, folding_grid
from fewpoint.errors import ContractError
from fewpoint.metrics import chamfer_loss, knn
from fewpoint.trainer import completion_loss
from tests.helpers import check_parameter_gradients, nonzero_fraction, tiny_decoder_config

MGFV_DIM = 8


@pytest.fixture
def decoder():
    return Decoder(tiny_decoder_config(), MGFV_DIM, np.random.default_rng(0))


@pytest.fixture
def mgfv():
    return Tensor(np.random.default_rng(1).normal(size=MGFV_DIM))


class TestConfig:

    def test_default_centroids(self):
        assert DecoderConfig(coarse_n=64).sa_centroids == 32
        assert DecoderConfig(coarse_n=1).sa_centroids == 1

    def test_detail_size(self):
        assert DecoderConfig(coarse_n=64, grid_side=4).detail_n == 1024

    def test_settings(self):
        config = DecoderConfig.from_settings({'coarse_n': 16, 'grid_side': 3})
        assert (config.coarse_n, config.sa_centroids, config.detail_n) == (16, 8, 144)

    def test_rejects_too_many_centroids(self):
        with pytest.raises(ContractError):
            DecoderConfig(coarse_n=4, sa_centroids=5).validate()

    def test_rejects_bad_radius(self):
        with pytest.raises(ContractError):
            DecoderConfig(sa_radius=0.0).validate()


def test_folding_grid():
    np.testing.assert_allclose(folding_grid(2, 0.05), [[-0.05, -0.05], [-0.05, 0.05], [0.05, -0.05], [0.05, 0.05]])
    np.testing.assert_array_equal(folding_grid(1, 0.05), [[0.0, 0.0]])
    assert folding_grid(4, 0.05).shape == (16, 2)


class TestDecode:

    def test_shapes(self, decoder, mgfv):
        coarse, detail = decoder.decode(mgfv)
        assert coarse.shape == (8, 3)
        assert detail.shape == (32, 3)

    def test_deterministic(self, decoder, mgfv):
        first = decoder.decode(mgfv)[1].data
        np.testing.assert_array_equal(decoder.decode(mgfv)[1].data, first)

    def test_non_finite_feature(self, decoder):
        with pytest.raises(ContractError):
            decoder.decode(Tensor(np.full(MGFV_DIM, np.nan)))

    def test_group_offsets_start_at_the_centroid(self, decoder, mgfv):
        coarse = decoder.coarse_generate(mgfv)
        offsets, groups, centroids = decoder.group_offsets(coarse)
        assert groups.shape == (4, 3)
        assert offsets.shape == (12, 3)
        assert len(set(centroids.tolist())) == 4
        np.testing.assert_array_equal(offsets.data.reshape(4, 3, 3)[:, 0], np.zeros((4, 3)))

    def test_local_features_follow_nearest_centroid(self, decoder, mgfv):
        coarse = decoder.coarse_generate(mgfv)
        local = decoder.local_features(coarse).data
        assert local.shape == (8, 4)
        _, _, centroids = decoder.group_offsets(coarse)
        nearest = knn(coarse.data, coarse.data[centroids], 1)[:, 0]
        for i in range(8):
            np.testing.assert_array_equal(local[i], local[centroids[nearest[i]]])

    def test_detail_points_fold_around_their_anchor(self, mgfv):
        decoder = Decoder(tiny_decoder_config(grid_side=3), MGFV_DIM, np.random.default_rng(2))
        decoder.folding.layers[-1].weight.data[:] = 0.0
        coarse, detail = decoder.decode(mgfv)
        np.testing.assert_array_equal(detail.data, np.repeat(coarse.data, 9, axis=0))


class TestWithoutLocalFeatures:

    @pytest.fixture
    def decoder(self):
        return Decoder(tiny_decoder_config(), MGFV_DIM, np.random.default_rng(0), use_pointnetpp_local=False)

    def test_folding_input_width(self, decoder):
        assert decoder.folding.layers[0].in_features == 2 + 3 + MGFV_DIM
        assert not any(name.startswith('group_mlp.') for name, _ in decoder.named_parameters())

    def test_shapes(self, decoder, mgfv):
        coarse, detail = decoder.decode(mgfv)
        assert (coarse.shape, detail.shape) == ((8, 3), (32, 3))


@pytest.mark.parametrize('use_local', [True, False])
def test_parameter_gradients(use_local):
    rng = np.random.default_rng(3)
    decoder = Decoder(tiny_decoder_config(), MGFV_DIM, rng, use_pointnetpp_local=use_local)
    mgfv = Tensor(rng.normal(size=MGFV_DIM))
    target = Tensor(rng.normal(size=(20, 3)))

    def loss():
        coarse, detail = decoder.decode(mgfv)
        return chamfer_loss(coarse, target) + chamfer_loss(detail, target)

    check_parameter_gradients(loss, decoder)


def test_combined_loss_reaches_every_parameter(decoder, mgfv):
    coarse, detail = decoder.decode(mgfv)
    backward(completion_loss(coarse, detail, np.random.default_rng(4).normal(size=(20, 3)), 0.5))
    assert nonzero_fraction(decoder) >= 0.99
