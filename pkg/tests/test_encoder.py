import numpy as np
import pytest

from fewpoint.autodiff import Tensor, backward
from fewpoint.encoder import Encoder, EncoderConfig
from fewpoint.errors import ContractError, DimensionError
from fewpoint.metrics import chamfer_loss
from tests.helpers import check_parameter_gradients, nonzero_fraction, random_cloud, tiny_encoder_config


@pytest.fixture
def encoder():
    return Encoder(tiny_encoder_config(), np.random.default_rng(0))


class TestConfig:

    def test_default_branch_width(self):
        assert EncoderConfig().pooled_width == 256 + 512 + 1024

    def test_settings_pool_the_last_three_layers(self):
        config = EncoderConfig.from_settings({'per_point_dims': [4, 8, 16, 32], 'mgfv_dim': 8})
        assert config.pooled_levels == [1, 2, 3]

    def test_rejects_several_heads(self):
        with pytest.raises(ContractError):
            EncoderConfig(attention_heads=4).validate()

    def test_rejects_unknown_levels(self):
        with pytest.raises(ContractError):
            EncoderConfig(per_point_dims=[4, 8], pooled_levels=[2]).validate()


class TestBranches:

    @pytest.mark.parametrize('n', [16, 2048])
    def test_default_branch_outputs(self, n):
        encoder = Encoder(EncoderConfig(), np.random.default_rng(0), dtype=np.float32)
        cloud = random_cloud(np.random.default_rng(n), n)
        assert encoder.pn_cmlp(cloud).shape == (1792,)
        assert encoder.t_cmlp(cloud).shape == (1792,)

    def test_shapes(self, encoder):
        cloud = random_cloud(np.random.default_rng(1), 10)
        assert encoder.pn_cmlp(cloud).shape == (8 + 12 + 16,)
        assert encoder.t_cmlp(cloud).shape == (8 + 12 + 16,)
        assert encoder.encode(cloud).shape == (8,)

    def test_single_point(self, encoder):
        assert encoder.encode(np.array([[0.1, 0.2, 0.3]])).shape == (8,)

    @pytest.mark.parametrize('n', [16, 128, 512])
    def test_permutation_invariance(self, encoder, n):
        rng = np.random.default_rng(n)
        cloud = random_cloud(rng, n)
        for _ in range(50):
            shuffled = rng.permutation(cloud)
            np.testing.assert_allclose(encoder.encode(shuffled).data, encoder.encode(cloud).data, atol=1e-10)

    def test_duplicated_points_leave_the_pooled_branch_unchanged(self, encoder):
        cloud = random_cloud(np.random.default_rng(5), 24)
        doubled = np.concatenate([cloud, cloud])
        np.testing.assert_allclose(encoder.pn_cmlp(doubled).data, encoder.pn_cmlp(cloud).data, atol=1e-12)

    def test_attention_rows_sum_to_one(self, encoder):
        branch = encoder.t_branch
        weights = branch.attention.weights(branch.attention_input(Tensor(random_cloud(np.random.default_rng(2), 6))))
        np.testing.assert_allclose(weights.data.sum(axis=1), np.ones(6))

    def test_empty_cloud(self, encoder):
        with pytest.raises(ContractError):
            encoder.encode(np.zeros((0, 3)))

    def test_fuse_rejects_wrong_width(self, encoder):
        with pytest.raises(DimensionError):
            encoder.fuse(Tensor(np.zeros(36)), Tensor(np.zeros(10)))

    def test_fuse_of_zeros_is_zero(self, encoder):
        # the fusion bias starts at zero
        mgfv = encoder.fuse(Tensor(np.zeros(36)), Tensor(np.zeros(36))).data
        np.testing.assert_array_equal(mgfv, np.zeros(8))


class TestWithoutTransformer:

    @pytest.fixture
    def encoder(self):
        return Encoder(tiny_encoder_config(), np.random.default_rng(0), use_transformer_branch=False)

    def test_has_no_attention_parameters(self, encoder):
        names = [name for name, _ in encoder.named_parameters()]
        assert not any(name.startswith('t_branch.') for name in names)
        assert encoder.fusion.in_features == 36

    def test_encode(self, encoder):
        assert encoder.encode(random_cloud(np.random.default_rng(3), 7)).shape == (8,)

    def test_transformer_branch_refused(self, encoder):
        with pytest.raises(ContractError):
            encoder.t_cmlp(random_cloud(np.random.default_rng(3), 7))


def test_parameter_gradients(encoder):
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, 6)
    target = Tensor(rng.normal(size=(4, 3)))
    projection = Tensor(rng.normal(size=(8, 12)))

    def loss():
        mgfv = encoder.encode(cloud)
        return chamfer_loss((mgfv.reshape(1, 8) @ projection).reshape(4, 3), target)

    check_parameter_gradients(loss, encoder)


def test_every_branch_receives_gradient(encoder):
    rng = np.random.default_rng(6)
    projection = Tensor(rng.normal(size=(8, 12)))
    mgfv = encoder.encode(random_cloud(rng, 32))
    backward(chamfer_loss((mgfv.reshape(1, 8) @ projection).reshape(4, 3), Tensor(rng.normal(size=(4, 3)))))
    assert nonzero_fraction(encoder) >= 0.99
    assert nonzero_fraction(encoder, ['t_branch']) >= 0.99
