# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
"""
The completion network: ensemble encoder, optional feature GAN and coarse-to-fine decoder.

Three flags switch the modules of the ablation study. With all three off the network is a PCN-style
encoder-decoder: a single PointNet branch, no local features, no GAN.
"""

from dataclasses import dataclass

import numpy as np

from fewpoint.autodiff import Tensor, no_grad
from fewpoint.decoder import Decoder, DecoderConfig
from fewpoint.encoder import MGFV, Encoder, EncoderConfig
from fewpoint.errors import ContractError
from fewpoint.gan import Discriminator, GanConfig, Generator
from fewpoint.layers import Module
from fewpoint.pointcloud import PointCloud
from fewpoint.tool import rng_for


@dataclass(frozen=True)
class Variant:
    """Ablation switches."""

    use_transformer_branch: bool = True
    use_pointnetpp_local: bool = True
    use_wgan: bool = True

    @property
    def name(self) -> str:
        flags = (self.use_transformer_branch, self.use_pointnetpp_local, self.use_wgan)
        match flags:
            case (False, False, False):
                return 'pcn'
            case (True, True, True):
                return 'full'
        parts = [label for label, on in zip(('transformer', 'pointnetpp', 'wgan'), flags) if on]
        return 'pcn+' + '+'.join(parts)

    @classmethod
    def of_parameters(cls, names) -> 'Variant':
        """The variant whose network has these parameter names."""
        names = list(names)
        return cls(use_transformer_branch=any(n.startswith('encoder.t_branch.') for n in names),
                   use_pointnetpp_local=any(n.startswith('decoder.group_mlp.') for n in names),
                   use_wgan=any(n.startswith('generator.') for n in names))


BASELINE = Variant(False, False, False)

ABLATION_VARIANTS = [
    BASELINE,
    Variant(False, True, False),
    Variant(True, False, False),
    Variant(False, False, True),
    Variant(True, True, True),
]


class CompletionNetwork(Module):
    """
    :param encoder_config: Encoder dimensions.
    :param decoder_config: Decoder dimensions.
    :param gan_config: Feature GAN settings, used when the variant has the GAN.
    :param variant: Ablation switches.
    :param seed: Seed of the weight initialization.
    """

    def __init__(self, encoder_config: EncoderConfig, decoder_config: DecoderConfig, gan_config: GanConfig,
                 variant: Variant = Variant(), seed: int = 0, dtype=np.float64):
        super().__init__()
        self.variant = variant
        self.dtype = dtype
        mgfv_dim = encoder_config.mgfv_dim
        self.encoder = Encoder(encoder_config, rng_for(seed, 'encoder'), variant.use_transformer_branch, dtype)
        self.decoder = Decoder(decoder_config, mgfv_dim, rng_for(seed, 'decoder'),
                               variant.use_pointnetpp_local, dtype)
        if variant.use_wgan:
            self.generator = Generator(mgfv_dim, rng_for(seed, 'generator'), gan_config.leaky_slope, dtype)
            self.discriminator = Discriminator(gan_config, mgfv_dim, rng_for(seed, 'discriminator'), dtype)

    @classmethod
    def from_settings(cls, settings, variant: Variant, seed: int, dtype=np.float32) -> 'CompletionNetwork':
        """Network with the dimensions read from flat settings."""
        return cls(EncoderConfig.from_settings(settings), DecoderConfig.from_settings(settings),
                   GanConfig.from_settings(settings), variant, seed, dtype)

    def sections(self) -> dict[str, Module]:
        """Top-level modules by checkpoint prefix."""
        return {name: child for name, child in self._children.items() if isinstance(child, Module)}

    def features(self, cloud, through_generator: bool = False) -> MGFV:
        mgfv = self.encoder.encode(cloud)
        if through_generator:
            if not self.variant.use_wgan:
                raise ContractError("this network has no generator")
            mgfv = self.generator.generate(mgfv)
        return mgfv

    def forward(self, cloud, through_generator: bool = False) -> tuple[Tensor, Tensor]:
        """Coarse and detail tensors for one partial cloud."""
        return self.decoder.decode(self.features(cloud, through_generator))

    def complete(self, cloud: PointCloud, through_generator: bool = False) -> tuple[PointCloud, PointCloud]:
        with no_grad():
            coarse, detail = self.forward(cloud, through_generator)
        return (PointCloud(coarse.data.astype(np.float64)), PointCloud(detail.data.astype(np.float64)))
