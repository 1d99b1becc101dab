# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
"""
Three-stage training.

1. The encoder and the decoder are trained end-to-end on the completion loss.
2. With the encoder frozen, the feature GAN learns to map features of partial clouds to features of complete clouds.
3. Encoder, generator and decoder are fine-tuned end-to-end, the decoder reading G(encode(partial)).

Each epoch shuffles with a generator derived from (seed, stage, epoch), so a run resumed from a checkpoint
continues exactly like an uninterrupted one.
"""

import logging
import math
import os
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from fewpoint.autodiff import Tensor, backward, l1_norm, no_grad, take
from fewpoint.checkpoint import Checkpoint, save_checkpoint
from fewpoint.errors import ContractError, ConvergenceError, StageOrderError
from fewpoint.gan import GanConfig, critic_terms, generator_terms
from fewpoint.layers import Module, as_tensor, parameter_hash
from fewpoint.metrics import chamfer_loss, emd_loss
from fewpoint.network import CompletionNetwork, Variant
from fewpoint.pointcloud import PointCloud, SamplePair, farthest_point_sample
from fewpoint.tool import create_parent, rng_for

logger = logging.getLogger(__name__)

STAGES = (1, 2, 3)
DISTANCES = ('cd', 'emd')


@dataclass
class TrainConfig:
    """
    Training settings.

    Properties
    ----------

    lr: Initial learning rate.
    epochs: Default epoch count of every stage.
    epochs_stage1, epochs_stage2, epochs_stage3: Per-stage overrides of epochs.
    batch_size: Samples per optimizer step.
    lr_decay: Factor applied every lr_decay_every epochs.
    d1_kind, d2_kind: Distance of the coarse and of the detail term, 'cd' or 'emd'.
    emd_epsilon: Auction tolerance of the EMD loss.
    seed: Seed of the shuffling and of the interpolation draws.
    variant: Ablation switches.
    stage3_feature_l1: Add beta * |G(x) - y|_1 to the stage 3 loss.
    stage3_train_discriminator: Keep updating the critic during stage 3.
    """

    lr: float = 1e-4
    epochs: int = 250
    epochs_stage1: int | None = None
    epochs_stage2: int | None = None
    epochs_stage3: int | None = None
    batch_size: int = 32
    lr_decay: float = 0.7
    lr_decay_every: int = 20
    d1_kind: str = 'cd'
    d2_kind: str = 'cd'
    emd_epsilon: float = 0.01
    seed: int = 0
    variant: Variant = field(default_factory=Variant)
    stage3_feature_l1: bool = True
    stage3_train_discriminator: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any]) -> 'TrainConfig':
        default = cls()

        def optional_int(key):
            value = settings.get(key)
            return None if value is None else int(value)

        config = cls(lr=float(settings.get('lr', default.lr)),
                     epochs=int(settings.get('epochs', default.epochs)),
                     epochs_stage1=optional_int('epochs_stage1'),
                     epochs_stage2=optional_int('epochs_stage2'),
                     epochs_stage3=optional_int('epochs_stage3'),
                     batch_size=int(settings.get('batch_size', default.batch_size)),
                     lr_decay=float(settings.get('lr_decay', default.lr_decay)),
                     lr_decay_every=int(settings.get('lr_decay_every', default.lr_decay_every)),
                     d1_kind=str(settings.get('d1_kind', default.d1_kind)).lower(),
                     d2_kind=str(settings.get('d2_kind', default.d2_kind)).lower(),
                     emd_epsilon=float(settings.get('emd_epsilon', default.emd_epsilon)),
                     seed=int(settings.get('seed', default.seed)),
                     variant=Variant(bool(settings.get('use_transformer_branch', True)),
                                     bool(settings.get('use_pointnetpp_local', True)),
                                     bool(settings.get('use_wgan', True))),
                     stage3_feature_l1=bool(settings.get('stage3_feature_l1', default.stage3_feature_l1)),
                     stage3_train_discriminator=bool(settings.get('stage3_train_discriminator',
                                                                  default.stage3_train_discriminator)))
        config.validate()
        return config

    def validate(self) -> None:
        if self.lr <= 0:
            raise ContractError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if any(e < 0 for e in (self.epochs_for(stage) for stage in STAGES)):
            raise ContractError("epoch counts must be >= 0")
        if self.lr_decay_every < 1:
            raise ContractError(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")
        if self.d1_kind not in DISTANCES or self.d2_kind not in DISTANCES:
            raise ContractError(f"d1_kind and d2_kind must be one of {DISTANCES}, "
                                f"got {self.d1_kind} and {self.d2_kind}")
        if self.seed < 0:
            raise ContractError(f"seed must be >= 0, got {self.seed}")

    def epochs_for(self, stage: int) -> int:
        override = {1: self.epochs_stage1, 2: self.epochs_stage2, 3: self.epochs_stage3}[stage]
        return self.epochs if override is None else override


def lr_schedule(epoch: int, lr: float = 1e-4, decay: float = 0.7, every: int = 20) -> float:
    """lr * decay ** floor(epoch / every)."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return lr * decay ** (epoch // every)


def detail_weight(step: int, total_steps: int) -> float:
    """Weight of the detail term: 0.01, then 0.1 after 1/8 of the steps, 0.5 after 1/4 and 1.0 after half."""
    if total_steps <= 0:
        return 1.0
    progress = step / total_steps
    if progress < 0.125:
        return 0.01
    if progress < 0.25:
        return 0.1
    if progress < 0.5:
        return 0.5
    return 1.0


def point_distance(kind: str, a: Tensor, b: Tensor, epsilon: float = 0.01) -> Tensor:
    match kind:
        case 'cd':
            return chamfer_loss(a, b)
        case 'emd':
            return emd_loss(a, b, epsilon)
        case _:
            raise ContractError(f"unknown distance {kind!r}, expected one of {DISTANCES}")


def completion_loss(coarse: Tensor, detail: Tensor, gt: PointCloud | np.ndarray | Tensor, alpha: float,
                    d1_kind: str = 'cd', d2_kind: str = 'cd', epsilon: float = 0.01) -> Tensor:
    """
    d1(coarse, subsampled gt) + alpha d2(detail, gt).

    The subsampled ground truth holds as many points as the coarse cloud, picked by farthest point sampling.
    """
    target = as_tensor(gt, coarse.dtype)
    subsampled = take(target, farthest_point_sample(target.data, coarse.shape[0]))
    loss = point_distance(d1_kind, coarse, subsampled, epsilon)
    if alpha == 0:
        return loss
    return loss + alpha * point_distance(d2_kind, detail, target, epsilon)


@dataclass
class AdamState:
    """Moments and step count of one Adam optimizer."""

    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)

    def to_tensors(self, group: str) -> dict[str, np.ndarray]:
        tensors = {f"{group}.step": np.array(self.step, dtype=np.float32)}
        tensors.update({f"{group}.m.{name}": value for name, value in self.first.items()})
        tensors.update({f"{group}.v.{name}": value for name, value in self.second.items()})
        return tensors

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], group: str, dtype=np.float32) -> 'AdamState':
        if f"{group}.step" not in tensors:
            return cls()

        def moments(kind):
            prefix = f"{group}.{kind}."
            return {name[len(prefix):]: value.astype(dtype) for name, value in tensors.items()
                    if name.startswith(prefix)}

        return cls(int(tensors[f"{group}.step"]), moments('m'), moments('v'))


def adam_step(params: Mapping[str, Tensor],
              grads: Mapping[str, np.ndarray | None],
              state: AdamState,
              lr: float,
              beta1: float = 0.9,
              beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """
    One Adam update with bias correction, in place on the parameters and the state.

    A missing gradient counts as zero.
    """
    state.step += 1
    first_correction = 1.0 - beta1 ** state.step
    second_correction = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ContractError(f"gradient of {name} has shape {g.shape}, parameter has {p.shape}")
        m = beta1 * state.first.get(name, np.zeros_like(p.data)) + (1.0 - beta1) * g
        v = beta2 * state.second.get(name, np.zeros_like(p.data)) + (1.0 - beta2) * g * g
        state.first[name] = m
        state.second[name] = v
        p.data = p.data - lr * (m / first_correction) / (np.sqrt(v / second_correction) + eps)


def _named(network: CompletionNetwork, *sections: str) -> dict[str, Tensor]:
    modules = network.sections()
    return {name: p for section in sections for name, p in modules[section].named_parameters(f"{section}.")}


def _step(params: dict[str, Tensor], state: AdamState, lr: float, config: TrainConfig) -> None:
    adam_step(params, {name: p.grad for name, p in params.items()}, state, lr,
              config.adam_beta1, config.adam_beta2, config.adam_eps)


def _batches(count: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    loss: float
    lr: float
    seconds: float


class TrainingLog:
    """CSV log with the columns ``epoch,stage,loss,lr,seconds``, one row per epoch, appended as epochs end."""

    COLUMNS = ['epoch', 'stage', 'loss', 'lr', 'seconds']

    def __init__(self, path: str | None):
        self.path = path
        self.records: list[EpochRecord] = []

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)
        logger.info(f"train_epoch stage={record.stage} epoch={record.epoch} loss={record.loss:.6g} "
                    f"lr={record.lr:.3g} seconds={record.seconds:.2f}")
        if self.path is None:
            return
        create_parent(self.path)
        header = not os.path.exists(self.path)
        pd.DataFrame([asdict(record)], columns=self.COLUMNS).to_csv(self.path, mode='a', header=header, index=False)


StepFunction = Callable[[np.ndarray, np.random.Generator, float, int], float]


class StageRun:
    """
    State shared by the epoch loop of one stage: where it starts, the optimizers and the output paths.

    :param stage: Stage number.
    :param network: Network to train, modified in place.
    :param config: Training settings.
    :param checkpoint: Checkpoint of the previous stage, or of this stage to resume from.
    :param out_path: Where the checkpoint is written after every epoch.
    :param log: Training log.
    """

    def __init__(self, stage: int, network: CompletionNetwork, config: TrainConfig, checkpoint: Checkpoint | None,
                 out_path: str | None, log: TrainingLog):
        self.stage = stage
        self.network = network
        self.config = config
        self.out_path = out_path
        self.log = log
        self.start_epoch = 0
        self.optimizer_tensors: Mapping[str, np.ndarray] = {}
        self.optimizers: dict[str, AdamState] = {}
        self._restore(checkpoint)

    def _restore(self, checkpoint: Checkpoint | None) -> None:
        stage = self.stage
        if checkpoint is None:
            if stage != 1:
                raise StageOrderError(f"stage {stage} needs a checkpoint of stage {stage - 1}")
            return
        if checkpoint.stage not in (stage - 1, stage):
            raise StageOrderError(f"stage {stage} cannot start from a stage {checkpoint.stage} checkpoint; "
                                  f"it needs stage {stage - 1} (or stage {stage} to resume)")
        if checkpoint.seed != self.config.seed:
            logger.warning(f"seed_mismatch checkpoint={checkpoint.seed} config={self.config.seed}")
        checkpoint.restore(self.network)
        if checkpoint.stage == stage:
            self.start_epoch = checkpoint.epoch
            self.optimizer_tensors = checkpoint.optimizer
            logger.info(f"train_resume stage={stage} epoch={checkpoint.epoch}")

    def optimizer(self, group: str) -> AdamState:
        if group not in self.optimizers:
            self.optimizers[group] = AdamState.from_tensors(self.optimizer_tensors, f"adam.{group}",
                                                            self.network.dtype)
        return self.optimizers[group]

    def checkpoint(self, epoch: int) -> Checkpoint:
        optimizer = {}
        for group, state in self.optimizers.items():
            optimizer.update(state.to_tensors(f"adam.{group}"))
        return Checkpoint.of(self.network, optimizer, self.config.seed, self.stage, epoch)

    def run(self, sample_count: int, step: StepFunction) -> Checkpoint:
        """
        Epoch loop.

        :param sample_count: Number of training samples, shuffled every epoch.
        :param step: Called with the batch indices, the epoch generator, the learning rate and the global step,
            returns the batch loss.
        """
        config = self.config
        epochs = config.epochs_for(self.stage)
        steps_per_epoch = math.ceil(sample_count / config.batch_size)
        for epoch in range(self.start_epoch, epochs):
            started = time.perf_counter()
            rng = rng_for(config.seed, 'train', self.stage, epoch)
            lr = lr_schedule(epoch, config.lr, config.lr_decay, config.lr_decay_every)
            losses = [step(batch, rng, lr, epoch * steps_per_epoch + i)
                      for i, batch in enumerate(_batches(sample_count, config.batch_size, rng))]
            loss = float(np.mean(losses))
            if not math.isfinite(loss):
                raise ConvergenceError(f"stage {self.stage} epoch {epoch}: training loss is {loss}")
            self.log.append(EpochRecord(epoch, self.stage, loss, lr, time.perf_counter() - started))
            if self.out_path is not None:
                save_checkpoint(self.checkpoint(epoch + 1), self.out_path)
        return self.checkpoint(max(epochs, self.start_epoch))


def _check_samples(samples: Sequence[SamplePair]) -> None:
    if not samples:
        raise ContractError("training needs at least one sample")


def train_stage1(network: CompletionNetwork, samples: Sequence[SamplePair], config: TrainConfig,
                 checkpoint: Checkpoint | None = None, out_path: str | None = None,
                 log: TrainingLog | None = None) -> Checkpoint:
    """Encoder and decoder trained on the completion loss, the GAN bypassed."""
    _check_samples(samples)
    run = StageRun(1, network, config, checkpoint, out_path, log or TrainingLog(None))
    params = _named(network, *trainable_sections(1, network.variant))
    total_steps = config.epochs_for(1) * math.ceil(len(samples) / config.batch_size)
    optimizer = run.optimizer('model')

    def step(batch, rng, lr, global_step):
        alpha = detail_weight(global_step, total_steps)
        network.zero_grad()
        losses = []
        for i in batch:
            coarse, detail = network(samples[i].partial)
            losses.append(completion_loss(coarse, detail, samples[i].gt, alpha, config.d1_kind, config.d2_kind,
                                          config.emd_epsilon))
        loss = sum(losses[1:], losses[0]) / len(batch)
        backward(loss)
        _step(params, optimizer, lr, config)
        return loss.item()

    return run.run(len(samples), step)


def encode_all(network: CompletionNetwork, clouds: Sequence[PointCloud]) -> Tensor:
    """(len(clouds), mgfv_dim) features, without graph."""
    with no_grad():
        return Tensor(np.stack([network.encoder.encode(cloud).data for cloud in clouds]))


def _critic_update(network: CompletionNetwork, x: Tensor, y: Tensor, gan_config: GanConfig,
                   optimizer: AdamState, rng: np.random.Generator, lr: float, config: TrainConfig) -> None:
    with no_grad():
        fake = network.generator(x)
    network.discriminator.zero_grad()
    terms = critic_terms(network.discriminator, y, fake, gan_config.gp_lambda, rng)
    backward(terms.loss)
    _step(_named(network, 'discriminator'), optimizer, lr, config)
    logger.debug(f"critic_step wasserstein={terms.wasserstein:.6g} penalty={terms.penalty:.6g}")


def train_stage2(network: CompletionNetwork, samples: Sequence[SamplePair], config: TrainConfig,
                 gan_config: GanConfig, checkpoint: Checkpoint | None, out_path: str | None = None,
                 log: TrainingLog | None = None) -> Checkpoint:
    """
    Feature GAN training with the encoder frozen: critic_steps critic updates, then one generator update, per
    batch. Real features come from complete clouds, fake ones from the generator on partial clouds.

    Without the GAN in the variant the stage trains nothing and only marks the checkpoint as stage 2.
    """
    _check_samples(samples)
    run = StageRun(2, network, config, checkpoint, out_path, log or TrainingLog(None))
    if not network.variant.use_wgan:
        logger.info("train_stage_skipped stage=2 reason=no_gan")
        return run.checkpoint(0)
    partials = encode_all(network, [s.partial for s in samples])
    completes = encode_all(network, [s.gt for s in samples])
    critic_optimizer = run.optimizer('critic')
    generator_optimizer = run.optimizer('generator')
    generator_params = _named(network, 'generator')

    def step(batch, rng, lr, global_step):
        x, y = take(partials, batch), take(completes, batch)
        for _ in range(gan_config.critic_steps):
            _critic_update(network, x, y, gan_config, critic_optimizer, rng, lr, config)
        network.generator.zero_grad()
        terms = generator_terms(network.generator, network.discriminator, x, y, gan_config)
        backward(terms.loss)
        _step(generator_params, generator_optimizer, lr, config)
        logger.debug(f"generator_step adversarial={terms.adversarial:.6g} l1={terms.l1:.6g}")
        return terms.loss.item()

    return run.run(len(samples), step)


def train_stage3(network: CompletionNetwork, samples: Sequence[SamplePair], config: TrainConfig,
                 gan_config: GanConfig, checkpoint: Checkpoint | None, out_path: str | None = None,
                 log: TrainingLog | None = None) -> Checkpoint:
    """
    End-to-end fine-tuning of encode -> generate -> decode on the completion loss, plus beta |G(x) - y|_1 when
    ``stage3_feature_l1`` is set. The critic stays frozen unless ``stage3_train_discriminator`` is set.
    """
    _check_samples(samples)
    run = StageRun(3, network, config, checkpoint, out_path, log or TrainingLog(None))
    use_wgan = network.variant.use_wgan
    params = _named(network, *trainable_sections(3, network.variant))
    total_steps = config.epochs_for(3) * math.ceil(len(samples) / config.batch_size)
    optimizer = run.optimizer('model')
    train_critic = use_wgan and config.stage3_train_discriminator
    critic_optimizer = run.optimizer('critic') if train_critic else None

    def step(batch, rng, lr, global_step):
        alpha = detail_weight(global_step, total_steps)
        network.zero_grad()
        losses = []
        for i in batch:
            sample = samples[i]
            x = network.encoder.encode(sample.partial)
            feature = network.generator(x) if use_wgan else x
            coarse, detail = network.decoder.decode(feature)
            loss = completion_loss(coarse, detail, sample.gt, alpha, config.d1_kind, config.d2_kind,
                                   config.emd_epsilon)
            if use_wgan and config.stage3_feature_l1:
                with no_grad():
                    y = network.encoder.encode(sample.gt)
                loss = loss + gan_config.beta * l1_norm(feature - y)
            losses.append(loss)
        loss = sum(losses[1:], losses[0]) / len(batch)
        backward(loss)
        _step(params, optimizer, lr, config)
        if train_critic:
            x = encode_all(network, [samples[i].partial for i in batch])
            y = encode_all(network, [samples[i].gt for i in batch])
            for _ in range(gan_config.critic_steps):
                _critic_update(network, x, y, gan_config, critic_optimizer, rng, lr, config)
        return loss.item()

    return run.run(len(samples), step)


def train_stage(stage: int, network: CompletionNetwork, samples: Sequence[SamplePair], config: TrainConfig,
                gan_config: GanConfig, checkpoint: Checkpoint | None = None, out_path: str | None = None,
                log: TrainingLog | None = None) -> Checkpoint:
    match stage:
        case 1:
            return train_stage1(network, samples, config, checkpoint, out_path, log)
        case 2:
            return train_stage2(network, samples, config, gan_config, checkpoint, out_path, log)
        case 3:
            return train_stage3(network, samples, config, gan_config, checkpoint, out_path, log)
        case _:
            raise ContractError(f"stage must be one of {STAGES}, got {stage}")


def run_pipeline(network: CompletionNetwork, samples: Sequence[SamplePair], config: TrainConfig,
                 gan_config: GanConfig, out_dir: str, log_path: str | None = None) -> list[str]:
    """
    Stages 1, 2 and 3 in sequence.

    :return: Paths of the three checkpoints ``stage1.fpck``, ``stage2.fpck`` and ``stage3.fpck`` in out_dir.
    """
    log = TrainingLog(log_path)
    checkpoint = None
    paths = []
    for stage in STAGES:
        path = os.path.join(out_dir, f"stage{stage}.fpck")
        checkpoint = train_stage(stage, network, samples, config, gan_config, checkpoint, path, log)
        save_checkpoint(checkpoint, path)
        paths.append(path)
    return paths


def trainable_sections(stage: int, variant: Variant) -> list[str]:
    """Top-level modules whose parameters a stage updates."""
    match stage:
        case 1:
            return ['encoder', 'decoder']
        case 2:
            return ['generator', 'discriminator'] if variant.use_wgan else []
        case 3:
            return ['encoder', 'generator', 'decoder'] if variant.use_wgan else ['encoder', 'decoder']
    raise ContractError(f"stage must be one of {STAGES}, got {stage}")


def section_hashes(network: Module) -> dict[str, str]:
    """sha256 of every top-level module, for the freezing checks."""
    return {name: parameter_hash(module) for name, module in network.sections().items()}
