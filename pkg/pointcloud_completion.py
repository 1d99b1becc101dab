#!/usr/bin/env python
#
# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/

import argparse
import logging
import logging.config
import os
import sys
from argparse import Namespace
from dataclasses import replace

import pandas as pd
from dynaconf import Dynaconf

from fewpoint.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from fewpoint.config import read_configuration
from fewpoint.dataset import DatasetConfig, build_dataset, iter_samples, load_manifest
from fewpoint.errors import FewPointError
from fewpoint.gan import GanConfig
from fewpoint.network import ABLATION_VARIANTS, BASELINE, CompletionNetwork, Variant
from fewpoint.pointcloud import denormalize, normalize, random_subsample, read_xyz, write_xyz
from fewpoint.report import MetricsReport, emd_note, evaluate, format_rates, write_ablation_excel, write_table
from fewpoint.tool import derive_seed
from fewpoint.trainer import TrainConfig, TrainingLog, run_pipeline, train_stage

DEFAULT_INPUT_SIZES = [128, 16]
BASELINE_LABEL = 'baseline'


def main() -> None:
    """
    Application main function.

    Parse the arguments and then execute the corresponding action.

    :return: None
    """
    arguments = parse_arguments()
    config = read_configuration(arguments.config)
    configure_logging(config)
    try:
        match arguments.action:
            case 'gen-data':
                generate_data(arguments, config)
            case 'train':
                train(arguments, config)
            case 'complete':
                complete(arguments, config)
            case 'eval':
                evaluate_checkpoints(arguments, config)
            case 'ablate':
                ablate(arguments, config)
            case _:
                print(f'Unknown action: {arguments.action}', file=sys.stderr)
                sys.exit(1)
    except (FewPointError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)


def configure_logging(config: Dynaconf) -> None:
    if 'log_file' in config:
        logging.config.fileConfig(config.log_file, disable_existing_loggers=False)
    else:
        logging.basicConfig(level=logging.INFO, format='%(asctime)s %(levelname)s %(name)s %(message)s')


def generate_data(arguments: Namespace, config: Dynaconf) -> None:
    """
    Execute the "gen-data" action.

    :param arguments: Arguments object from the command line.
    :param config: Settings.
    :return: None
    """
    dataset_config = DatasetConfig.from_settings(config,
                                                 out_dir=arguments.out,
                                                 classes=arguments.classes,
                                                 per_class=arguments.per_class,
                                                 gt_points=arguments.gt_points,
                                                 partial_points=arguments.partial_points,
                                                 seed=arguments.seed)
    manifest = build_dataset(dataset_config)
    print(manifest.path)


def train(arguments: Namespace, config: Dynaconf) -> None:
    """
    Execute the "train" action: run one stage, starting from the previous stage checkpoint or resuming this one.

    :param arguments: Arguments object from the command line.
    :param config: Settings.
    :return: None
    """
    train_config = TrainConfig.from_settings(config)
    checkpoint = load_checkpoint(arguments.resume) if arguments.resume else None
    network = CompletionNetwork.from_settings(config, train_config.variant, train_config.seed)
    samples = list(iter_samples(load_manifest(arguments.data), 'train'))
    log_path = arguments.log or f"{os.path.splitext(arguments.out)[0]}_log.csv"
    result = train_stage(arguments.stage, network, samples, train_config, GanConfig.from_settings(config),
                         checkpoint, arguments.out, TrainingLog(log_path))
    save_checkpoint(result, arguments.out)
    print(f"Stage {arguments.stage} of {train_config.variant.name} written to {arguments.out} (log {log_path})")


def load_network(path: str, config: Dynaconf) -> tuple[CompletionNetwork, bool]:
    """
    Rebuild a trained network.

    :return: The network and whether completion goes through the generator.
    """
    checkpoint: Checkpoint = load_checkpoint(path)
    variant = Variant.of_parameters(checkpoint.parameters)
    network = CompletionNetwork.from_settings(config, variant, checkpoint.seed)
    checkpoint.restore(network)
    return network, variant.use_wgan and checkpoint.stage >= 2


def complete(arguments: Namespace, config: Dynaconf) -> None:
    """
    Execute the "complete" action.

    The input is normalized, completed and the detail cloud is written back in the input frame.

    :param arguments: Arguments object from the command line.
    :param config: Settings.
    :return: None
    """
    network, through_generator = load_network(arguments.ckpt, config)
    cloud = read_xyz(arguments.input)
    if arguments.points is not None:
        cloud = random_subsample(cloud, arguments.points, derive_seed(config.get('seed', 0), arguments.input))
    normalized, center, scale = normalize(cloud)
    _, detail = network.complete(normalized, through_generator)
    write_xyz(denormalize(detail, center, scale), arguments.out)
    print(f"Completed {cloud.count} points into {detail.count} points: {arguments.out}")


def input_sizes(arguments: Namespace, config: Dynaconf) -> list[int]:
    if arguments.input_sizes:
        return [int(s) for s in arguments.input_sizes.split(',') if s.strip()]
    return [int(s) for s in config.get('input_sizes', DEFAULT_INPUT_SIZES)]


def evaluate_checkpoints(arguments: Namespace, config: Dynaconf) -> None:
    """
    Execute the "eval" action: score a model and a baseline on the test split and write the report.

    :param arguments: Arguments object from the command line.
    :param config: Settings.
    :return: None
    """
    manifest = load_manifest(arguments.data)
    samples = list(iter_samples(manifest, 'test'))
    sizes = input_sizes(arguments, config)
    seed = int(config.get('seed', 0))
    threads = int(config.get('threads', 1))
    epsilon = float(config.get('emd_epsilon', 0.01))

    network, through_generator = load_network(arguments.ckpt, config)
    baseline, baseline_through_generator = load_network(arguments.baseline_ckpt, config)
    scores = {
        network.variant.name: evaluate(network, samples, sizes, seed, through_generator, threads, epsilon),
        BASELINE_LABEL: evaluate(baseline, samples, sizes, seed, baseline_through_generator, threads, epsilon),
    }
    report = MetricsReport.from_scores(scores, BASELINE_LABEL, emd_note(epsilon), manifest.classes())
    report.to_csv(arguments.out)
    report.cross_check()

    tables = {size: report.reduction_table(network.variant.name, size) for size in sizes}
    for size, table in tables.items():
        print(f"Input size {size}, {network.variant.name} against {BASELINE_LABEL}:")
        print(format_rates(table))
    write_table(pd.concat(tables, names=['input_size', 'metric']), f"{os.path.splitext(arguments.out)[0]}_table.csv")
    print(f"Report written to {arguments.out}")


def ablate(arguments: Namespace, config: Dynaconf) -> None:
    """
    Execute the "ablate" action: train the baseline, the three single-module variants and the full model with
    one seed, evaluate them all and write the ablation tables.

    :param arguments: Arguments object from the command line.
    :param config: Settings.
    :return: None
    """
    manifest = load_manifest(arguments.data)
    train_samples = list(iter_samples(manifest, 'train'))
    test_samples = list(iter_samples(manifest, 'test'))
    base_config = TrainConfig.from_settings(config)
    gan_config = GanConfig.from_settings(config)
    sizes = input_sizes(arguments, config)
    threads = int(config.get('threads', 1))
    epsilon = float(config.get('emd_epsilon', 0.01))

    scores = {}
    for variant in ABLATION_VARIANTS:
        train_config = replace(base_config, variant=variant)
        network = CompletionNetwork.from_settings(config, variant, train_config.seed)
        run_dir = os.path.join(arguments.out, variant.name)
        print(f"Training {variant.name}...")
        run_pipeline(network, train_samples, train_config, gan_config, run_dir, os.path.join(run_dir, 'train_log.csv'))
        scores[variant.name] = evaluate(network, test_samples, sizes, train_config.seed, variant.use_wgan, threads,
                                        epsilon)

    report = MetricsReport.from_scores(scores, BASELINE.name, emd_note(epsilon), manifest.classes())
    report.to_csv(os.path.join(arguments.out, 'ablation.csv'))
    report.cross_check()
    tables = {size: report.ablation_table(size) for size in sizes}
    for size, table in tables.items():
        print(f"Input size {size}, reduction against {BASELINE.name}:")
        print(format_rates(table))
        write_table(table, os.path.join(arguments.out, f"ablation_table_{size}.csv"))
    write_ablation_excel(tables, os.path.join(arguments.out, 'ablation.xlsx'))
    print(f"Ablation written to {arguments.out}")


def parse_arguments() -> argparse.Namespace:
    """
    Parse the command line arguments.

    :return: The argparse.Namespace containing the arguments values.
    """
    main_parser = argparse.ArgumentParser(description="Few-point point cloud completion")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="Settings file (default settings.toml)")
    subparsers = main_parser.add_subparsers(title="commands", required=True)

    gen_parser = subparsers.add_parser('gen-data', parents=[common], help="Generate the synthetic dataset")
    gen_parser.set_defaults(action='gen-data')
    gen_parser.add_argument('--out', help="Dataset folder")
    gen_parser.add_argument('--classes', type=int, help="Number of shape classes (1 to 8)")
    gen_parser.add_argument('--per-class', type=int, help="Training samples per class")
    gen_parser.add_argument('--gt-points', type=int, help="Points of a complete cloud")
    gen_parser.add_argument('--partial-points', type=int, help="Points of a partial cloud")
    gen_parser.add_argument('--seed', type=int, help="Generation seed")

    train_parser = subparsers.add_parser('train', parents=[common], help="Run one training stage")
    train_parser.set_defaults(action='train')
    train_parser.add_argument('--data', required=True, help="Dataset folder")
    train_parser.add_argument('--stage', type=int, choices=[1, 2, 3], required=True, help="Training stage")
    train_parser.add_argument('--resume', help="Checkpoint of the previous stage, or of this stage to continue it")
    train_parser.add_argument('--out', required=True, help="Output checkpoint")
    train_parser.add_argument('--log', help="Training log CSV (default <out>_log.csv)")

    complete_parser = subparsers.add_parser('complete', parents=[common], help="Complete one XYZ cloud")
    complete_parser.set_defaults(action='complete')
    complete_parser.add_argument('--ckpt', required=True, help="Trained checkpoint")
    complete_parser.add_argument('--in', dest='input', required=True, help="Input XYZ file")
    complete_parser.add_argument('--out', required=True, help="Output XYZ file")
    complete_parser.add_argument('--points', type=int, help="Randomly keep this many input points first")

    eval_parser = subparsers.add_parser('eval', parents=[common],
                                        help="Compare a model to a baseline on the test split")
    eval_parser.set_defaults(action='eval')
    eval_parser.add_argument('--ckpt', required=True, help="Model checkpoint")
    eval_parser.add_argument('--data', required=True, help="Dataset folder")
    eval_parser.add_argument('--input-sizes', help="Comma separated input sizes (default 128,16)")
    eval_parser.add_argument('--baseline-ckpt', required=True, help="Baseline checkpoint")
    eval_parser.add_argument('--out', required=True, help="Report CSV")

    ablate_parser = subparsers.add_parser('ablate', parents=[common],
                                          help="Train and compare the ablation variants")
    ablate_parser.set_defaults(action='ablate')
    ablate_parser.add_argument('--data', required=True, help="Dataset folder")
    ablate_parser.add_argument('--input-sizes', help="Comma separated input sizes (default 128,16)")
    ablate_parser.add_argument('--out', required=True, help="Output folder")

    return main_parser.parse_args()


if __name__ == '__main__':
    main()
