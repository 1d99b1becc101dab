# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
#
# A small wizard to prepare settings.toml.
# Call it with the command:
#      python -m fewpoint.setup

import os

import questionary
import tomlkit
from tomlkit import TOMLDocument

ABLATION_FLAGS = {
    'use_transformer_branch': "Transformer branch in the encoder (T-CMLP)",
    'use_pointnetpp_local': "PointNet++ local features in the decoder",
    'use_wgan': "Feature WGAN between encoder and decoder",
}

# Widths reachable on one CPU core, and the full-scale ones.
PRESETS = {
    'desk': {
        'per_point_dims': [32, 64, 128],
        'attention_dim': 32,
        'mgfv_dim': 128,
        'coarse_n': 64,
        'grid_side': 4,
        'local_dim': 32,
        'fc_dims': [256, 256],
        'fold_dims': [128, 128],
        'token_count': 8,
        'memory_units': 16,
        'critic_dims': [64],
        'gt_points': 512,
        'partial_points': 128,
        'input_sizes': [128, 16],
        'epochs': 50,
        'batch_size': 8,
    },
    'full_scale': {
        'per_point_dims': [64, 128, 256, 512, 1024],
        'attention_dim': 256,
        'mgfv_dim': 1024,
        'coarse_n': 1024,
        'grid_side': 4,
        'local_dim': 128,
        'fc_dims': [1024, 1024],
        'fold_dims': [512, 512],
        'token_count': 16,
        'memory_units': 64,
        'critic_dims': [256],
        'gt_points': 16384,
        'partial_points': 2048,
        'input_sizes': [2048, 16],
        'epochs': 250,
        'batch_size': 32,
    },
}


def main():
    settings = read_toml('settings.toml')

    ask_path(settings, 'data_dir', "Dataset folder", 'data')
    ask_path(settings, 'run_dir', "Training output folder", 'runs')

    if seed := questionary.text("Seed:", default=str(settings.get('seed', 0)),
                                validate=lambda s: s.isdigit()).ask():
        settings['seed'] = int(seed)

    preset = questionary.select("Network and dataset scale:", choices=list(PRESETS),
                                default=settings.get('preset', 'desk')).ask()
    if preset:
        settings['preset'] = preset
        if questionary.confirm(f"Overwrite the dimensions with the {preset} preset?", default=False).ask():
            for key, value in PRESETS[preset].items():
                settings[key] = value

    enabled = questionary.checkbox("Modules of the model:",
                                   choices=[questionary.Choice(label, value=flag, checked=settings.get(flag, True))
                                            for flag, label in ABLATION_FLAGS.items()]).ask()
    if enabled is not None:
        for flag in ABLATION_FLAGS:
            settings[flag] = flag in enabled

    write_toml(settings, 'settings.toml')


def ask_path(settings: TOMLDocument, setting_name: str, label: str, default: str) -> None:
    if path := questionary.path(f"{label}:", default=(settings.get(setting_name) or default),
                                only_directories=True).ask():
        settings[setting_name] = path
    elif setting_name in settings:
        del settings[setting_name]


def read_toml(path: str) -> TOMLDocument:
    if os.path.exists(path):
        with open(path, 'r') as f:
            content = f.read()
        return tomlkit.parse(content)
    else:
        return tomlkit.document()


def write_toml(content: TOMLDocument, path: str) -> None:
    with open(path, 'w') as f:
        tomlkit.dump(content, f)


if __name__ == "__main__":
    main()
