# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/

import os

import numpy as np


def create_parent(path: str) -> None:
    """Create the parent folder of the given path if it doesn't exist."""
    parent = os.path.dirname(path)
    if parent and not os.path.exists(parent):
        os.makedirs(parent)


def derive_seed(*parts: int | str) -> list[int]:
    """
    Build a seed sequence entropy list from integers and strings.

    Strings are folded to integers through their UTF-8 bytes so that e.g. sample ids give stable seeds.
    """
    entropy = []
    for part in parts:
        if isinstance(part, str):
            entropy.append(int.from_bytes(part.encode(), 'little') % (2 ** 63))
        else:
            entropy.append(int(part))
    return entropy


def rng_for(*parts: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
