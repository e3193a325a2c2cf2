"""Named counter-based random streams"""

import hashlib

import numpy as np


def stream_key(seed: int, label: str) -> int:
    """
    Derive a 128-bit Philox key from a global seed and a stream label

    Args:
        seed: Global run seed
        label: Stream name, e.g. 'sprites/seq/3' or 'eval/sample/7'

    Returns:
        Integer key
    """
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode('utf-8')).digest()
    return int.from_bytes(digest[:16], 'little')


def make_rng(seed: int, label: str) -> np.random.Generator:
    """
    Create an independent generator for a named stream

    Streams with different labels never share state, so the order in
    which they are created or consumed does not change their output.

    Args:
        seed: Global run seed
        label: Stream name

    Returns:
        numpy Generator backed by Philox
    """
    return np.random.Generator(np.random.Philox(key=stream_key(seed, label)))


def child_rng(rng: np.random.Generator, label: str) -> np.random.Generator:
    """Derive a labelled sub-stream from an existing generator"""
    seed = int(rng.integers(0, 2**62))
    return make_rng(seed, label)
