import numpy as np


def round_half_away(x):
    """
    Round to the nearest integer, ties away from zero. Every quantizer, the
    truncation path and packed inference round through here.
    """

    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent, reproducible generator for (seed, stream...)"""
    return np.random.default_rng([seed, *stream])
