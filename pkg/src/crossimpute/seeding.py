"""Deterministic random-stream derivation.

Every stochastic component owns an independent stream derived from the
global seed plus integer coordinates (stream id, window index, epoch, ...),
so concurrent workers and resumed runs draw identical values.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np
import torch


class Stream(IntEnum):
    """Namespaces for derived random streams."""

    MASK_TRAIN = 1
    MASK_VAL = 2
    MASK_TEST = 3
    PAIRING = 4
    MIX_LAMBDA = 5
    DIFFUSION_T = 6
    NOISE = 7
    VAL_NOISE = 8
    SHUFFLE = 9
    IMPUTE = 10
    MODEL_INIT = 11
    SYNTH = 12


def child_rng(seed: int, *parts: int) -> np.random.Generator:
    """Independent numpy generator for the stream (seed, *parts)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(p) for p in parts]]))


def child_seed(seed: int, *parts: int) -> int:
    """63-bit integer seed derived from (seed, *parts), e.g. for torch."""
    state = np.random.SeedSequence([int(seed), *[int(p) for p in parts]]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1])


def torch_generator(seed: int, *parts: int) -> torch.Generator:
    """CPU torch generator seeded from the stream (seed, *parts)."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(child_seed(seed, *parts))
    return gen
