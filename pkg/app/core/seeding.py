"""
Seed derivation so every random stream is a pure function of the run seed
"""

from enum import IntEnum

import numpy as np
import torch


class SeedStream(IntEnum):
    """Independent random streams of one run"""
    DATA = 1
    SPLIT = 2
    PARTITION = 3
    INIT = 4
    SELECT = 5
    BATCH = 6
    EVAL = 7


def derive_seed(run_seed: int, stream: SeedStream, *parts: int) -> int:
    """Mix the run seed, a stream tag and any ids (client, round, ...) into one seed"""
    sequence = np.random.SeedSequence([int(run_seed), int(stream), *(int(p) for p in parts)])
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator
