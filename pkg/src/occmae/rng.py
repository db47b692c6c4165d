"""Counter-based seed splitting.

Every consumer of randomness derives its own stream from the root seed plus a
purpose tag and integer counters, so adding draws in one consumer never shifts
another consumer's stream.
"""
import numpy as np

PURPOSES = {
    "scene": 1,
    "mask": 2,
    "init": 3,
    "shuffle": 4,
    "eval_mask": 5,
    "objects": 6,
    "gradcheck": 7,
}

_MASK64 = (1 << 64) - 1


def seed_sequence(root_seed, purpose, *counters):
    if purpose not in PURPOSES:
        raise KeyError(f"unknown randomness purpose {purpose!r}")
    key = (PURPOSES[purpose],) + tuple(int(c) for c in counters)
    return np.random.SeedSequence(int(root_seed) & _MASK64, spawn_key=key)


def generator(root_seed, purpose, *counters):
    return np.random.Generator(np.random.PCG64(seed_sequence(root_seed, purpose, *counters)))


def derive_seed(root_seed, purpose, *counters):
    """A 64-bit integer seed for consumers that take a plain seed."""
    state = seed_sequence(root_seed, purpose, *counters).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)
