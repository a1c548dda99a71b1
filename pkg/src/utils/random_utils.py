import numpy as np

# Stream keys, see make_rng
TOPOLOGY_STREAM = 0
PARAMS_STREAM = 1
EVENTS_STREAM = 2
NOISE_STREAM = 3
SEARCH_STREAM = 4
LINKS_STREAM = 5
RUNS_STREAM = 6


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent Philox generator for (seed, stream...); same key, same draws"""
    keys = tuple(int(k) for k in stream)
    if any(k < 0 for k in keys):
        raise ValueError(f"stream keys must be non-negative, got {keys}")
    sequence = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=keys)
    return np.random.Generator(np.random.Philox(sequence))


def derive_seed(seed: int, *stream: int) -> int:
    """Plain integer seed for a sub-stream, used where a seed must be recorded"""
    keys = tuple(int(k) for k in stream)
    sequence = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=keys)
    return int(sequence.generate_state(1, dtype=np.uint32)[0])
