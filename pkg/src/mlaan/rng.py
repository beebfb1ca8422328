"""Deterministic random-stream fanout.

One master seed produces independent named substreams (init, shuffle,
subsample, ...), so enabling or disabling one randomized feature never
perturbs the draws seen by another. Stream identity is the name string,
hashed stably (cross-run, cross-process) into the seed sequence.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def named_stream(master_seed: int, name: str) -> np.random.Generator:
    """Generator for substream `name`, fully determined by (master_seed, name)."""
    seq = np.random.SeedSequence([int(master_seed), _stream_key(name)])
    return np.random.Generator(np.random.PCG64(seq))


def generator_state(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's position."""
    return gen.bit_generator.state


def restore_generator(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen
