"""Named random substreams derived from one seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; the same (seed, name) always gives the same stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])))


def get_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def set_state(gen: np.random.Generator, state: dict) -> None:
    gen.bit_generator.state = state
