"""Counter-based random streams (Philox) with JSON-safe state snapshots."""

from __future__ import annotations

import numpy as np


def make_rng(*key: int) -> np.random.Generator:
    """Philox stream keyed by one or more non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return {"__uint64__": [int(v) for v in value.reshape(-1)]}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _restore(value):
    if isinstance(value, dict):
        if set(value) == {"__uint64__"}:
            return np.array(value["__uint64__"], dtype=np.uint64)
        return {k: _restore(v) for k, v in value.items()}
    return value


def rng_state(rng: np.random.Generator) -> dict:
    return _jsonable(rng.bit_generator.state)


def rng_from_state(state: dict) -> np.random.Generator:
    bitgen = np.random.Philox()
    bitgen.state = _restore(state)
    return np.random.Generator(bitgen)
