"""
Deterministic Seed Derivation
Every random stream is addressed by (master seed, component path) so results
never depend on execution order or thread count
"""

import hashlib
from typing import Union

import numpy as np

SeedComponent = Union[int, str]


def _component_to_int(component: SeedComponent) -> int:
    if isinstance(component, bool):
        raise TypeError("Seed components must be int or str, not bool")
    if isinstance(component, (int, np.integer)):
        if component < 0:
            raise ValueError(f"Seed components must be nonnegative, got {component}")
        return int(component)
    if isinstance(component, str):
        digest = hashlib.sha256(component.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"Unsupported seed component type: {type(component).__name__}")


def seed_sequence(master_seed: int, *components: SeedComponent) -> np.random.SeedSequence:
    """Build the SeedSequence for a component path under a master seed"""
    return np.random.SeedSequence(
        entropy=_component_to_int(master_seed),
        spawn_key=tuple(_component_to_int(c) for c in components),
    )


def derive_seed(master_seed: int, *components: SeedComponent) -> int:
    """
    Derive a 64-bit child seed.

    Args:
        master_seed: Run-level seed
        components: Path such as (round, client_id, "disc")

    Returns:
        Nonnegative integer seed, identical for identical arguments
    """
    state = seed_sequence(master_seed, *components).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def make_rng(master_seed: int, *components: SeedComponent) -> np.random.Generator:
    """Generator for a component path"""
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, *components)))
