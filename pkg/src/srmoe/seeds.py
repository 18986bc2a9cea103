"""Deterministic seed derivation for independent random streams.

Every stochastic entry point (sampling, estimator restarts, benchmark
repetitions) derives its own 64-bit seed by hashing a master seed together
with integer coordinates such as (size index, repetition). The hash is the
splitmix64 finalizer, so streams are decorrelated, reproducible, and
independent of execution order.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1


def _splitmix64_step(state: int) -> int:
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master_seed: int, *coords: int) -> int:
    """Hash a master seed and integer coordinates into a 64-bit stream seed."""
    state = master_seed & _MASK
    out = _splitmix64_step(state)
    for c in coords:
        state = (state ^ _splitmix64_step(c & _MASK)) & _MASK
        out = _splitmix64_step(state ^ out)
    return out
