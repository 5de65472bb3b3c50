"""Deterministic key derivation for counter-based random streams.

Every random quantity in the package is produced by a keyed, counter-based
uniform stream (see the kernel backends): value = f(key, counter).  Keys are
derived here by folding integer tags through the same splitmix64 finalizer,
so that any (seed, tag, tag, ...) tuple maps to a well-spread 64-bit key.
No global state, no generation-order dependence.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GOLD = 0x9E3779B97F4A7C15


def _fin(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_key(*parts: int) -> int:
    """Fold integer parts into one 64-bit stream key.

    Order-sensitive: ``derive_key(a, b) != derive_key(b, a)`` in general.
    Negative ints are folded by their two's-complement bits.
    """
    h = 0x6A09E667F3BCC908
    for j, part in enumerate(parts):
        h = _fin(h ^ _fin((int(part) + (j + 1) * _GOLD) & _MASK))
    return h
