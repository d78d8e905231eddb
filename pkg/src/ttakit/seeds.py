"""Deterministic 64-bit seed derivation.

Every stochastic component of the pipeline derives its seed by mixing the
global seed with a handful of integer tags (image index, corruption kind,
severity, draw index, ...) through splitmix64.  The mixing is pure integer
arithmetic, so derived seeds are identical across runs, platforms and worker
counts.
"""

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return (z ^ (z >> 31)) & _MASK


def mix(*parts: int) -> int:
    """Fold integer parts into one 64-bit seed; order-sensitive."""
    h = 0x243F6A8885A308D3
    for p in parts:
        h = _splitmix64(h ^ (int(p) & _MASK))
    return h
