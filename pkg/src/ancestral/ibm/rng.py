"""Counter-based random streams keyed by genealogical labels.

A uniform is a pure function of ``(key, counter)``.  Each individual owns a
key derived from its parent's key and its sibling rank, so two runs that make
the same decisions for an individual consume identical numbers regardless of
what happens elsewhere in the population.  The compiled core reimplements
``mix64`` and ``uniform`` with the same integer arithmetic.
"""

import numpy as np

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
ROOT_SALT = 0x5851F42D4C957F2D
CHILD_SALT = 0x14057B7EF767814F
MASTER_SALT = 0x2545F4914F6CDD1D
INV53 = 1.0 / 9007199254740992.0


def mix64(z: int) -> int:
    z &= MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def uniform(key: int, counter: int) -> float:
    """Uniform on the open interval (0, 1)."""
    z = mix64(key + (counter + 1) * GOLDEN)
    return ((z >> 11) + 0.5) * INV53


def master_key(seed: int) -> int:
    return mix64((seed & MASK) ^ MASTER_SALT)


def root_key(seed: int, index: int) -> int:
    return mix64(mix64((seed & MASK) ^ ROOT_SALT) + (index + 1) * GOLDEN)


def child_key(parent: int, rank: int) -> int:
    return mix64(parent ^ mix64((rank + CHILD_SALT) * GOLDEN))


def mix64_array(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64).copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


def uniforms(key: int, start: int, count: int) -> np.ndarray:
    """``[uniform(key, c) for c in range(start, start + count)]``, vectorized."""
    c = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = mix64_array(np.uint64(key) + c * np.uint64(GOLDEN))
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * INV53
