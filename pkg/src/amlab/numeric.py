"""Dense linear algebra helpers, stable reductions and the seeded generator.

Matrices are plain 2-D ``float64`` numpy arrays in row-major order.  Features
are rows; class weight vectors are rows of the head matrix (the transpose of
the usual column convention for the last fully connected layer).

The random generator is xoshiro256++ seeded through splitmix64, with Gaussian
draws produced by the Box-Muller transform (two uniforms per draw, cosine
branch only).  Both are fixed by name so test vectors are portable.
"""
import math

import numpy as np

from amlab import kernels

_MASK64 = (1 << 64) - 1


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array or raise ``ValueError``."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def matmul(a, b):
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def stable_logsumexp(values):
    """log(sum(exp(values))) with the maximum subtracted before exponentiating."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("logsumexp of an empty array")
    if not np.all(np.isfinite(v)):
        raise ValueError("logsumexp input has non-finite entries")
    top = v.max()
    return float(top + math.log(np.exp(v - top).sum()))


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


class Rng:
    """xoshiro256++ generator; single owner, not safe to share across threads."""

    def __init__(self, seed):
        x = int(seed) & _MASK64
        words = []
        for _ in range(4):
            x, z = _splitmix64(x)
            words.append(z)
        self.state = np.array(words, dtype=np.uint64)

    def next_u64(self):
        return kernels.xoshiro_next(self.state)

    def uniform(self):
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def below(self, n):
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("below() needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normals(self, shape, mean=0.0, stddev=1.0):
        if stddev < 0:
            raise ValueError(f"stddev must be >= 0, got {stddev}")
        size = int(np.prod(shape))
        out = np.empty(size, dtype=np.float64)
        if stddev == 0:
            # the stream still advances so later draws do not depend on stddev
            kernels.fill_normals(self.state, out, 0.0, 1.0)
            out[:] = mean
        else:
            kernels.fill_normals(self.state, out, float(mean), float(stddev))
        return out.reshape(shape)

    def permutation(self, n):
        """Fisher-Yates shuffle of range(n)."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return np.array(idx, dtype=np.int64)

    def choice(self, items, k):
        """k distinct items in random order."""
        items = list(items)
        if k > len(items):
            raise ValueError(f"cannot choose {k} of {len(items)} items")
        perm = self.permutation(len(items))
        return [items[i] for i in perm[:k]]


def gaussian(rng, mean, stddev):
    """One N(mean, stddev^2) draw from ``rng``."""
    return float(rng.normals(1, mean, stddev)[0])
