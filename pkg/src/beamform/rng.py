"""Platform-stable random streams.

All randomness in the package comes from the PCG64 bit generator (O'Neill's
permuted congruential generator, 128-bit state, 64-bit output) seeded through
numpy's ``SeedSequence``.  Only the raw 64-bit output words are consumed:

* uniform doubles are ``(word >> 11) * 2**-53`` (53 random mantissa bits);
* Gaussians use the Box-Muller transform on pairs of uniforms.

numpy guarantees the raw PCG64 stream and the ``SeedSequence`` hash to be
identical across platforms and releases, and the transforms above are plain
IEEE-754 arithmetic, so every stream here is bit-reproducible.  Streams are
addressed by a key tuple of non-negative integers, e.g. ``(seed, 3, 1)``.
"""

import numpy as np

_TWO_PI = 2.0 * np.pi
_INV_2_53 = 2.0 ** -53


class Stream:
    """A keyed PCG64 stream with uniform and Box-Muller Gaussian draws."""

    def __init__(self, *key):
        if not key:
            raise ValueError("a stream needs at least one key component")
        self.key = tuple(int(k) for k in key)
        if any(k < 0 for k in self.key):
            raise ValueError(f"stream key components must be >= 0, got {self.key}")
        self._bits = np.random.PCG64(np.random.SeedSequence(list(self.key)))

    def _words(self, count):
        return self._bits.random_raw(count).astype(np.uint64)

    def uniform(self, size):
        """Uniform doubles in [0, 1)."""
        size = tuple(np.atleast_1d(size))
        n = int(np.prod(size))
        return ((self._words(n) >> np.uint64(11)) * _INV_2_53).reshape(size)

    def _open_uniform(self, n):
        # (0, 1]: keeps log() finite in Box-Muller
        return ((self._words(n) >> np.uint64(11)) + 1.0) * _INV_2_53

    def normal(self, size):
        """Standard real Gaussians, N(0, 1)."""
        size = tuple(np.atleast_1d(size))
        n = int(np.prod(size))
        z = self._box_muller((n + 1) // 2)
        return np.concatenate([z.real, z.imag])[:n].reshape(size) * np.sqrt(2.0)

    def complex_normal(self, size):
        """Circularly-symmetric CN(0, 1): real and imaginary parts ~ N(0, 1/2)."""
        size = tuple(np.atleast_1d(size))
        n = int(np.prod(size))
        return self._box_muller(n).reshape(size)

    def _box_muller(self, n):
        u1 = self._open_uniform(n)
        u2 = self._open_uniform(n)
        radius = np.sqrt(-np.log(u1))  # sqrt(-2 ln u1) / sqrt(2)
        angle = _TWO_PI * u2
        return radius * np.cos(angle) + 1j * (radius * np.sin(angle))


def derive_seed(*key):
    """Collapse a key tuple into a single 63-bit integer seed."""
    word = Stream(*key)._words(1)[0]
    return int(word >> np.uint64(1))
