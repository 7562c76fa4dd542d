"""Counter-based SplitMix64 streams.

The generator is fully specified so synthetic datasets can be reproduced bit
for bit by any implementation:

* ``mix64(x)`` is the SplitMix64 finaliser applied to ``x + 0x9E3779B97F4A7C15``.
* A stream is keyed by ``(seed, label)``:
  ``key = mix64(seed) ^ fnv1a64(label.encode('utf-8'))``.
* Draw ``i`` (0-based, counting every 64-bit word drawn from the stream) is
  ``mix64(key + i * 0x9E3779B97F4A7C15)`` with wrapping uint64 arithmetic.
* Uniforms on [0, 1) are ``(word >> 11) * 2**-53``.
* Normals use Box-Muller on consecutive word pairs ``(w0, w1)``:
  ``u1 = ((w0 >> 11) + 1) * 2**-53`` (so ``u1`` is in (0, 1]),
  ``u2 = (w1 >> 11) * 2**-53``, giving
  ``r*cos(2*pi*u2), r*sin(2*pi*u2)`` with ``r = sqrt(-2 ln u1)``, emitted in
  that order. An odd request still consumes a whole pair.
* ``permutation(n)`` draws ``n`` words and returns the stable argsort of them.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1
_TWO_M53 = 2.0 ** -53


def mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 output function, vectorised over a uint64 array."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


@lru_cache(maxsize=4096)
def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & _MASK
    return h


class Stream:
    """One independent counter-based stream of 64-bit words."""

    def __init__(self, seed: int, label: str):
        seed_word = np.array([int(seed) & _MASK], dtype=np.uint64)
        self.key = np.uint64(int(mix64(seed_word)[0]) ^ fnv1a64(label.encode("utf-8")))
        self.counter = 0

    def words(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return mix64(self.key + idx * GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        return (self.words(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        w = self.words(2 * pairs).reshape(pairs, 2)
        u1 = ((w[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_M53
        u2 = (w[:, 1] >> np.uint64(11)).astype(np.float64) * _TWO_M53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty((pairs, 2))
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        return out.reshape(-1)[:n]

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.words(n), kind="stable")


def stream(seed: int, *labels) -> Stream:
    """Stream keyed by ``seed`` and the ``/``-joined labels."""
    return Stream(seed, "/".join(str(x) for x in labels))
