"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream, counter)``: the Philox-4x64
block cipher turns the key ``(seed, stream)`` and a counter into raw 64-bit
words, which become uniforms on (0, 1) and then normals via Box-Muller.
Callers address noise by position (training step, layer, unit) instead of by
the order in which it is consumed, so results do not depend on evaluation
order or on threads.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * np.pi


def _key_of(*parts: int | str) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


def _raw(seed: int, stream: int, counter: int, n: int) -> np.ndarray:
    # the caller's counter sits in the second Philox word, so consecutive
    # counters address disjoint blocks of up to 2**64 draws each
    bits = np.random.Philox(key=np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64),
                            counter=np.array([0, counter & _MASK64, 0, 0], dtype=np.uint64))
    return bits.random_raw(n)


def _uniform_open(raw: np.ndarray) -> np.ndarray:
    # top 53 bits, shifted half a step so 0 and 1 are never produced
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


@dataclass(frozen=True)
class RngStream:
    """Addressable source of uniform and standard-normal draws.

    ``counter`` is the base position; :meth:`normal` and :meth:`uniform`
    take an additional offset so one stream can serve many steps.
    """

    seed: int
    counter: int = 0
    stream: int = 0

    def child(self, *labels: int | str) -> RngStream:
        """Independent stream derived from this one and ``labels``."""
        return RngStream(self.seed, self.counter, _key_of(self.stream, *labels))

    def at(self, counter: int) -> RngStream:
        return RngStream(self.seed, counter, self.stream)

    def uniform(self, shape, offset: int = 0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape))
        return _uniform_open(_raw(self.seed, self.stream, self.counter + offset, n)).reshape(shape)

    def normal(self, shape, offset: int = 0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape))
        half = (n + 1) // 2
        u = _uniform_open(_raw(self.seed, self.stream, self.counter + offset, 2 * half))
        radius = np.sqrt(-2.0 * np.log(u[:half]))
        angle = _TWO_PI * u[half:]
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return z[:n].reshape(shape)


def draw(seed: int, counter: int, n: int = 1) -> np.ndarray:
    """``n`` standard normals at ``(seed, counter)``; a pure function."""
    return RngStream(seed, counter).normal((n,))
