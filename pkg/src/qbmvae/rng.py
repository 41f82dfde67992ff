"""Deterministic random number utilities.

Two generators live here and they have different jobs:

* A counter-based splitmix64 stream drives every sampler (Gibbs, annealing,
  exact inverse-CDF draws).  Output ``i`` of a stream keyed by ``key`` is
  ``mix64(key + i * GOLDEN)``, so any slice of the stream can be produced
  independently of the rest.  Parallel chains each get a derived key and
  write into their own slot, which makes multi-chain runs reproducible
  bit-for-bit regardless of scheduling.
* numpy ``Philox`` generators cover everything that needs richer
  distributions (gamma, poisson, normal) such as dataset synthesis and
  network initialisation.  Streams are keyed by ``(seed, stream)`` so
  independent consumers never share draws.

The same splitmix64 constants are inlined in the numba kernels in
``samplers``; keep the two in sync (they are cross-checked by tests).
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_U64 = np.uint64
_INV_2_53 = 2.0 ** -53


_MASK = 0xFFFFFFFFFFFFFFFF


def mix64(x: np.ndarray | int) -> np.ndarray:
    """splitmix64 finalizer: bijective scramble of a 64-bit word."""
    with np.errstate(over="ignore"):  # modular wrap is the point
        z = np.asarray(x, dtype=np.uint64)
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


def derive_seed(seed: int, r: int) -> int:
    """Derive an independent stream key from a base seed and a role index.

    Used to hand each chain / run / epoch its own counter stream.  The role
    index is multiplied by the golden-ratio increment before mixing so that
    adjacent roles land far apart in the state space.  Pure-int arithmetic
    keeps the modular wrap explicit.
    """
    x = (int(seed) & _MASK) ^ ((int(r) & _MASK) * int(GOLDEN) & _MASK)
    x ^= x >> 30
    x = x * int(_MIX1) & _MASK
    x ^= x >> 27
    x = x * int(_MIX2) & _MASK
    return x ^ (x >> 31)


def counter_words(key: int, start: int, count: int) -> np.ndarray:
    """Raw uint64 outputs ``start .. start+count-1`` of the stream ``key``."""
    idx = np.arange(start, start + count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(_U64(np.uint64(int(key) & _MASK)) + idx * GOLDEN)


def counter_uniforms(key: int, start: int, count: int) -> np.ndarray:
    """Uniform doubles in the open interval (0, 1) from stream ``key``.

    The top 53 bits of each word are shifted to the mantissa midpoint,
    ``u = (w >> 11 + 0.5) * 2**-53``, so 0.0 and 1.0 are unreachable.  That
    matters for the inverse-CDF transforms downstream, which assume an open
    interval.
    """
    w = counter_words(key, start, count)
    return ((w >> _U64(11)).astype(np.float64) + 0.5) * _INV_2_53


def philox_gen(seed: int, stream: int = 0) -> np.random.Generator:
    """numpy Generator on a Philox stream keyed by (seed, stream)."""
    bitgen = np.random.Philox(key=np.array([seed, stream], dtype=np.uint64))
    return np.random.Generator(bitgen)
