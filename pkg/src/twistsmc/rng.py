"""Counter-based random numbers.

Every uniform is a pure hash of integer keys (seed, run, particle, step,
stream, ...), so draws never depend on evaluation order. This is what lets
a batched engine, a sequential engine and a parallel engine agree bitwise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


def _mix(z):
    # splitmix64 finalizer
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def hash_keys(*keys):
    """Hash broadcastable integer key arrays to uint64."""
    with np.errstate(over="ignore"):
        h = np.zeros((), dtype=np.uint64)
        for key in keys:
            k = np.asarray(key).astype(np.int64).astype(np.uint64)
            h = _mix(h ^ k)
        return h


def counter_uniform(*keys):
    """Uniforms in the open interval (0, 1), one per broadcast key tuple."""
    h = hash_keys(*keys)
    return ((h >> _S11).astype(np.float64) + 0.5) * _INV53


def categorical(logp, u):
    """Inverse-CDF draw of one index per row of ``logp`` given uniforms ``u``.

    Zero-probability entries are never selected.
    """
    logp = np.atleast_2d(logp)
    m = np.max(logp, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    cdf = np.cumsum(np.exp(logp - m), axis=1)
    thresh = np.asarray(u, dtype=np.float64).reshape(-1, 1) * cdf[:, -1:]
    idx = np.sum(cdf <= thresh, axis=1)
    return np.minimum(idx, logp.shape[1] - 1)


@dataclass
class RngStream:
    """A seeded stream of counter-based uniforms.

    ``run`` namespaces independent Monte Carlo runs; ``counter`` advances as
    values are consumed through :meth:`uniform`. ``clone`` gives a stream that
    will reproduce the same future draws.
    """

    seed: int
    run: int = 0
    counter: int = 0

    def clone(self) -> "RngStream":
        return RngStream(self.seed, self.run, self.counter)

    def spawn(self, run: int) -> "RngStream":
        return RngStream(self.seed, run, 0)

    def uniform(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        ctr = self.counter + np.arange(n, dtype=np.int64)
        self.counter += n
        u = counter_uniform(self.seed, self.run, 0x5EED, ctr)
        return float(u[0]) if size is None else u.reshape(size)

    def keyed(self, *keys):
        """Stateless draws keyed by extra integers (does not advance)."""
        return counter_uniform(self.seed, self.run, *keys)

    def next_seed(self) -> int:
        """A fresh integer seed derived from the stream (advances by one)."""
        ctr = self.counter
        self.counter += 1
        return int(hash_keys(self.seed, self.run, 0xC0DE, ctr) >> np.uint64(2))
