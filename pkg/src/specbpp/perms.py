"""Permutation algebra over S_N and displacement-biased sampling.

A permutation stores ``map`` with ``map[i] = pi(i)`` (0-based). The
difficulty measure is total displacement, phi(pi) = sum_i |i - pi(i)|,
and the sampler draws pi with probability proportional to
exp(-phi(pi) / T): low temperature concentrates on near-identity
permutations, high temperature approaches uniform.

Sampling is exact: S_N is enumerated (N <= 8, at most 40,320 entries)
and draws invert the cumulative table, so there is no mixing-time or
approximation concern.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

__all__ = [
    "Permutation",
    "identity",
    "inverse",
    "compose",
    "displacement",
    "enumerate_sn",
    "uniform_sample",
    "BoltzmannSampler",
    "MAX_SEGMENTS",
]

# Exact enumeration is the backbone of sampling; 8! = 40,320 is the
# largest table kept.
MAX_SEGMENTS = 8

_SN_CACHE: dict[int, np.ndarray] = {}


class Permutation:
    """Bijection on {0..n-1}; immutable once constructed."""

    __slots__ = ("map",)

    def __init__(self, mapping):
        m = np.asarray(mapping, dtype=np.int64)
        if m.ndim != 1 or m.size == 0:
            raise ValueError(f"permutation must be a non-empty 1-D sequence, got shape {m.shape}")
        if not np.array_equal(np.sort(m), np.arange(m.size)):
            raise ValueError(f"not a bijection on 0..{m.size - 1}: {m.tolist()}")
        m.setflags(write=False)
        self.map = m

    @classmethod
    def _trusted(cls, m: np.ndarray) -> "Permutation":
        out = cls.__new__(cls)
        m.setflags(write=False)
        out.map = m
        return out

    @property
    def n(self) -> int:
        return self.map.size

    def __len__(self) -> int:
        return self.map.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Permutation) and np.array_equal(self.map, other.map)

    def __hash__(self) -> int:
        return hash(self.map.tobytes())

    def __repr__(self) -> str:
        return f"Permutation({self.map.tolist()})"

    def as_tuple(self) -> tuple:
        return tuple(int(v) for v in self.map)


def identity(n: int) -> Permutation:
    return Permutation._trusted(np.arange(n, dtype=np.int64))


def inverse(p: Permutation) -> Permutation:
    q = np.empty(p.n, dtype=np.int64)
    q[p.map] = np.arange(p.n)
    return Permutation._trusted(q)


def compose(a: Permutation, b: Permutation) -> Permutation:
    """(a o b)(i) = a(b(i))."""
    if a.n != b.n:
        raise ValueError(f"cannot compose permutations of sizes {a.n} and {b.n}")
    return Permutation._trusted(a.map[b.map].astype(np.int64))


def displacement(p: Permutation) -> int:
    """Total displacement phi(p) = sum_i |i - p(i)|; 0 iff identity."""
    return int(np.abs(np.arange(p.n) - p.map).sum())


def _sn_matrix(n: int) -> np.ndarray:
    """All of S_n as an (n!, n) int64 matrix in lexicographic order."""
    if not 1 <= n <= MAX_SEGMENTS:
        raise ValueError(f"n must be in 1..{MAX_SEGMENTS}, got {n}")
    cached = _SN_CACHE.get(n)
    if cached is None:
        cached = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
        cached.setflags(write=False)
        _SN_CACHE[n] = cached
    return cached


def enumerate_sn(n: int) -> list:
    """All n! permutations of size n, lexicographic, n <= 8."""
    return [Permutation._trusted(row) for row in _sn_matrix(n)]


def uniform_sample(n: int, rng: np.random.Generator) -> Permutation:
    """Uniform draw from S_n via unbiased shuffle; any n >= 1."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return Permutation._trusted(rng.permutation(n).astype(np.int64))


class BoltzmannSampler:
    """Exact sampler for p(pi) proportional to exp(-phi(pi) / T).

    The full table of S_n is enumerated with float64 weights; draws use
    inverse-CDF lookup, so empirical frequencies converge to the exact
    normalized weights.
    """

    __slots__ = ("n_segments", "temperature", "permutations", "probabilities", "_cdf")

    def __init__(self, n_segments: int, temperature: float):
        if not 1 <= n_segments <= MAX_SEGMENTS:
            raise ValueError(f"n_segments must be in 1..{MAX_SEGMENTS}, got {n_segments}")
        temperature = float(temperature)
        if not temperature > 0:
            raise ValueError(f"temperature must be > 0, got {temperature}")
        self.n_segments = int(n_segments)
        self.temperature = temperature
        maps = _sn_matrix(self.n_segments)
        self.permutations = maps
        phi = np.abs(np.arange(self.n_segments) - maps).sum(axis=1)
        w = np.exp(-phi / temperature)
        self.probabilities = w / w.sum()
        cdf = np.cumsum(self.probabilities)
        cdf[-1] = 1.0
        self._cdf = cdf

    def __len__(self) -> int:
        return math.factorial(self.n_segments)

    def sample(self, rng: np.random.Generator) -> Permutation:
        idx = int(np.searchsorted(self._cdf, rng.random(), side="right"))
        return Permutation._trusted(self.permutations[idx])

    def sample_index_batch(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """(count, n) matrix of drawn permutation maps; one rng.random(count) stream."""
        idx = np.searchsorted(self._cdf, rng.random(count), side="right")
        return self.permutations[idx]
