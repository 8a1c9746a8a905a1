"""Compensated (double-double) accumulation for subset statistics.

Subset-level sufficient statistics are sums of per-sample contributions.
A distributed run groups those sums by subset before combining them, while
the single-process baseline accumulates them in one pass.  Plain float64
accumulation makes the two groupings differ at the ulp level, which is
enough to break exact trajectory equivalence between the two code paths.
Accumulating in an unevaluated hi/lo pair keeps ~32 significant digits, so
the rounded-to-double result is independent of how the sum was grouped.
"""
from __future__ import annotations

import numpy as np


def _two_sum(a, b):
    # Knuth TwoSum: s + e == a + b exactly.
    s = a + b
    bb = s - a
    e = (a - (s - bb)) + (b - bb)
    return s, e


def _renorm(s, e):
    # Fast renormalization so that |lo| <= ulp(hi)/2.
    hi = s + e
    lo = e - (hi - s)
    return hi, lo


class DDArray:
    """A float64 array accumulated with a hi/lo compensation term."""

    __slots__ = ("hi", "lo")

    def __init__(self, n: int):
        self.hi = np.zeros(n)
        self.lo = np.zeros(n)

    @classmethod
    def from_parts(cls, hi: np.ndarray, lo: np.ndarray) -> "DDArray":
        out = cls(hi.size)
        out.hi = np.asarray(hi, dtype=float).copy()
        out.lo = np.asarray(lo, dtype=float).copy()
        return out

    def add(self, x: np.ndarray) -> None:
        s, e = _two_sum(self.hi, x)
        self.hi, self.lo = _renorm(s, self.lo + e)

    def merge(self, other: "DDArray") -> None:
        s, e = _two_sum(self.hi, other.hi)
        self.hi, self.lo = _renorm(s, e + (self.lo + other.lo))

    def copy(self) -> "DDArray":
        return DDArray.from_parts(self.hi, self.lo)

    def value(self) -> np.ndarray:
        # hi + lo rounds the accumulated value to the nearest double.
        return self.hi + self.lo
