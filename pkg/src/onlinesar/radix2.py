"""Iterative radix-2 Cooley-Tukey FFT, vectorised over all other axes.

Forward transform is unnormalised; the inverse carries the 1/N factor.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


@lru_cache(maxsize=64)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.setflags(write=False)
    return rev


@lru_cache(maxsize=256)
def _twiddles(m: int, sign: int) -> np.ndarray:
    w = np.exp(sign * 2j * np.pi * np.arange(m) / (2 * m))
    w.setflags(write=False)
    return w


def _transform(x, axis: int, sign: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[axis]
    if not is_pow2(n):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    x = np.moveaxis(x, axis, -1)
    lead = x.shape[:-1]
    y = x[..., _bitrev(n)]
    m = 1
    while m < n:
        y = y.reshape(*lead, n // (2 * m), 2, m)
        even = y[..., 0, :]
        odd = y[..., 1, :] * _twiddles(m, sign)
        y = np.concatenate((even + odd, even - odd), axis=-1)
        m *= 2
    y = y.reshape(*lead, n)
    return np.moveaxis(y, -1, axis)


def fft(x, axis: int = -1) -> np.ndarray:
    return _transform(x, axis, -1)


def ifft(x, axis: int = -1) -> np.ndarray:
    n = np.shape(x)[axis]
    return _transform(x, axis, +1) / n
