import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from onlinesar.radix2 import fft, ifft, is_pow2, next_pow2


def naive_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.array([np.sum(x * np.exp(-2j * np.pi * f * k / n)) for f in range(n)])


def test_trivial_transforms():
    d = np.zeros(16)
    d[0] = 1
    assert np.allclose(fft(d), np.ones(16))
    c = fft(np.full(8, 3 - 1j))
    assert np.isclose(c[0], 8 * (3 - 1j)) and np.allclose(c[1:], 0)


def test_against_direct_dft(rng):
    x = rng.standard_normal(64) + 1j * rng.standard_normal(64)
    assert np.max(np.abs(fft(x) - naive_dft(x))) < 1e-4


@given(st.integers(0, 9), st.integers(0, 2**31))
def test_inverse_and_parseval(p, seed):
    n = 1 << p
    r = np.random.default_rng(seed)
    x = r.standard_normal(n) + 1j * r.standard_normal(n)
    X = fft(x)
    assert np.allclose(ifft(X), x, rtol=1e-5, atol=1e-9)
    assert np.isclose(np.sum(np.abs(X) ** 2) / n, np.sum(np.abs(x) ** 2), rtol=1e-5)


def test_axis_handling(rng):
    x = rng.standard_normal((4, 8, 2))
    assert np.allclose(fft(x, axis=1), np.stack([[naive_dft(x[i, :, j]) for j in range(2)] for i in range(4)], 0).transpose(0, 2, 1))


def test_non_power_of_two_rejected():
    with pytest.raises(ValueError):
        fft(np.zeros(12))
    assert is_pow2(1) and is_pow2(1024) and not is_pow2(0) and not is_pow2(12)
    assert [next_pow2(n) for n in (1, 2, 3, 972, 1024)] == [1, 2, 4, 1024, 1024]
