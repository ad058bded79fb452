"""Complex DFT used by the frequency-domain corruptions.

The transform is built from a radix-2 split on even lengths with a naive
matrix product at small odd base cases and a chirp-z (Bluestein) fallback
for long odd lengths, so any extent works without favoring powers of two.
Everything runs in complex128; inverses use the conjugation identity and
divide by the length.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

# Odd lengths up to this run as a direct O(n^2) matrix product; longer odd
# lengths go through Bluestein, which rides on the radix-2 path.
_NAIVE_LIMIT = 64


def _naive_last(a: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    jk = np.outer(np.arange(n), np.arange(n))
    w = np.exp((-2j * np.pi / n) * jk)
    return a @ w


def _split_last(a: np.ndarray) -> np.ndarray:
    """Forward DFT along the last axis via recursive even/odd splitting."""
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    if n % 2:
        if n <= _NAIVE_LIMIT:
            return _naive_last(a)
        return _bluestein_last(a)
    even = _split_last(a[..., 0::2])
    odd = _split_last(a[..., 1::2])
    tw = np.exp((-2j * np.pi / n) * np.arange(n // 2))
    t = tw * odd
    return np.concatenate([even + t, even - t], axis=-1)


def _bluestein_last(a: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    k = np.arange(n)
    chirp = np.exp((-1j * np.pi / n) * (k * k))
    m = 1
    while m < 2 * n - 1:
        m *= 2
    fa = np.zeros(a.shape[:-1] + (m,), dtype=np.complex128)
    fa[..., :n] = a * chirp
    fb = np.zeros(m, dtype=np.complex128)
    fb[:n] = np.conj(chirp)
    fb[m - n + 1 :] = np.conj(chirp[n - 1 : 0 : -1])
    conv = _split_last(_split_last(fa) * _split_last(fb))
    # The two forward transforms compose into m times the circular
    # convolution evaluated in reversed index order.
    out = np.empty_like(fa)
    out[..., 0] = conv[..., 0]
    out[..., 1:] = conv[..., :0:-1]
    return chirp * out[..., :n] / m


def dft(a: np.ndarray, axis: int = -1, inverse: bool = False) -> np.ndarray:
    """DFT of `a` along one axis; complex128 output of the same shape."""
    a = np.asarray(a)
    if a.ndim == 0:
        raise ShapeError("dft input must have at least one axis")
    x = np.moveaxis(np.asarray(a, dtype=np.complex128), axis, -1)
    if inverse:
        y = np.conj(_split_last(np.conj(x))) / x.shape[-1]
    else:
        y = _split_last(x)
    return np.moveaxis(y, -1, axis)


def dft3(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """DFT along the last three axes (any leading batch axes untouched)."""
    a = np.asarray(a)
    if a.ndim < 3:
        raise ShapeError(f"dft3 input needs 3 axes, got shape {a.shape}")
    out = np.asarray(a, dtype=np.complex128)
    for axis in (-3, -2, -1):
        out = dft(out, axis=axis, inverse=inverse)
    return out
