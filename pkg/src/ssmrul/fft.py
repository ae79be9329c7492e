"""FFT-based causal convolution on raw numpy arrays.

Two interchangeable transforms are available: numpy's pocketfft (default,
fast) and a vectorised iterative radix-2 FFT written here. Padding always goes
to the next power of two >= 2L-1, so for a fixed length and backend the
sequence of floating point operations is fixed and results are bit-for-bit
reproducible.
"""

from __future__ import annotations

from contextlib import contextmanager
from functools import lru_cache

import numpy as np

BACKENDS = ("numpy", "radix2")
_backend = "numpy"


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown FFT backend {name!r}; expected one of {BACKENDS}")
    _backend = name


@contextmanager
def use_backend(name: str):
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def next_pow2(n: int) -> int:
    if n < 1:
        raise ValueError(f"length must be >= 1, got {n}")
    return 1 << (n - 1).bit_length()


def conv_fft_size(L: int) -> int:
    """FFT size used to convolve two length-L signals without wrap-around."""
    return next_pow2(2 * L - 1)


@lru_cache(maxsize=None)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(n: int) -> np.ndarray:
    # exp(-2 pi i k / n) for k < n/2, built from cos/sin so each entry is
    # individually rounded rather than accumulated
    k = np.arange(n // 2)
    ang = -2.0 * np.pi * k / n
    return np.cos(ang) + 1j * np.sin(ang)


def fft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Radix-2 decimation-in-time FFT along the last axis.

    The last axis length must be a power of two. ``inverse=True`` computes the
    inverse transform including the 1/n normalisation.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    if n & (n - 1) or n == 0:
        raise ValueError(f"FFT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    y = x[..., _bit_reversal(n)].astype(np.complex128)
    tw = _twiddles(n)
    if inverse:
        tw = np.conj(tw)
    size = 2
    while size <= n:
        half = size // 2
        w = tw[:: n // size]
        y = y.reshape(*lead, n // size, size)
        even = y[..., :half]
        odd = y[..., half:] * w
        y = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    y = y.reshape(*lead, n)
    if inverse:
        y = y / n
    return y


def causal_conv(u: np.ndarray, k: np.ndarray) -> np.ndarray:
    """y[..., t] = sum_{j<=t} k[..., j] u[..., t-j], via zero-padded FFT.

    Leading axes broadcast. Real inputs give a real result; if either input
    is complex the result stays complex.
    """
    u = np.asarray(u)
    k = np.asarray(k)
    L = u.shape[-1]
    if k.shape[-1] != L:
        raise ValueError(f"kernel length {k.shape[-1]} != signal length {L}")
    n = conv_fft_size(L)
    real = not (np.iscomplexobj(u) or np.iscomplexobj(k))
    if _backend == "numpy":
        if real:
            return np.fft.irfft(np.fft.rfft(u, n) * np.fft.rfft(k, n), n)[..., :L]
        return np.fft.ifft(np.fft.fft(u, n) * np.fft.fft(k, n), n)[..., :L]
    pad_u = np.zeros(u.shape[:-1] + (n,), dtype=np.result_type(u, np.float64))
    pad_u[..., :L] = u
    pad_k = np.zeros(k.shape[:-1] + (n,), dtype=np.result_type(k, np.float64))
    pad_k[..., :L] = k
    y = fft(fft(pad_u) * fft(pad_k), inverse=True)[..., :L]
    if real:
        return np.ascontiguousarray(y.real)
    return y


def direct_causal_conv(u: np.ndarray, k: np.ndarray) -> np.ndarray:
    """O(L^2) reference implementation of :func:`causal_conv`."""
    u = np.asarray(u)
    k = np.asarray(k)
    L = u.shape[-1]
    shape = np.broadcast_shapes(u.shape, k.shape)
    y = np.zeros(shape, dtype=np.result_type(u, k, np.float64))
    for t in range(L):
        for j in range(t + 1):
            y[..., t] += k[..., j] * u[..., t - j]
    return y
