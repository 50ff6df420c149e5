"""Iterative radix-2 Cooley-Tukey FFT on numpy complex arrays."""

import numpy as np


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_last_axis(z: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalized DFT along the last axis (conjugate twiddles when ``inverse``)."""
    n = z.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"FFT extent must be a power of two, got {n}")
    z = np.asarray(z, dtype=np.complex128)[..., _bit_reverse_indices(n)]
    lead = z.shape[:-1]
    sign = 1.0 if inverse else -1.0
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / m)
        blocks = z.reshape(lead + (n // m, m))
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        z = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        m *= 2
    return z


def fft2(z: np.ndarray, inverse: bool = False) -> np.ndarray:
    """2-D DFT over the trailing two axes, rows then columns.

    The inverse carries the 1/(n*m) normalization; the forward is unnormalized.
    """
    out = fft_last_axis(z, inverse)
    out = np.swapaxes(fft_last_axis(np.swapaxes(out, -1, -2), inverse), -1, -2)
    if inverse:
        out = out / (z.shape[-1] * z.shape[-2])
    return out
