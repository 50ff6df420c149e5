"""Frequency-domain window branch and patch-wise CBAM-gated fusion."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .fft import fft2 as _complex_fft2
from .tensor import Tensor


def window_fft(tokens: Tensor, s: int, inverse: bool = False) -> Tensor:
    """Per-window, per-channel 2-D DFT of the s x s token grid.

    Forward: (..., s*s, C) real tokens -> (..., s*s, 2C) with real parts in
    channels [0, C) and imaginary parts in [C, 2C). Inverse undoes this and
    keeps only the real part of the reconstruction.
    """
    lead = tokens.shape[:-2]
    nlead = len(lead)
    ch = tokens.shape[-1]
    if tokens.shape[-2] != s * s:
        raise ValueError(f"expected {s * s} tokens per window, got {tokens.shape[-2]}")
    to_planes = tuple(range(nlead)) + (nlead + 2, nlead, nlead + 1)  # (..., C, s, s)
    from_planes = tuple(range(nlead)) + (nlead + 1, nlead + 2, nlead)
    if not inverse:
        planes = T.transpose(T.reshape(tokens, lead + (s, s, ch)), to_planes)
        pair = T.stack([planes, Tensor(np.zeros(planes.shape), dtype=tokens.dtype)], axis=0)
        spec = T.fft2(pair)
        re = T.transpose(spec[0], from_planes)
        im = T.transpose(spec[1], from_planes)
        return T.reshape(T.concat([re, im], axis=-1), lead + (s * s, 2 * ch))
    if ch % 2:
        raise ValueError(f"inverse window FFT needs an even channel count, got {ch}")
    c = ch // 2
    grid = T.reshape(tokens, lead + (s, s, ch))
    re = T.transpose(T.narrow(grid, -1, 0, c), to_planes)
    im = T.transpose(T.narrow(grid, -1, c, ch), to_planes)
    back = T.fft2(T.stack([re, im], axis=0), inverse=True)
    real = T.transpose(back[0], from_planes)
    return T.reshape(real, lead + (s * s, c))


def imaginary_residue(tokens: Tensor, s: int) -> float:
    """Largest |imag| left by the inverse window FFT (debug statistic)."""
    lead = tokens.shape[:-2]
    c = tokens.shape[-1] // 2
    grid = tokens.data.reshape(lead + (s, s, 2 * c))
    z = np.moveaxis(grid[..., :c] + 1j * grid[..., c:], -1, -3)
    return float(np.abs(_complex_fft2(z, inverse=True).imag).max(initial=0.0))


def to_patches(F: Tensor, s: int) -> Tensor:
    """(C, H, W) -> (n_cells, C, s, s), cells row-major."""
    C, H, W = F.shape
    if H % s or W % s:
        raise ValueError(f"window size {s} must divide both H={H} and W={W}")
    grid = T.reshape(F, (C, H // s, s, W // s, s))
    return T.reshape(T.transpose(grid, (1, 3, 0, 2, 4)), ((H // s) * (W // s), C, s, s))


def from_patches(P: Tensor, H: int, W: int) -> Tensor:
    n, C, s, _ = P.shape
    grid = T.reshape(P, (H // s, W // s, C, s, s))
    return T.reshape(T.transpose(grid, (2, 0, 3, 1, 4)), (C, H, W))


class CBAMAttention:
    """Channel and spatial attention applied independently to every s x s patch."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4, kernel: int = 7):
        if channels < reduction:
            raise ValueError(f"channels {channels} smaller than reduction ratio {reduction}")
        hidden = channels // reduction
        self.kernel = kernel

        def uniform(fan_in, shape):
            b = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-b, b, shape), requires_grad=True)

        self.params = {
            "ca.w1": uniform(channels, (channels, hidden)),
            "ca.w2": uniform(hidden, (hidden, channels)),
            "sa.w": uniform(2 * kernel * kernel, (1, 2, kernel, kernel)),
        }


def channel_attention(patch: Tensor, params: dict) -> Tensor:
    """sigmoid(MLP(avgpool) + MLP(maxpool)) over the trailing s x s extent.

    patch: (C, s, s) -> (C, 1, 1), or batched (n, C, s, s) -> (n, C, 1, 1).
    """
    w1, w2 = params["ca.w1"], params["ca.w2"]
    if patch.shape[-3] < w1.shape[1] or w1.shape[1] == 0:
        raise ValueError("channel count smaller than the reduction ratio")
    avg = T.mean(patch, axis=(-2, -1))
    mx = T.tmax(patch, axis=(-2, -1))

    def mlp(v):
        v2 = T.reshape(v, (-1, v.shape[-1]))
        return T.matmul(T.relu(T.matmul(v2, w1)), w2)

    att = T.sigmoid(mlp(avg) + mlp(mx))
    return T.reshape(att, patch.shape[:-2] + (1, 1))


def spatial_attention(patch: Tensor, params: dict) -> Tensor:
    """sigmoid(conv(concat(channel-mean, channel-max))) with size-preserving padding.

    patch: (C, s, s) -> (1, s, s), or batched (n, C, s, s) -> (n, 1, s, s).
    """
    w = params["sa.w"]
    k = w.shape[-1]
    avg = T.mean(patch, axis=-3, keepdims=True)
    mx = T.tmax(patch, axis=-3, keepdims=True)
    return T.sigmoid(T.conv2d(T.concat([avg, mx], axis=-3), w, padding=k // 2))


def attention_map(F_spa: Tensor, params: dict, s: int) -> Tensor:
    """SA * CA per non-overlapping s x s patch of F_spa, reassembled to (C, H, W)."""
    C, H, W = F_spa.shape
    patches = to_patches(F_spa, s)
    attn = spatial_attention(patches, params) * channel_attention(patches, params)
    return from_patches(attn, H, W)


def fuse(F_spa: Tensor, F_fre: Tensor, params: dict, s: int, attn: Tensor | None = None) -> Tensor:
    """attn * F_spa + (1 - attn) * F_fre with attn computed from F_spa only."""
    if F_spa.shape != F_fre.shape:
        raise ValueError(f"fuse needs equal shapes, got {F_spa.shape} and {F_fre.shape}")
    if attn is None:
        attn = attention_map(F_spa, params, s)
    return attn * F_spa + (1.0 - attn) * F_fre
