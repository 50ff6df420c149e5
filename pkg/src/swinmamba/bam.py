"""Bidirectional aggregation over window sequences with selective SSM mixers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class MixerConfig:
    state_dim: int = 8  # N
    expand: int = 2  # E
    conv_width: int = 4  # k_conv
    dt_min: float = 1e-3
    dt_max: float = 1e-1


def arrange_sequence(window: np.ndarray) -> np.ndarray:
    """Row-major (s, s, C) window -> (s*s, C) token sequence."""
    window = np.asarray(window)
    if window.ndim != 3 or window.shape[0] != window.shape[1]:
        raise ValueError(f"expected a complete (s, s, C) window, got {window.shape}")
    return window.reshape(window.shape[0] * window.shape[1], window.shape[2])


def unarrange_sequence(seq: np.ndarray, s: int) -> np.ndarray:
    seq = np.asarray(seq)
    if seq.shape[0] != s * s:
        raise ValueError(f"sequence of {seq.shape[0]} tokens is not an {s}x{s} window")
    return seq.reshape(s, s, -1)


def ssm_scan(x: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, D: Tensor | None = None) -> Tensor:
    """Selective scan with optional skip: y_t = <C_t, h_t> + D * x_t."""
    y = T.selective_scan(x, delta, A, Bm, Cm)
    if D is not None:
        y = y + x * D
    return y


class MambaMixer:
    """In-projection, causal depthwise conv, SiLU, selective scan, SiLU gate, out-projection.

    Operates on (batch, T, C) sequences and is causal along T.
    """

    def __init__(self, dim: int, config: MixerConfig, rng: np.random.Generator):
        self.dim = dim
        self.config = config
        d_inner = config.expand * dim
        n = config.state_dim
        self.dt_rank = math.ceil(dim / 16)
        self.d_inner = d_inner

        def uniform(fan_in, shape):
            b = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-b, b, shape), requires_grad=True)

        dt = np.exp(rng.uniform(math.log(config.dt_min), math.log(config.dt_max), d_inner))
        self.params = {
            "in_w": uniform(dim, (dim, 2 * d_inner)),
            "conv_w": uniform(config.conv_width, (config.conv_width, d_inner)),
            "conv_b": Tensor(np.zeros(d_inner), requires_grad=True),
            "x_w": uniform(d_inner, (d_inner, self.dt_rank + 2 * n)),
            "dt_w": uniform(self.dt_rank, (self.dt_rank, d_inner)),
            # inverse softplus so the initial step sizes land in [dt_min, dt_max]
            "dt_b": Tensor(dt + np.log(-np.expm1(-dt)), requires_grad=True),
            "A_log": Tensor(np.log(np.tile(np.arange(1, n + 1, dtype=float), (d_inner, 1))),
                            requires_grad=True),
            "D": Tensor(np.ones(d_inner), requires_grad=True),
            "out_w": uniform(d_inner, (d_inner, dim)),
        }

    def causal_conv(self, u: Tensor) -> Tensor:
        p = self.params
        k = self.config.conv_width
        nb, nt, nd = u.shape
        padded = T.concat([Tensor(np.zeros((nb, k - 1, nd)), dtype=u.dtype), u], axis=1)
        out = p["conv_b"]
        for j in range(k):
            out = out + T.narrow(padded, 1, j, j + nt) * T.narrow(p["conv_w"], 0, j, j + 1)
        return out

    def __call__(self, seq: Tensor) -> Tensor:
        p = self.params
        di, n, r = self.d_inner, self.config.state_dim, self.dt_rank
        xz = T.matmul(seq, p["in_w"])
        u = T.silu(self.causal_conv(T.narrow(xz, 2, 0, di)))
        gate = T.silu(T.narrow(xz, 2, di, 2 * di))
        proj = T.matmul(u, p["x_w"])
        delta = T.softplus(T.matmul(T.narrow(proj, 2, 0, r), p["dt_w"]) + p["dt_b"])
        Bm = T.narrow(proj, 2, r, r + n)
        Cm = T.narrow(proj, 2, r + n, r + 2 * n)
        A = -T.exp(p["A_log"])
        y = ssm_scan(u, delta, A, Bm, Cm, p["D"])
        return T.matmul(y * gate, p["out_w"])


def reverse(seq: Tensor) -> Tensor:
    return T.flip(seq, 1)


def bidirectional_aggregate(tokens: Tensor, mix_f: Callable[[Tensor], Tensor],
                            mix_b: Callable[[Tensor], Tensor]) -> Tensor:
    """Fuse a forward scan over windows 0..c with a backward scan over c..L-1.

    tokens: (n_cells, L, s*s, C) with windows already in row-major token order.
    Returns (n_cells, s*s, C), aligned to the center window's positions.
    """
    n, L, s2, C = tokens.shape
    if L % 2 == 0:
        raise ValueError(f"window count must be odd, got {L}")
    c = L // 2
    seq_f = T.reshape(T.narrow(tokens, 1, 0, c + 1), (n, (c + 1) * s2, C))
    seq_b = T.reshape(T.narrow(tokens, 1, c, L), (n, (L - c) * s2, C))
    out_f = mix_f(seq_f)
    out_b = mix_b(reverse(seq_b))
    last_f = T.narrow(out_f, 1, out_f.shape[1] - s2, out_f.shape[1])
    last_b = T.narrow(out_b, 1, out_b.shape[1] - s2, out_b.shape[1])
    return last_f + reverse(last_b)


def scatter_patches(outputs: Tensor, H: int, W: int, s: int) -> Tensor:
    """(n_cells, s*s, C) row-major cell outputs -> (C, H, W) feature map."""
    nh, nw = H // s, W // s
    if H % s or W % s:
        raise ValueError(f"window size {s} must divide both H={H} and W={W}")
    if outputs.shape[0] != nh * nw or outputs.shape[1] != s * s:
        raise ValueError(f"expected {nh * nw} cell outputs of {s * s} tokens, got {outputs.shape}")
    C = outputs.shape[2]
    grid = T.reshape(outputs, (nh, nw, s, s, C))
    return T.reshape(T.transpose(grid, (4, 0, 2, 1, 3)), (C, H, W))


def gather_patches(F: Tensor, s: int) -> Tensor:
    """(C, H, W) -> (n_cells, s*s, C); inverse of ``scatter_patches``."""
    C, H, W = F.shape
    grid = T.reshape(F, (C, H // s, s, W // s, s))
    return T.reshape(T.transpose(grid, (1, 3, 2, 4, 0)), ((H // s) * (W // s), s * s, C))


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.params = {"g": Tensor(np.ones(dim), requires_grad=True),
                       "b": Tensor(np.zeros(dim), requires_grad=True)}

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.mean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = T.mean(xc * xc, axis=-1, keepdims=True)
        return xc * T.power(var + self.eps, -0.5) * self.params["g"] + self.params["b"]


class BAM:
    """Two direction-specific mixers (no shared parameters) around one window batch."""

    def __init__(self, dim: int, config: MixerConfig, rng: np.random.Generator):
        self.fwd = MambaMixer(dim, config, rng)
        self.bwd = MambaMixer(dim, config, rng)

    @property
    def params(self) -> dict[str, Tensor]:
        out = {f"f.{k}": v for k, v in self.fwd.params.items()}
        out.update({f"b.{k}": v for k, v in self.bwd.params.items()})
        return out

    def __call__(self, tokens: Tensor) -> Tensor:
        return bidirectional_aggregate(tokens, self.fwd, self.bwd)
