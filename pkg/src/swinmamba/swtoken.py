"""Serpentine window tokenizer.

Coordinates are (row, col) = (x, y) throughout. A window's anchor is its
minimum corner; window tokens are sampled at (x_l + m, y_l + n).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

X_EXTEND = "x"
Y_EXTEND = "y"


@dataclass(frozen=True)
class TokenizerConfig:
    L: int = 9
    s: int = 8
    alpha: float = 2.0
    orientation: str = X_EXTEND

    def __post_init__(self):
        if self.L < 1 or self.L % 2 == 0:
            raise ValueError(f"string length L must be odd and positive, got {self.L}")
        if self.s < 1:
            raise ValueError(f"window size s must be positive, got {self.s}")
        if self.orientation not in (X_EXTEND, Y_EXTEND):
            raise ValueError(f"orientation must be 'x' or 'y', got {self.orientation!r}")

    @property
    def c(self) -> int:
        return self.L // 2

    @property
    def tokens_per_string(self) -> int:
        return self.L * self.s * self.s


@dataclass
class AnchorString:
    cell: tuple[int, int]
    anchors: np.ndarray  # (L, 2)
    orientation: str


@dataclass
class WindowSequence:
    cell: tuple[int, int]
    tokens: np.ndarray  # (L, s*s, C)
    coords: np.ndarray  # (L, s*s, 2)


@dataclass
class AnchorStrings:
    """All strings of one feature map, batched over grid cells (row-major)."""

    cells: np.ndarray  # (n_cells, 2) grid indices
    coords: Tensor  # (n_cells, L, 2)
    orientation: str

    def __len__(self):
        return len(self.cells)

    def strings(self) -> list[AnchorString]:
        return [AnchorString(tuple(int(v) for v in cell), self.coords.data[i].copy(), self.orientation)
                for i, cell in enumerate(self.cells)]


@dataclass
class WindowTokens:
    """Sampled windows for every string: tokens (n_cells, L, s*s, C)."""

    cells: np.ndarray
    tokens: Tensor
    coords: Tensor  # (n_cells, L, s*s, 2)

    def sequences(self) -> list[WindowSequence]:
        return [WindowSequence(tuple(int(v) for v in cell), self.tokens.data[i], self.coords.data[i])
                for i, cell in enumerate(self.cells)]


def check_divisible(H: int, W: int, s: int) -> None:
    if H % s or W % s:
        raise ValueError(f"window size {s} must divide both H={H} and W={W}")


def anchor_grid(H: int, W: int, config: TokenizerConfig) -> np.ndarray:
    """Central anchors (h*s, w*s) for every grid cell, row-major, shape (n_cells, 2)."""
    s = config.s
    check_divisible(H, W, s)
    hh, ww = np.meshgrid(np.arange(H // s), np.arange(W // s), indexing="ij")
    return np.stack([hh.ravel() * s, ww.ravel() * s], axis=1).astype(float)


def grid_cells(H: int, W: int, s: int) -> np.ndarray:
    hh, ww = np.meshgrid(np.arange(H // s), np.arange(W // s), indexing="ij")
    return np.stack([hh.ravel(), ww.ravel()], axis=1)


def predict_offsets(F: Tensor, weight: Tensor, bias: Tensor | None, config: TokenizerConfig) -> Tensor:
    """Per-position offsets in (-1, 1), shape (L, H/s, W/s): tanh of a stride-s conv."""
    check_divisible(F.shape[-2], F.shape[-1], config.s)
    return T.tanh(T.conv2d(F, weight, bias, stride=config.s))


def extend_anchors(centers: np.ndarray, offsets: Tensor | None, config: TokenizerConfig) -> AnchorStrings:
    """Grow each center into L anchors by cumulative offsets.

    Along the extension axis anchors sit at alpha*(l - c) from the center.
    Laterally, anchor c+i moves by alpha * sum_{k=c}^{c+i} offsets_k and
    anchor c-i by alpha * sum_{k=c-i}^{c} offsets_k; anchor c is fixed.
    ``offsets=None`` means all-zero offsets (straight strings).
    """
    L, c, alpha = config.L, config.c, float(config.alpha)
    centers = np.asarray(centers, dtype=float)
    n = len(centers)
    dtype = T.get_default_dtype()
    along = Tensor(centers[:, 0 if config.orientation == X_EXTEND else 1][:, None]
                   + alpha * (np.arange(L) - c)[None, :], dtype=dtype)
    lat_center = Tensor(centers[:, 1 if config.orientation == X_EXTEND else 0][:, None], dtype=dtype)
    if offsets is None:
        lateral = T.broadcast_to(lat_center, (n, L))
    else:
        if offsets.shape[0] != L or offsets.shape[1] * offsets.shape[2] != n:
            raise ValueError(f"offsets {offsets.shape} do not match {n} cells with L={L}")
        steps = T.transpose(T.reshape(offsets, (L, n)), (1, 0)) * alpha  # (n, L)
        fwd = T.cumulative_sum(T.narrow(steps, 1, c, L), axis=1)  # sum_{k=c}^{c+i}
        bwd = T.cumulative_sum(T.flip(T.narrow(steps, 1, 0, c + 1), 1), axis=1)  # sum_{k=c-i}^{c}
        parts = []
        if c > 0:
            parts.append(T.flip(T.narrow(bwd, 1, 1, c + 1), 1))
        parts.append(Tensor(np.zeros((n, 1)), dtype=dtype))
        if c > 0:
            parts.append(T.narrow(fwd, 1, 1, c + 1))
        lateral = lat_center + T.concat(parts, axis=1)
    pair = (along, lateral) if config.orientation == X_EXTEND else (lateral, along)
    coords = T.stack(pair, axis=2)
    cells = np.floor_divide(centers, config.s).astype(np.int64)
    return AnchorStrings(cells=cells, coords=coords, orientation=config.orientation)


def window_offsets(s: int) -> np.ndarray:
    """Relative (m, n) offsets in row-major order, shape (s*s, 2)."""
    m, n = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    return np.stack([m.ravel(), n.ravel()], axis=1).astype(float)


def sample_windows(F: Tensor, strings: AnchorStrings, config: TokenizerConfig) -> WindowTokens:
    """Bilinearly sample an s x s window at every anchor of every string."""
    C = F.shape[0]
    s2 = config.s * config.s
    n, L = strings.coords.shape[:2]
    rel = Tensor(window_offsets(config.s)[None, None], dtype=F.dtype)  # (1, 1, s2, 2)
    coords = T.reshape(strings.coords, (n, L, 1, 2)) + rel  # (n, L, s2, 2)
    flat = T.bilinear_sample(F, T.reshape(coords, (n * L * s2, 2)))  # (C, P)
    tokens = T.transpose(T.reshape(flat, (C, n, L, s2)), (1, 2, 3, 0))
    return WindowTokens(cells=strings.cells, tokens=tokens, coords=coords)


class SWToken:
    """Offset predictor plus tokenizer for one feature map size class.

    With ``learn_offsets`` off the strings are straight (offsets identically 0)
    and no offset parameters exist.
    """

    def __init__(self, channels: int, config: TokenizerConfig, rng: np.random.Generator,
                 learn_offsets: bool = True):
        self.config = config
        self.learn_offsets = learn_offsets
        self.params: dict[str, Tensor] = {}
        if learn_offsets:
            s = config.s
            bound = 1.0 / np.sqrt(channels * s * s)
            self.params["off.w"] = Tensor(rng.uniform(-bound, bound, (config.L, channels, s, s)),
                                          requires_grad=True)
            self.params["off.b"] = Tensor(np.zeros(config.L), requires_grad=True)

    def strings(self, F: Tensor) -> AnchorStrings:
        H, W = F.shape[-2:]
        centers = anchor_grid(H, W, self.config)
        offsets = None
        if self.learn_offsets:
            offsets = predict_offsets(F, self.params["off.w"], self.params["off.b"], self.config)
        return extend_anchors(centers, offsets, self.config)

    def __call__(self, F: Tensor) -> WindowTokens:
        return sample_windows(F, self.strings(F), self.config)
