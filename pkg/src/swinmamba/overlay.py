"""Raster overlays of anchor strings and window outlines for inspection."""

from __future__ import annotations

import numpy as np

from .swtoken import AnchorStrings

WINDOW = 160
ANCHOR = 255


def _line(canvas: np.ndarray, p, q, value: int) -> None:
    n = int(max(abs(q[0] - p[0]), abs(q[1] - p[1]))) + 1
    rr = np.rint(np.linspace(p[0], q[0], n)).astype(int)
    cc = np.rint(np.linspace(p[1], q[1], n)).astype(int)
    ok = (rr >= 0) & (rr < canvas.shape[0]) & (cc >= 0) & (cc < canvas.shape[1])
    canvas[rr[ok], cc[ok]] = np.maximum(canvas[rr[ok], cc[ok]], value)


def render_overlay(image: np.ndarray, strings: AnchorStrings, s: int, scale: int = 1,
                   cells=None, windows: bool = True, anchors: bool = True,
                   which=None) -> np.ndarray:
    """Darkened grayscale ``image`` with window outlines and anchor polylines.

    ``strings`` live in the coordinate frame of a feature map that is
    ``scale`` times smaller than ``image``. ``cells`` optionally restricts the
    drawing to a subset of string indices and ``which`` the outlined windows
    to a subset of positions along each string.
    """
    img = np.asarray(image, dtype=float)
    canvas = np.round(np.clip(img, 0, 1) * 100).astype(np.uint8)
    coords = strings.coords.data if hasattr(strings.coords, "data") else np.asarray(strings.coords)
    idx = range(len(coords)) if cells is None else cells
    side = (s - 1) * scale
    for i in idx:
        pts = coords[i] * scale
        outlined = pts if which is None else pts[list(which)]
        for r, c in outlined if windows else ():
            corners = [(r, c), (r, c + side), (r + side, c + side), (r + side, c), (r, c)]
            for a, b in zip(corners[:-1], corners[1:]):
                _line(canvas, a, b, WINDOW)
        if anchors:
            for a, b in zip(pts[:-1], pts[1:]):
                _line(canvas, a, b, ANCHOR)
            for r, c in pts:
                _line(canvas, (r, c), (r, c), ANCHOR)
    return canvas
