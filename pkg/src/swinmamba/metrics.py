"""Dice, centerline Dice and Betti-0 error for binary masks (8-connectivity)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be strictly binary")
    return m.astype(bool)


def _pair(P, G):
    P, G = as_mask(P), as_mask(G)
    if P.shape != G.shape:
        raise ValueError(f"mask extents differ: {P.shape} vs {G.shape}")
    return P, G


def dice(P, G) -> float:
    P, G = _pair(P, G)
    total = P.sum() + G.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(P, G).sum() / total)


def _neighbours(img: np.ndarray) -> list[np.ndarray]:
    """P2..P9 clockwise from north for every pixel of a zero-padded image."""
    p = np.pad(img, 1)
    h, w = img.shape
    at = lambda dr, dc: p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
    return [at(-1, 0), at(-1, 1), at(0, 1), at(1, 1), at(1, 0), at(1, -1), at(0, -1), at(-1, -1)]


def _deletable(img: np.ndarray, first: bool) -> np.ndarray:
    nb = [n.astype(np.int8) for n in _neighbours(img)]
    p2, p3, p4, p5, p6, p7, p8, p9 = nb
    count = sum(nb)
    seq = nb + [p2]
    transitions = sum(((seq[i] == 0) & (seq[i + 1] == 1)).astype(np.int8) for i in range(8))
    if first:
        c3 = (p2 * p4 * p6) == 0
        c4 = (p4 * p6 * p8) == 0
    else:
        c3 = (p2 * p4 * p8) == 0
        c4 = (p2 * p6 * p8) == 0
    return img & (count >= 2) & (count <= 6) & (transitions == 1) & c3 & c4


def skeletonize(M) -> np.ndarray:
    """Zhang-Suen thinning; pixels outside the image count as background."""
    img = as_mask(M).copy()
    while True:
        changed = False
        for first in (True, False):
            kill = _deletable(img, first)
            if kill.any():
                img &= ~kill
                changed = True
        if not changed:
            return img.astype(np.uint8)


def cldice(P, G) -> float:
    P, G = _pair(P, G)
    sp, sg = skeletonize(P).astype(bool), skeletonize(G).astype(bool)
    tprec = float(np.logical_and(sp, G).sum() / sp.sum()) if sp.any() else 0.0
    tsens = float(np.logical_and(sg, P).sum() / sg.sum()) if sg.any() else 0.0
    if tprec + tsens == 0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1


def count_components(M) -> int:
    """Number of 8-connected foreground components."""
    m = as_mask(M)
    h, w = m.shape
    uf = UnionFind(h * w)
    rows, cols = np.nonzero(m)
    for r, c in zip(rows.tolist(), cols.tolist()):
        # previously visited neighbours in raster order
        for dr, dc in ((-1, -1), (-1, 0), (-1, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and m[rr, cc]:
                uf.union(r * w + c, rr * w + cc)
    return len({uf.find(r * w + c) for r, c in zip(rows.tolist(), cols.tolist())})


def betti0_error(P, G) -> float:
    P, G = _pair(P, G)
    return float(abs(count_components(P) - count_components(G)))


@dataclass
class MetricsReport:
    dice: list[float] = field(default_factory=list)
    cldice: list[float] = field(default_factory=list)
    betti0_error: list[float] = field(default_factory=list)
    ids: list[str] = field(default_factory=list)

    def add(self, P, G, ident: str = "") -> None:
        self.dice.append(dice(P, G))
        self.cldice.append(cldice(P, G))
        self.betti0_error.append(betti0_error(P, G))
        self.ids.append(ident or str(len(self.ids)))

    def means(self) -> dict[str, float]:
        if not self.ids:
            return {"dice": float("nan"), "cldice": float("nan"), "betti0_error": float("nan")}
        return {"dice": float(np.mean(self.dice)), "cldice": float(np.mean(self.cldice)),
                "betti0_error": float(np.mean(self.betti0_error))}

    def lines(self) -> list[str]:
        out = [f"{i} dice={d:.6f} cldice={c:.6f} betti0_error={b:.6f}"
               for i, d, c, b in zip(self.ids, self.dice, self.cldice, self.betti0_error)]
        m = self.means()
        out.append(f"mean dice={m['dice']:.6f} cldice={m['cldice']:.6f} "
                   f"betti0_error={m['betti0_error']:.6f} n={len(self.ids)}")
        return out

    def summary(self) -> str:
        """key = value block, one metric per line."""
        m = self.means()
        return "".join(f"{k} = {v!r}\n" for k, v in
                       [("n", len(self.ids)), ("dice", m["dice"]), ("cldice", m["cldice"]),
                        ("betti0_error", m["betti0_error"])])

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.summary())
