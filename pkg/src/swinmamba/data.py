"""Procedural vessel images, augmentation, and dataset I/O (PGM P5 / PNG)."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class VesselGenParams:
    size: int = 64
    trees: int = 3
    steps: int = 40
    step_length: float = 1.5
    momentum: float = 0.8
    turn_sigma: float = 0.35
    branch_prob: float = 0.04
    max_branches: int = 6
    w0: float = 3.0
    w1: float = 1.0
    noise_sigma: float = 0.06
    contrast: float = 0.55
    bias: float = 0.15
    background: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1 or self.trees < 1 or self.size < 2:
            raise ValueError("size, trees and steps must be positive (size >= 2)")
        if not self.w0 >= self.w1 >= 1:
            raise ValueError(f"need w0 >= w1 >= 1, got w0={self.w0}, w1={self.w1}")
        if not 0 <= self.momentum <= 1:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str = ""

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ in size")


def _paint_capsule(canvas: np.ndarray, level: np.ndarray, p, q, radius: float, value: float) -> None:
    """Mark pixels whose centres lie within ``radius`` of segment p-q."""
    h, w = canvas.shape
    r0 = max(int(math.floor(min(p[0], q[0]) - radius)), 0)
    r1 = min(int(math.ceil(max(p[0], q[0]) + radius)), h - 1)
    c0 = max(int(math.floor(min(p[1], q[1]) - radius)), 0)
    c1 = min(int(math.ceil(max(p[1], q[1]) + radius)), w - 1)
    if r0 > r1 or c0 > c1:
        return
    rr, cc = np.mgrid[r0:r1 + 1, c0:c1 + 1].astype(float)
    d = np.array(q, float) - np.array(p, float)
    seg2 = float(d @ d)
    if seg2 == 0:
        t = np.zeros_like(rr)
    else:
        t = np.clip(((rr - p[0]) * d[0] + (cc - p[1]) * d[1]) / seg2, 0, 1)
    dist2 = (rr - p[0] - t * d[0]) ** 2 + (cc - p[1] - t * d[1]) ** 2
    hit = dist2 <= radius * radius + 1e-9
    canvas[r0:r1 + 1, c0:c1 + 1] |= hit
    sub = level[r0:r1 + 1, c0:c1 + 1]
    sub[hit] = np.maximum(sub[hit], value)


def _grow_tree(rng: np.random.Generator, params: VesselGenParams, canvas, level) -> None:
    n = params.size
    side = rng.integers(4)
    along = rng.uniform(0.15, 0.85) * (n - 1)
    start, heading = {
        0: ((0.0, along), 0.0),
        1: ((n - 1.0, along), math.pi),
        2: ((along, 0.0), math.pi / 2),
        3: ((along, n - 1.0), -math.pi / 2),
    }[int(side)]
    total = params.steps * params.step_length
    # (position, heading, arc length so far)
    branches = [(start, heading + rng.normal(0, 0.3), 0.0)]
    spawned = 0
    while branches:
        pos, ang, arc = branches.pop()
        omega = 0.0
        while arc < total:
            omega = params.momentum * omega + (1 - params.momentum) * rng.normal(0, params.turn_sigma)
            ang += omega
            nxt = (pos[0] + params.step_length * math.cos(ang), pos[1] + params.step_length * math.sin(ang))
            width = params.w0 + (params.w1 - params.w0) * min(1.0, arc / total)
            _paint_capsule(canvas, level, pos, nxt, max(width / 2, 0.5), width)
            pos, arc = nxt, arc + params.step_length
            # leaving the image ends the branch, so every tree stays one 8-connected piece
            if not (0 <= pos[0] <= n - 1 and 0 <= pos[1] <= n - 1):
                break
            if spawned < params.max_branches and rng.uniform() < params.branch_prob:
                spawned += 1
                branches.append((pos, ang + rng.choice([-1, 1]) * rng.uniform(0.4, 0.9), arc))


def generate_vessels(params: VesselGenParams, ident: str = "") -> Sample:
    """Momentum-smoothed random-walk vessel trees rendered as tapered capsules."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    n = params.size
    canvas = np.zeros((n, n), dtype=bool)
    level = np.zeros((n, n))
    for _ in range(params.trees):
        _grow_tree(rng, params, canvas, level)
    # thinner vessels are fainter
    vessel = params.contrast * (0.5 + 0.5 * level / params.w0) * canvas
    rr, cc = np.mgrid[0:n, 0:n] / n
    phase = rng.uniform(0, 2 * math.pi, 2)
    illum = params.bias * 0.5 * (np.sin(2 * math.pi * rr * 0.7 + phase[0])
                                 + np.cos(2 * math.pi * cc * 0.5 + phase[1]))
    noise = rng.normal(0, params.noise_sigma, (n, n)) if params.noise_sigma > 0 else 0.0
    image = np.clip(params.background + illum + vessel + noise, 0, 1)
    return Sample(image=image, mask=canvas.astype(np.uint8), id=ident or f"vessel_{params.seed}")


def make_split(n_train: int, n_test: int, seed: int, params: VesselGenParams | None = None):
    """Seeded train/test split; sample i gets its own derived generator seed."""
    params = params or VesselGenParams()
    seeds = np.random.SeedSequence(seed).generate_state(n_train + n_test)
    samples = [generate_vessels(replace(params, seed=int(s)), ident=f"s{seed}_{i:04d}")
               for i, s in enumerate(seeds)]
    return samples[:n_train], samples[n_train:]


def augment(sample: Sample, seed: int, crop: int | None = None) -> Sample:
    """Random crop, independent h/v flips (p=0.5) and a k*90 degree rotation."""
    h, w = sample.image.shape
    crop = crop or min(h, w)
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    rng = np.random.default_rng(seed)
    r0 = int(rng.integers(h - crop + 1))
    c0 = int(rng.integers(w - crop + 1))
    flip_h, flip_v = rng.uniform() < 0.5, rng.uniform() < 0.5
    k = int(rng.integers(4))

    def apply(a):
        a = a[r0:r0 + crop, c0:c0 + crop]
        if flip_h:
            a = a[:, ::-1]
        if flip_v:
            a = a[::-1, :]
        return np.ascontiguousarray(np.rot90(a, k))

    return Sample(image=apply(sample.image), mask=apply(sample.mask), id=sample.id)


# ---------------------------------------------------------------- image files

def write_pgm(path, img8: np.ndarray) -> None:
    img8 = np.asarray(img8, dtype=np.uint8)
    h, w = img8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img8.tobytes())


def _pgm_tokens(buf: bytes):
    """Yield header tokens and the offset just past each one."""
    i = 0
    while True:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PGM header")
        yield buf[i:j], j
        i = j


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    toks = _pgm_tokens(buf)
    magic, _ = next(toks)
    if magic != b"P5":
        raise ValueError(f"{path}: not a grayscale binary PGM (magic {magic!r})")
    w = int(next(toks)[0])
    h = int(next(toks)[0])
    maxval, end = next(toks)
    if int(maxval) > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = buf[end + 1:end + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def _pil_image(path):
    try:
        from PIL import Image
    except ImportError:
        raise ValueError(f"{path}: PNG support needs Pillow (pip install 'swinmamba[png]'); "
                         "PGM works without it") from None
    return Image


def read_image8(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    Image = _pil_image(path)
    with Image.open(path) as im:
        if im.mode not in ("L", "1", "P") or (im.mode == "P" and "transparency" in im.info):
            raise ValueError(f"{path}: expected a grayscale image, got mode {im.mode}")
        if im.mode == "P":
            rgb = np.asarray(im.convert("RGB"))
            if not (rgb[..., 0] == rgb[..., 1]).all() or not (rgb[..., 1] == rgb[..., 2]).all():
                raise ValueError(f"{path}: palette image is not grayscale")
            return rgb[..., 0].copy()
        return np.asarray(im.convert("L")).copy()


def write_image8(path, img8: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, img8)
        return
    Image = _pil_image(path)
    Image.fromarray(np.asarray(img8, dtype=np.uint8), mode="L").save(path)


IMAGE_SUFFIXES = (".png", ".pgm")


def save_dataset(samples, root, fmt: str = "pgm") -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for smp in samples:
        img8 = np.round(np.clip(smp.image, 0, 1) * 255).astype(np.uint8)
        write_image8(root / "images" / f"{smp.id}.{fmt}", img8)
        write_image8(root / "masks" / f"{smp.id}.{fmt}", smp.mask.astype(np.uint8) * 255)


def _by_stem(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        return {}
    return {p.stem: p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}


def load_dataset(root) -> list[Sample]:
    """Pair ``images/*`` with ``masks/*`` by file stem, sorted by stem."""
    root = Path(root)
    images, masks = _by_stem(root / "images"), _by_stem(root / "masks")
    for stem in sorted(set(images) ^ set(masks)):
        kind = "mask" if stem in images else "image"
        raise ValueError(f"unpaired file: no {kind} for stem {stem!r}")
    out = []
    for stem in sorted(images):
        img = read_image8(images[stem])
        msk = read_image8(masks[stem])
        if img.shape != msk.shape:
            raise ValueError(f"size mismatch for {stem!r}: image {img.shape}, mask {msk.shape}")
        out.append(Sample(image=img.astype(float) / 255.0, mask=(msk >= 128).astype(np.uint8), id=stem))
    return out
