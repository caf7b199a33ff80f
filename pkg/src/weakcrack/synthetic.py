"""Synthetic road-surface corpus with ground-truth crack masks.

Images are multi-octave value noise (asphalt-like texture, occasional darker
blotches); crack images additionally carry a dark quadratic Bezier stroke of
1-3 px width. Ground truth is the exact stroke support, so pixel metrics on
this corpus are noise-free. Everything is deterministic in the seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Bilinear-interpolated random grid, values in [0,1], shape (size,size)."""
    grid = rng.random((cells + 1, cells + 1))
    xs = np.linspace(0.0, cells, size)
    i0 = np.floor(xs).astype(int)
    i0 = np.minimum(i0, cells - 1)
    t = xs - i0
    rows = grid[i0][:, i0]  # (size,size) corner lookups
    r10 = grid[i0 + 1][:, i0]
    r01 = grid[i0][:, i0 + 1]
    r11 = grid[i0 + 1][:, i0 + 1]
    ty = t[:, None]
    tx = t[None, :]
    return (rows * (1 - ty) * (1 - tx) + r10 * ty * (1 - tx)
            + r01 * (1 - ty) * tx + r11 * ty * tx)


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    base = 0.46 + 0.16 * rng.random()
    tex = np.full((size, size), base)
    amp = 0.10
    for cells in (4, 8, 16):
        tex = tex + amp * (value_noise(rng, size, cells) - 0.5)
        amp *= 0.55
    tex = tex + 0.015 * rng.standard_normal((size, size))
    # a few soft dark blotches; round, unlike cracks
    for _ in range(rng.integers(0, 3)):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(4.0, 9.0)
        depth = rng.uniform(0.04, 0.10)
        yy, xx = np.mgrid[0:size, 0:size]
        tex = tex - depth * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    img = np.stack([tex, tex, tex], axis=-1)
    img = img + rng.uniform(-0.02, 0.02, size=3)  # slight tint
    return np.clip(img, 0.0, 1.0)


def _bezier(rng: np.random.Generator, size: int) -> np.ndarray:
    """Dense (x,y) samples of a quadratic Bezier crossing the image."""
    side = rng.integers(0, 2)  # 0: left->right, 1: top->bottom
    a = rng.uniform(0.1, 0.9, 2) * size
    b = rng.uniform(0.1, 0.9, 2) * size
    if side == 0:
        p0 = np.array([0.0, a[0]])
        p2 = np.array([size - 1.0, b[0]])
    else:
        p0 = np.array([a[0], 0.0])
        p2 = np.array([b[0], size - 1.0])
    p1 = np.array([rng.uniform(0.2, 0.8) * size, rng.uniform(0.2, 0.8) * size])
    t = np.linspace(0.0, 1.0, 4 * size)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
    return pts  # (M,2) as (x,y)


def _stroke(rng: np.random.Generator, size: int, width: float):
    """Distance field to a random Bezier polyline and its binary support."""
    pts = _bezier(rng, size)
    yy, xx = np.mgrid[0:size, 0:size]
    # brute-force point-set distance; fine at corpus scale
    d2 = np.full((size, size), np.inf)
    for k in range(0, pts.shape[0], 64):
        chunk = pts[k:k + 64]
        dx = xx[..., None] - chunk[None, None, :, 0]
        dy = yy[..., None] - chunk[None, None, :, 1]
        d2 = np.minimum(d2, (dx * dx + dy * dy).min(axis=-1))
    dist = np.sqrt(d2)
    return dist, (dist <= width / 2.0).astype(np.uint8)


def make_road(rng: np.random.Generator, size: int) -> np.ndarray:
    return _texture(rng, size)


def make_crack(rng: np.random.Generator, size: int):
    img = _texture(rng, size)
    width = rng.uniform(1.0, 3.0)
    dist, mask = _stroke(rng, size, width)
    depth = rng.uniform(0.75, 0.95)
    # sharp falloff: the visibly dark pixels coincide with the labeled
    # support, so pixel metrics measure localization, not halo guessing
    atten = depth * np.exp(-((dist / (0.45 * width)) ** 2))
    img = img * (1.0 - atten[..., None])
    return np.clip(img, 0.0, 1.0), mask


def _save(img: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((img * 255.0 + 0.5).astype(np.uint8)).save(path)


def generate_corpus(root, n_train: int = 200, n_test: int = 50,
                    size: int = 64, seed: int = 0) -> dict:
    """Write a train/test corpus under root; test split also gets GT masks."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    counts = {}
    for split, n in (("train", n_train), ("test", n_test)):
        n_crack = n - n // 2
        n_road = n // 2
        for i in range(n_crack):
            img, mask = make_crack(rng, size)
            name = f"crack_{i:04d}.png"
            _save(img, root / split / "crack" / name)
            if split == "test":
                _save(mask.astype(np.float64), root / split / "masks" / name)
        for i in range(n_road):
            img = make_road(rng, size)
            name = f"road_{i:04d}.png"
            _save(img, root / split / "road" / name)
            if split == "test":
                _save(np.zeros((size, size)), root / split / "masks" / name)
        counts[split] = {"crack": n_crack, "road": n_road}
    return counts
