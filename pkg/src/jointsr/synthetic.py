"""Deterministic synthetic test images: periodic textures, piecewise
structures, and mixtures of both. Used by the experiment scripts and the
verification suite; every generator is seeded.

Generators emit band-limited content (a light Gaussian soften pass) so that
an anti-aliased downsample leaves detail that super-resolution can actually
recover, as an optical system would.
"""

from __future__ import annotations

import numpy as np

from .imagecore import _convolve_axis, gaussian_kernel

__all__ = [
    "soften",
    "grating",
    "checkerboard",
    "brick_texture",
    "two_texture",
    "edge_image",
    "structure_image",
    "half_and_half",
    "texture_structure_corpus",
    "salt_pepper",
]


def _coords(size):
    r = np.arange(size, dtype=np.float64)
    return np.meshgrid(r, r, indexing="ij")


def soften(img: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Light Gaussian blur that band-limits hard synthetic edges."""
    if sigma <= 0:
        return img
    k = gaussian_kernel(sigma)
    return _convolve_axis(_convolve_axis(img, k, 0), k, 1)


def grating(size: int, period: float = 12.0, angle: float = 0.0,
            lo: float = 0.15, hi: float = 0.85) -> np.ndarray:
    """Sinusoidal grating with the given period and orientation."""
    rr, cc = _coords(size)
    t = np.cos(angle) * cc + np.sin(angle) * rr
    wave = 0.5 * (1.0 + np.sin(2.0 * np.pi * t / period))
    return lo + (hi - lo) * wave


def checkerboard(size: int, cell: int = 8, lo: float = 0.2, hi: float = 0.8,
                 blur: float = 1.0) -> np.ndarray:
    rr, cc = _coords(size)
    board = ((rr // cell + cc // cell) % 2).astype(np.float64)
    return soften(lo + (hi - lo) * board, blur)


def brick_texture(size: int, brick_h: int = 12, brick_w: int = 21, line: int = 3,
                  mortar: float = 0.2, face: float = 0.8, shade: float = 0.12,
                  blur: float = 1.2) -> np.ndarray:
    """Running-bond brick wall: offset bright faces, dark mortar lines, and a
    smooth periodic shading over the faces; lightly blurred."""
    img = np.full((size, size), face, dtype=np.float64)
    for r in range(0, size, brick_h):
        img[r : r + line, :] = mortar
        shift = (r // brick_h % 2) * (brick_w // 2)
        for c in range(-shift, size, brick_w):
            if 0 <= c:
                img[r : r + brick_h, c : c + line] = mortar
    if shade:
        rr, cc = _coords(size)
        img = img + shade * np.sin(2.0 * np.pi * rr / brick_h) * np.sin(4.0 * np.pi * cc / brick_w)
    return soften(np.clip(img, 0.05, 0.95), blur)


def two_texture(size: int, seed: int = 0) -> np.ndarray:
    """Diagonal grating on the left half, checkerboard on the right."""
    rng = np.random.default_rng(seed)
    img = np.empty((size, size), dtype=np.float64)
    img[:, : size // 2] = grating(size, period=12.0, angle=0.6)[:, : size // 2]
    img[:, size // 2 :] = checkerboard(size, cell=6)[:, size // 2 :]
    img += 0.01 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def edge_image(size: int, seed: int = 0, blur: float = 1.0) -> np.ndarray:
    """One oriented step edge over a smooth background ramp."""
    rng = np.random.default_rng(seed)
    rr, cc = _coords(size)
    theta = rng.uniform(0.0, np.pi)
    offset = rng.uniform(0.3, 0.7) * size
    side = (np.cos(theta) * cc + np.sin(theta) * rr - offset) > 0
    base = 0.25 + 0.2 * (cc / size)
    img = np.where(side, base + rng.uniform(0.25, 0.45), base)
    return soften(np.clip(img, 0.0, 1.0), blur)


def structure_image(size: int, seed: int = 0, blur: float = 1.0) -> np.ndarray:
    """Piecewise-smooth scene: gradient background, rectangles, a disc, bars."""
    rng = np.random.default_rng(seed)
    rr, cc = _coords(size)
    img = 0.2 + 0.3 * (rr / size) + 0.15 * (cc / size)
    for _ in range(3):
        r0, c0 = rng.integers(0, size - size // 4, size=2)
        h, w = rng.integers(size // 8, size // 3, size=2)
        img[r0 : r0 + h, c0 : c0 + w] = rng.uniform(0.1, 0.9)
    cr, cx = rng.integers(size // 4, 3 * size // 4, size=2)
    rad = rng.integers(size // 10, size // 5)
    img[(rr - cr) ** 2 + (cc - cx) ** 2 <= rad**2] = rng.uniform(0.1, 0.9)
    for _ in range(2):
        col = int(rng.integers(2, size - 5))
        img[:, col : col + 3] = rng.uniform(0.05, 0.95)
    return soften(np.clip(img, 0.0, 1.0), blur)


def half_and_half(size: int, seed: int = 0) -> np.ndarray:
    """Repeating texture on the left half, smooth structure on the right."""
    img = structure_image(size, seed=seed)
    tex = brick_texture(size)
    img[:, : size // 2] = tex[:, : size // 2]
    return img


def texture_structure_corpus(count: int = 10, size: int = 128, seed: int = 0) -> list[np.ndarray]:
    """Mixed corpus of texture-dominant, structure-dominant and hybrid images."""
    rng = np.random.default_rng(seed)
    images = []
    makers = [
        lambda s: grating(size, period=float(rng.uniform(11.0, 18.0)),
                          angle=float(rng.uniform(0, np.pi))),
        lambda s: checkerboard(size, cell=int(rng.integers(7, 10))),
        lambda s: brick_texture(size, brick_h=int(rng.integers(11, 15)),
                                brick_w=int(rng.integers(18, 24))),
        lambda s: structure_image(size, seed=s),
        lambda s: half_and_half(size, seed=s),
    ]
    for i in range(count):
        img = makers[i % len(makers)](int(rng.integers(0, 2**31)))
        img = img + 0.004 * rng.standard_normal(img.shape)
        images.append(np.clip(img, 0.02, 0.98))
    return images


def salt_pepper(img: np.ndarray, fraction: float, region=None, seed: int = 0) -> np.ndarray:
    """Corrupt a fraction of pixels (inside ``region`` if given) to 0 or 1.

    ``region`` is a (row_slice, col_slice) pair; pixels are chosen without
    replacement and split evenly between salt and pepper.
    """
    rng = np.random.default_rng(seed)
    out = np.array(img, dtype=np.float64, copy=True)
    view = out[region] if region is not None else out
    n = view.size
    hits = max(1, int(round(fraction * n)))
    flat = rng.choice(n, size=hits, replace=False)
    values = np.where(np.arange(hits) % 2 == 0, 1.0, 0.0)
    view[np.unravel_index(flat, view.shape)] = values
    return out
