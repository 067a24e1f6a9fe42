"""Image primitives: color conversion, resampling, smoothing, patch grids, I/O.

Luminance images are plain 2-D float64 arrays with intensities in [0, 1].
Values are only clamped back into range when an image is written out; all
intermediate math runs unclamped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

__all__ = [
    "ColorImage",
    "PatchGrid",
    "rgb_to_ycbcr",
    "ycbcr_to_rgb",
    "upsample",
    "downsample",
    "smooth_input",
    "mod_crop",
    "make_grid",
    "scale_grid",
    "extract_patches",
    "assemble_patches",
    "load_image",
    "save_image",
    "load_pgm",
    "save_pgm",
]

SUPPORTED_FACTORS = (2, 3, 4)


def _check_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a 2-D luminance array, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("luminance array contains non-finite values")
    return img


@dataclass
class ColorImage:
    """YCbCr planes of one image; all three share the same shape."""

    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray

    def __post_init__(self):
        if not (self.y.shape == self.cb.shape == self.cr.shape):
            raise ValueError("Y, Cb, Cr planes must share dimensions")


# BT.601 full-range analysis coefficients.
_KR, _KG, _KB = 0.299, 0.587, 0.114


def rgb_to_ycbcr(rgb: np.ndarray) -> ColorImage:
    """Convert an (H, W, 3) RGB array in [0, 1] to full-range BT.601 YCbCr."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB array, got shape {rgb.shape}")
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = _KR * r + _KG * g + _KB * b
    cb = (b - y) / (2.0 * (1.0 - _KB)) + 0.5
    cr = (r - y) / (2.0 * (1.0 - _KR)) + 0.5
    return ColorImage(y=y, cb=cb, cr=cr)


def ycbcr_to_rgb(img: ColorImage) -> np.ndarray:
    """Inverse of :func:`rgb_to_ycbcr`; returns an (H, W, 3) array (unclamped)."""
    y, cb, cr = img.y, img.cb - 0.5, img.cr - 0.5
    r = y + 2.0 * (1.0 - _KR) * cr
    b = y + 2.0 * (1.0 - _KB) * cb
    g = (y - _KR * r - _KB * b) / _KG
    return np.stack([r, g, b], axis=-1)


def _catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    """Cubic convolution weights (a = -0.5) for fractional offsets t in [0, 1).

    Returns an (len(t), 4) array for taps at offsets -1, 0, 1, 2. Rows are
    renormalized to sum exactly to one so constants survive resampling.
    """
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    t3 = t2 * t
    w = np.stack(
        [
            0.5 * (-t3 + 2.0 * t2 - t),
            0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
            0.5 * (-3.0 * t3 + 4.0 * t2 + t),
            0.5 * (t3 - t2),
        ],
        axis=-1,
    )
    return w / w.sum(axis=-1, keepdims=True)


def _upsample_axis(img: np.ndarray, factor: int, axis: int) -> np.ndarray:
    n = img.shape[axis]
    out_n = n * factor
    # Center-aligned sampling: output pixel r reads source coordinate
    # (r + 0.5) / factor - 0.5.
    x = (np.arange(out_n) + 0.5) / factor - 0.5
    base = np.floor(x).astype(np.int64)
    t = x - base
    weights = _catmull_rom_weights(t)

    padded = np.pad(img, [(2, 2) if ax == axis else (0, 0) for ax in range(img.ndim)], mode="reflect")
    moved = np.moveaxis(padded, axis, 0)
    taps = base[:, None] + np.arange(-1, 3)[None, :] + 2  # offset into padding
    gathered = moved[taps]  # (out_n, 4, ...)
    out = np.einsum("ot,ot...->o...", weights, gathered)
    return np.moveaxis(out, 0, axis)


def upsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic (Catmull-Rom) upsampling by an integer factor in {2, 3, 4}."""
    img = _check_luma(img)
    if factor not in SUPPORTED_FACTORS:
        raise ValueError(f"factor must be one of {SUPPORTED_FACTORS}, got {factor}")
    out = _upsample_axis(img, factor, axis=0)
    out = _upsample_axis(out, factor, axis=1)
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian taps at integer offsets within radius ceil(3*sigma), sum 1."""
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = (len(kernel) - 1) // 2
    padded = np.pad(img, [(radius, radius) if ax == axis else (0, 0) for ax in range(img.ndim)], mode="reflect")
    moved = np.moveaxis(padded, axis, 0)
    n = img.shape[axis]
    out = np.zeros_like(moved[:n])
    for i, w in enumerate(kernel):
        out += w * moved[i : i + n]
    return np.moveaxis(out, 0, axis)


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Gaussian anti-alias blur followed by point subsampling.

    The blur uses sigma = 0.8 * sqrt(factor**2 - 1) with reflected borders.
    Dimensions not divisible by the factor are reflection-padded up to the
    next multiple before subsampling.
    """
    img = _check_luma(img)
    if factor not in SUPPORTED_FACTORS:
        raise ValueError(f"factor must be one of {SUPPORTED_FACTORS}, got {factor}")
    h, w = img.shape
    pad_h = (-h) % factor
    pad_w = (-w) % factor
    if pad_h or pad_w:
        img = np.pad(img, ((0, pad_h), (0, pad_w)), mode="reflect")
    sigma = 0.8 * np.sqrt(factor**2 - 1.0)
    kernel = gaussian_kernel(sigma)
    blurred = _convolve_axis(img, kernel, axis=0)
    blurred = _convolve_axis(blurred, kernel, axis=1)
    offset = (factor - 1) // 2
    return blurred[offset::factor, offset::factor].copy()


def smooth_input(img: np.ndarray, factor: int) -> np.ndarray:
    """Upsample then downsample by the same factor; keeps the input's shape."""
    return downsample(upsample(img, factor), factor)


def mod_crop(img: np.ndarray, factor: int) -> np.ndarray:
    """Crop trailing rows/columns so both dimensions divide the factor."""
    h, w = img.shape[:2]
    return img[: h - h % factor, : w - w % factor]


def _origins_1d(size: int, patch: int, stride: int) -> tuple[int, ...]:
    if patch > size:
        raise ValueError(f"patch size {patch} exceeds image extent {size}")
    last = size - patch
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)  # snap the final patch inward to the edge
    return tuple(origins)


@dataclass(frozen=True)
class PatchGrid:
    """Row-major list of top-left patch origins fully covering an image."""

    height: int
    width: int
    patch: int
    stride: int
    rows: tuple[int, ...]
    cols: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.rows) * len(self.cols)

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.rows), len(self.cols))

    def origins(self):
        for r in self.rows:
            for c in self.cols:
                yield (r, c)


def make_grid(height: int, width: int, patch: int, overlap: int = 1) -> PatchGrid:
    """Build the overlapping patch grid for an image of the given size."""
    if not (0 <= overlap < patch):
        raise ValueError(f"overlap must satisfy 0 <= overlap < patch, got {overlap}")
    stride = patch - overlap
    return PatchGrid(
        height=height,
        width=width,
        patch=patch,
        stride=stride,
        rows=_origins_1d(height, patch, stride),
        cols=_origins_1d(width, patch, stride),
    )


def scale_grid(grid: PatchGrid, factor: int) -> PatchGrid:
    """Map a grid onto the factor-times-larger lattice (origins and patch scale)."""
    return PatchGrid(
        height=grid.height * factor,
        width=grid.width * factor,
        patch=grid.patch * factor,
        stride=grid.stride * factor,
        rows=tuple(r * factor for r in grid.rows),
        cols=tuple(c * factor for c in grid.cols),
    )


def extract_patches(img: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Stack the grid's patches into a (num_patches, patch, patch) array."""
    img = _check_luma(img)
    if img.shape != (grid.height, grid.width):
        raise ValueError(f"grid built for {(grid.height, grid.width)}, image is {img.shape}")
    p = grid.patch
    out = np.empty((len(grid), p, p), dtype=np.float64)
    for idx, (r, c) in enumerate(grid.origins()):
        out[idx] = img[r : r + p, c : c + p]
    return out


def assemble_patches(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Rebuild an image from grid patches, averaging overlapping pixels."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape[0] != len(grid):
        raise ValueError(f"expected {len(grid)} patches, got {patches.shape[0]}")
    p = grid.patch
    if patches.shape[1:] != (p, p):
        raise ValueError(f"patches must be {p}x{p}, got {patches.shape[1:]}")
    acc = np.zeros((grid.height, grid.width), dtype=np.float64)
    cover = np.zeros((grid.height, grid.width), dtype=np.float64)
    for idx, (r, c) in enumerate(grid.origins()):
        acc[r : r + p, c : c + p] += patches[idx]
        cover[r : r + p, c : c + p] += 1.0
    return acc / cover


def load_image(path) -> np.ndarray:
    """Read a PNG/JPEG image as float64 in [0, 1]; (H, W) gray or (H, W, 3) RGB."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            return arr / 255.0
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        return arr / 255.0


def save_image(path, img: np.ndarray) -> None:
    """Write a [0, 1] float image (gray 2-D or RGB 3-D) as an 8-bit PNG."""
    img = np.asarray(img, dtype=np.float64)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        Image.fromarray(data, mode="L").save(path)
    elif img.ndim == 3 and img.shape[2] == 3:
        Image.fromarray(data, mode="RGB").save(path)
    else:
        raise ValueError(f"cannot save image of shape {img.shape}")


def save_pgm(path, img: np.ndarray) -> None:
    """Write a luminance plane as binary 8-bit PGM (debug-friendly format)."""
    img = _check_luma(img)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM written by :func:`save_pgm`."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary PGM file: magic {magic!r}")
        fields: list[bytes] = []
        while len(fields) < 3:
            line = fh.readline()
            if not line:
                raise ValueError("truncated PGM header")
            line = line.split(b"#", 1)[0]
            fields.extend(line.split())
        width, height, maxval = (int(v) for v in fields)
        if maxval != 255:
            raise ValueError(f"only maxval 255 supported, got {maxval}")
        raw = fh.read(width * height)
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width)
    return arr.astype(np.float64) / 255.0
