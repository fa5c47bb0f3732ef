"""Image I/O, colour conversion, resizing and post-processing perturbations.

RGB images are ``uint8`` arrays of shape ``(H, W, 3)``; planes are float64
``(H, W)`` arrays with values in ``[0, 1]``.  All functions are pure.
"""

from __future__ import annotations

import functools
import math
import os
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


MIN_SIDE = 8
LUMA = np.array([0.299, 0.587, 0.114])


class ImageIOError(OSError):
    """Base class for image read/write failures."""


class UnsupportedFormatError(ImageIOError):
    pass


class TruncatedImageError(ImageIOError):
    pass


class ImageTooSmallError(ImageIOError):
    pass


_FORMATS = {".png": "PNG", ".ppm": "PPM", ".pgm": "PPM", ".pnm": "PPM"}


def _check_size(h: int, w: int, what: str = "image") -> None:
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ImageTooSmallError(f"{what} is {w}x{h}; both sides must be >= {MIN_SIDE}")


def _open(path: str | os.PathLike) -> Image.Image:
    path = Path(path)
    if path.suffix.lower() not in _FORMATS:
        raise UnsupportedFormatError(f"{path}: only PNG, PPM (P6) and PGM (P5) are supported")
    try:
        im = Image.open(path)
        if im.format not in ("PNG", "PPM"):
            raise UnsupportedFormatError(f"{path}: decoded as {im.format}, expected PNG/PPM/PGM")
        im.load()
    except FileNotFoundError:
        raise
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: not a recognised image ({exc})") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, ImageIOError):
            raise
        raise TruncatedImageError(f"{path}: truncated or corrupt image data ({exc})") from exc
    _check_size(im.height, im.width, str(path))
    return im


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG/PPM/PGM file as an ``(H, W, 3)`` uint8 array."""
    im = _open(path)
    return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def load_plane(path: str | os.PathLike) -> np.ndarray:
    """Read a grey image as a float plane in [0, 1] (value / 255)."""
    im = _open(path)
    if im.mode not in ("L", "I", "I;16"):
        im = im.convert("L")
    arr = np.asarray(im, dtype=np.float64)
    if im.mode != "L":
        arr = arr / 257.0 if arr.max() > 255 else arr
    return arr / 255.0


def load_labels(path: str | os.PathLike) -> np.ndarray:
    """Read a label map stored as grey levels (label = grey value)."""
    im = _open(path)
    if im.mode != "L":
        im = im.convert("L")
    return np.asarray(im, dtype=np.int64).copy()


def plane_to_u8(plane: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(plane, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write an RGB uint8 image or a [0, 1] plane.  Format follows the suffix."""
    path = Path(path)
    fmt = _FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise UnsupportedFormatError(f"{path}: only .png, .ppm and .pgm can be written")
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 3:
        if path.suffix.lower() == ".pgm":
            raise UnsupportedFormatError(f"{path}: PGM holds a single channel")
        data = img if img.dtype == np.uint8 else plane_to_u8(img)
        mode = "RGB"
    elif img.ndim == 2:
        if path.suffix.lower() == ".ppm":
            raise UnsupportedFormatError(f"{path}: PPM holds RGB; use .pgm for planes")
        data = img if img.dtype == np.uint8 else plane_to_u8(img)
        mode = "L"
    else:
        raise ValueError(f"save_image: unsupported array shape {img.shape}")
    _check_size(*data.shape[:2])
    try:
        Image.fromarray(np.ascontiguousarray(data), mode=mode).save(path, format=fmt)
    except OSError as exc:
        raise ImageIOError(f"{path}: write failed ({exc})") from exc


def check_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    _check_size(*img.shape[:2])
    return img


def to_float(img: np.ndarray) -> np.ndarray:
    """uint8 RGB -> float RGB in [0, 1]; float input passes through."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64, copy=False)


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def to_gray(img: np.ndarray) -> np.ndarray:
    """BT.601 luma in [0, 1] from a uint8 or [0, 1] float RGB image."""
    return to_float(img) @ LUMA


@functools.lru_cache(maxsize=64)
def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    if src == dst:
        return np.eye(src)
    s = src / dst
    m = np.zeros((dst, src))
    for i in range(dst):
        pos = min(max((i + 0.5) * s - 0.5, 0.0), src - 1.0)
        lo = int(math.floor(pos))
        hi = min(lo + 1, src - 1)
        w = pos - lo
        m[i, lo] += 1.0 - w
        m[i, hi] += w
    return m


def resize_bilinear(img: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Bilinear resize (half-pixel centres, clamped edges) of a plane or RGB image."""
    if new_w < MIN_SIDE or new_h < MIN_SIDE:
        raise ValueError(f"resize target {new_w}x{new_h} below minimum side {MIN_SIDE}")
    img = np.asarray(img)
    rows = _bilinear_matrix(img.shape[0], new_h)
    cols = _bilinear_matrix(img.shape[1], new_w)
    if img.ndim == 2:
        out = rows @ img.astype(np.float64) @ cols.T
        return out
    out = np.einsum("ip,pqc,jq->ijc", rows, to_float(img), cols)
    return to_u8(out) if img.dtype == np.uint8 else out


# ---------------------------------------------------------------- blur

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled 1-D Gaussian, radius ceil(3 sigma), normalised to sum 1."""
    if not sigma > 0:
        raise ValueError(f"gaussian sigma must be > 0, got {sigma}")
    r = int(math.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_axis(a: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    n = a.shape[axis]
    idx = np.arange(n)
    # out = a + sum_k w_k (a[i+k] - a[i]) keeps constant inputs bit-exact
    out = a.copy()
    for off, w in zip(range(-r, r + 1), k):
        if off == 0:
            continue
        src = np.clip(idx + off, 0, n - 1)
        out += w * (np.take(a, src, axis=axis) - a)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with clamp-to-edge borders."""
    k = gaussian_kernel(sigma)
    arr = np.asarray(img)
    f = to_float(arr) if arr.dtype == np.uint8 else arr.astype(np.float64)
    out = _blur_axis(_blur_axis(f, k, 0), k, 1)
    if arr.dtype == np.uint8:
        return to_u8(out)
    return out


# ---------------------------------------------------------------- JPEG simulation

LUMA_QTABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_QTABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def quality_table(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling of a baseline quantisation table."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    s = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.maximum(1.0, np.floor((base * s + 50) / 100))


def _orthonormal_dct_matrix() -> np.ndarray:
    x = np.arange(8)
    c = np.cos(np.pi * np.outer(x, 2 * x + 1) / 16) * math.sqrt(2 / 8)
    c[0] /= math.sqrt(2)
    return c


DCT8 = _orthonormal_dct_matrix()


def _blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _unblocks(b: np.ndarray) -> np.ndarray:
    nh, nw = b.shape[:2]
    return b.transpose(0, 2, 1, 3).reshape(nh * 8, nw * 8)


def quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    """DCT -> s*round(c/s) -> IDCT on 8x8 blocks of a level-shifted plane."""
    coef = DCT8 @ _blocks(plane) @ DCT8.T
    coef = table * np.round(coef / table)
    return _unblocks(DCT8.T @ coef @ DCT8)


def jpeg_simulate(img: np.ndarray, quality: int) -> np.ndarray:
    """Lossy JPEG round trip without entropy coding (4:4:4, baseline tables)."""
    qy = quality_table(LUMA_QTABLE, quality)
    qc = quality_table(CHROMA_QTABLE, quality)
    img = check_rgb(img)
    h, w = img.shape[:2]
    ph, pw = (-h) % 8, (-w) % 8
    rgb = np.pad(img.astype(np.float64), ((0, ph), (0, pw), (0, 0)), mode="edge")
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    y = quantize_plane(y - 128.0, qy) + 128.0
    cb = quantize_plane(cb - 128.0, qc)
    cr = quantize_plane(cr - 128.0, qc)
    out = np.stack([y + 1.402 * cr,
                    y - 0.344136 * cb - 0.714136 * cr,
                    y + 1.772 * cb], axis=-1)
    return np.clip(np.rint(out[:h, :w]), 0, 255).astype(np.uint8)
