"""Procedural toy forgeries, a spectral-cue set, and a small directory format.

Every sample draws from its own ``numpy.random.default_rng([seed, tag, split, class, index])``
stream (PCG64 seeded through ``SeedSequence``), so a dataset is a pure
function of its arguments.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import gaussian_blur, load_image, load_plane, resize_bilinear, save_image, to_u8
from .tensor import resample_matrix

CLASSES = ("real", "copy-move", "splicing", "retouching", "gan", "diffusion", "deepfake")
SENSOR_NOISE = 0.025
_TOY, _SPECTRAL = 1, 2


@dataclass
class ForgerySample:
    image: np.ndarray   # (H, W, 3) uint8
    mask: np.ndarray    # (H, W) uint8 in {0, 1}
    label: int          # 0 real, 1 fake
    mtype: int          # index into CLASSES
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        fake = bool(self.mask.any())
        if (self.label == 0) != (self.mtype == 0) or (self.label == 0 and fake):
            raise ValueError(f"inconsistent sample: label={self.label} mtype={self.mtype} "
                             f"mask area={int(self.mask.sum())}")


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    return resize_bilinear(rng.random((cells, cells, 3)), size, size)


def texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Layered filtered noise plus a smooth colour gradient, float RGB in ~[0.1, 0.9]."""
    img = np.zeros((size, size, 3))
    for cells, amp in ((4, 0.5), (8, 0.3), (16, 0.2)):
        img += amp * _smooth_noise(rng, size, min(cells, size))
    theta = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] / size
    ramp = (math.cos(theta) * xx + math.sin(theta) * yy)[..., None]
    img += 0.6 * ramp * rng.uniform(0.2, 1.0, size=3)
    lo, hi = img.min(), img.max()
    return 0.1 + 0.8 * (img - lo) / (hi - lo)


def add_noise(rng: np.random.Generator, img: np.ndarray, sigma: float = SENSOR_NOISE) -> np.ndarray:
    return np.clip(img + rng.normal(0.0, sigma, img.shape), 0.0, 1.0) if sigma > 0 else img


def _rect(rng: np.random.Generator, size: int) -> tuple[int, int, int, int]:
    """Random (top, left, h, w) with sides in [size/4, size/2]."""
    h = int(rng.integers(size // 4, size // 2 + 1))
    w = int(rng.integers(size // 4, size // 2 + 1))
    return int(rng.integers(0, size - h + 1)), int(rng.integers(0, size - w + 1)), h, w


def _rect_mask(size: int, r) -> np.ndarray:
    top, left, h, w = r
    m = np.zeros((size, size), dtype=np.uint8)
    m[top:top + h, left:left + w] = 1
    return m


def _real(rng, size):
    img = add_noise(rng, texture(rng, size))
    return img, np.zeros((size, size), np.uint8), {}


def _copy_move(rng, size):
    img = add_noise(rng, texture(rng, size))
    dst = _rect(rng, size)
    top, left, h, w = dst
    scale = float(rng.uniform(1.25, 1.6))
    sh, sw = max(2, int(round(h / scale))), max(2, int(round(w / scale)))
    st = int(rng.integers(0, size - sh + 1))
    sl = int(rng.integers(0, size - sw + 1))
    patch = _resize_any(img[st:st + sh, sl:sl + sw], w, h)
    out = img.copy()
    out[top:top + h, left:left + w] = patch
    return out, _rect_mask(size, dst), {"rect": list(dst), "source": [st, sl, sh, sw], "scale": scale}


def _resize_any(patch: np.ndarray, w: int, h: int) -> np.ndarray:
    return np.einsum("ip,pqc,jq->ijc", resample_matrix(patch.shape[0], h), patch,
                     resample_matrix(patch.shape[1], w))


def _splicing(rng, size):
    img = add_noise(rng, texture(rng, size))
    donor_sigma = float(rng.choice([0.0, 3 * SENSOR_NOISE]))
    donor = add_noise(rng, texture(rng, size), donor_sigma)
    r = _rect(rng, size)
    m = _rect_mask(size, r).astype(bool)
    out = img.copy()
    out[m] = donor[m]
    return out, m.astype(np.uint8), {"rect": list(r), "donor_noise": donor_sigma}


def _retouching(rng, size):
    img = add_noise(rng, texture(rng, size))
    r = _rect(rng, size)
    m = _rect_mask(size, r).astype(bool)
    gain = float(rng.uniform(0.06, 0.12)) * float(rng.choice([-1.0, 1.0]))
    edited = np.clip(gaussian_blur(img, 1.5) + gain, 0.0, 1.0)
    out = img.copy()
    out[m] = edited[m]
    return out, m.astype(np.uint8), {"rect": list(r), "brightness": gain}


def _gan(rng, size):
    base = add_noise(rng, texture(rng, size))
    out = gaussian_blur(base, 1.0)
    return out, np.ones((size, size), np.uint8), {"base": base}


def _diffusion(rng, size):
    smooth = gaussian_blur(texture(rng, size), 2.0)
    out = np.clip(smooth + rng.uniform(-0.08, 0.08, smooth.shape), 0.0, 1.0)
    return out, np.ones((size, size), np.uint8), {}


def _deepfake(rng, size):
    img = add_noise(rng, texture(rng, size))
    donor = add_noise(rng, texture(rng, size))
    cy = size * float(rng.uniform(0.28, 0.4))
    cx = size * float(rng.uniform(0.42, 0.58))
    ry = size * float(rng.uniform(0.16, 0.24))
    rx = size * float(rng.uniform(0.14, 0.2))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # sinusoidal warp of the donor, sampled bilinearly
    amp = float(rng.uniform(1.0, 2.5))
    sy = np.clip(yy + amp * np.sin(2 * math.pi * xx / size * 2), 0, size - 1)
    sx = np.clip(xx + amp * np.sin(2 * math.pi * yy / size * 2), 0, size - 1)
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    y1, x1 = np.minimum(y0 + 1, size - 1), np.minimum(x0 + 1, size - 1)
    fy, fx = (sy - y0)[..., None], (sx - x0)[..., None]
    warped = ((1 - fy) * (1 - fx) * donor[y0, x0] + (1 - fy) * fx * donor[y0, x1]
              + fy * (1 - fx) * donor[y1, x0] + fy * fx * donor[y1, x1])
    out = img.copy()
    out[m] = warped[m]
    return out, m.astype(np.uint8), {"ellipse": [cy, cx, ry, rx], "warp": amp}


_MAKERS = (_real, _copy_move, _splicing, _retouching, _gan, _diffusion, _deepfake)


def _check_size(size: int) -> None:
    if size < 32 or size % 2:
        raise ValueError(f"image size must be even and >= 32, got {size}")


def make_sample(mtype: int, size: int, seed: int, index: int, split: int = 0) -> ForgerySample:
    rng = np.random.default_rng([seed, _TOY, split, mtype, index])
    img, mask, meta = _MAKERS[mtype](rng, size)
    meta = {k: v for k, v in meta.items() if k != "base"}
    meta.update(seed=seed, split=split, index=index)
    return ForgerySample(to_u8(img), mask, int(mtype > 0), mtype, meta)


def gen_toy_dataset(n_per_class: int, size: int = 64, seed: int = 0, split: int = 0) -> list[ForgerySample]:
    """``n_per_class`` samples of each of the seven classes, class-major order.

    ``split`` selects an independent stream (0 train, 1 validation, 2 test).
    """
    _check_size(size)
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    return [make_sample(t, size, seed, i, split) for t in range(len(CLASSES)) for i in range(n_per_class)]


def gan_pair(size: int, seed: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """(real base, GAN-proxy image) as float RGB, for checking spectral suppression."""
    rng = np.random.default_rng([seed, _TOY, 0, 4, index])
    out, _, meta = _gan(rng, size)
    return meta["base"], out


CHECKER_AMPLITUDE = 0.03


def gen_spectral_dataset(n_per_class: int, size: int = 32, seed: int = 0, split: int = 0) -> list[ForgerySample]:
    """Real vs fake where the only difference is a faint Nyquist checkerboard."""
    _check_size(size)
    out = []
    yy, xx = np.mgrid[0:size, 0:size]
    checker = np.where((yy + xx) % 2 == 0, 1.0, -1.0)[..., None]
    for label in (0, 1):
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, _SPECTRAL, split, label, i])
            img = add_noise(rng, texture(rng, size))
            mask = np.zeros((size, size), np.uint8)
            if label:
                img = np.clip(img + CHECKER_AMPLITUDE * checker, 0.0, 1.0)
                mask[:] = 1
            out.append(ForgerySample(to_u8(img), mask, label, 4 * label, {"seed": seed, "index": i}))
    return out


# -------------------------------------------------------------------- directory format

LABELS_FILE = "labels.csv"


def save_dataset(samples: list[ForgerySample], root: str | os.PathLike) -> None:
    """Write ``images/``, ``masks/`` and ``labels.csv`` (file,label,type)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / LABELS_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "label", "type"])
        for i, s in enumerate(samples):
            name = f"{i:05d}.png"
            save_image(s.image, root / "images" / name)
            save_image(s.mask * np.uint8(255), root / "masks" / name)
            w.writerow([name, s.label, CLASSES[s.mtype]])


def load_dataset(root: str | os.PathLike) -> list[ForgerySample]:
    """Read the directory format; a missing mask file means an all-zero mask."""
    root = Path(root)
    labels = root / LABELS_FILE
    if not labels.is_file():
        raise FileNotFoundError(f"{labels}: no such labels file")
    samples = []
    with open(labels, newline="") as fh:
        for row in csv.DictReader(fh):
            img = load_image(root / "images" / row["file"])
            mpath = root / "masks" / row["file"]
            mask = (load_plane(mpath) >= 0.5).astype(np.uint8) if mpath.is_file() \
                else np.zeros(img.shape[:2], np.uint8)
            t = row["type"]
            mtype = CLASSES.index(t) if t in CLASSES else int(t)
            samples.append(ForgerySample(img, mask, int(row["label"]), mtype, {"file": row["file"]}))
    return samples
