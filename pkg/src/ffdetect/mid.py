"""Mid-level branch: edge operators, segmentation fallback and edge/segment alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .imaging import gaussian_blur, to_float, to_gray
from .nn import Conv, Linear, Module, flatten_grid, to_grid
from .tensor import Tensor

MAX_SEGMENTS = 19


@dataclass
class EdgeMaps:
    canny: np.ndarray  # {0, 1}
    sobel: np.ndarray  # >= 0
    log: np.ndarray    # signed


def _shifted(p: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    padded = np.pad(p, 1, mode="edge")
    h, w = p.shape
    return {(dr, dc): padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
            for dr in (-1, 0, 1) for dc in (-1, 0, 1)}


def sobel_gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column (x) and row (y) derivatives with 3x3 Sobel kernels, clamped borders."""
    s = _shifted(np.asarray(gray, dtype=np.float64))
    gx = (s[-1, 1] + 2 * s[0, 1] + s[1, 1]) - (s[-1, -1] + 2 * s[0, -1] + s[1, -1])
    gy = (s[1, -1] + 2 * s[1, 0] + s[1, 1]) - (s[-1, -1] + 2 * s[-1, 0] + s[-1, 1])
    return gx, gy


def sobel(gray: np.ndarray) -> np.ndarray:
    """Gradient magnitude sqrt(gx^2 + gy^2); a unit step gives 4 beside the step."""
    gx, gy = sobel_gradients(gray)
    return np.hypot(gx, gy)


def laplacian(plane: np.ndarray) -> np.ndarray:
    """5-point discrete Laplacian with clamped borders."""
    s = _shifted(np.asarray(plane, dtype=np.float64))
    return s[-1, 0] + s[1, 0] + s[0, -1] + s[0, 1] - 4 * s[0, 0]


def log_filter(gray: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Laplacian of Gaussian: blur, then 5-point Laplacian."""
    return laplacian(gaussian_blur(np.asarray(gray, dtype=np.float64), sigma))


def canny(gray: np.ndarray, sigma: float = 1.0, t_low: float = 0.1, t_high: float = 0.3) -> np.ndarray:
    """Binary edge map; thresholds are fractions of the maximum gradient magnitude."""
    if not 0 < t_low < t_high < 1:
        raise ValueError(f"canny thresholds need 0 < t_low < t_high < 1, got {t_low}, {t_high}")
    blurred = gaussian_blur(np.asarray(gray, dtype=np.float64), sigma)
    gx, gy = sobel_gradients(blurred)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros(mag.shape, dtype=np.uint8)
    thin = kernels.nms(mag / peak, gx, gy)
    return kernels.hysteresis(thin, t_low, t_high)


def edge_maps(gray: np.ndarray, sigma: float = 1.0) -> EdgeMaps:
    return EdgeMaps(canny=canny(gray, sigma), sobel=sobel(gray), log=log_filter(gray, sigma))


# -------------------------------------------------------------------- segmentation

def segment(img: np.ndarray, k: int, seed: int = 0, spatial_weight: float = 0.5,
            max_iter: int = 50) -> np.ndarray:
    """k-means over (R, G, B, w*x, w*y); labels renumbered by first appearance.

    Stand-in for a learned semantic segmenter.  Coordinates are scaled to
    [0, 1] before weighting.  Deterministic for a given seed.
    """
    if not 1 <= k <= MAX_SEGMENTS:
        raise ValueError(f"segment count k must be in [1, {MAX_SEGMENTS}], got {k}")
    rgb = to_float(img)
    h, w = rgb.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    feats = np.concatenate([
        rgb.reshape(-1, 3),
        spatial_weight * (xx.reshape(-1, 1) / max(w - 1, 1)),
        spatial_weight * (yy.reshape(-1, 1) / max(h - 1, 1)),
    ], axis=1)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(feats, k, rng)
    labels = kernels.kmeans_assign(feats, centers)
    for _ in range(max_iter):
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = feats[members].mean(axis=0)
        new = kernels.kmeans_assign(feats, centers)
        if np.array_equal(new, labels):
            break
        labels = new
    return _renumber(labels).reshape(h, w)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[int(rng.integers(len(x)))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = int(rng.integers(len(x))) if total <= 0 else int(rng.choice(len(x), p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=np.float64)


def _renumber(labels: np.ndarray) -> np.ndarray:
    _, first = np.unique(labels, return_index=True)
    order = np.unique(labels)[np.argsort(first)]
    remap = np.zeros(labels.max() + 1, dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[labels]


def check_segment_map(seg: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    seg = np.asarray(seg, dtype=np.int64)
    if seg.shape != tuple(shape):
        raise ValueError(f"segment map {seg.shape} does not match image {tuple(shape)}")
    if seg.min() < 0 or seg.max() >= MAX_SEGMENTS:
        raise ValueError(f"segment labels must lie in [0, {MAX_SEGMENTS}), got "
                         f"[{seg.min()}, {seg.max()}]")
    return seg


# -------------------------------------------------------------------- alignment

ALIGN_RADIUS = 2


def boundary_plane(seg: np.ndarray) -> np.ndarray:
    """1 where the 4-neighbourhood (inside the image) holds another label."""
    seg = np.asarray(seg)
    b = np.zeros(seg.shape, dtype=bool)
    b[1:, :] |= seg[1:, :] != seg[:-1, :]
    b[:-1, :] |= seg[:-1, :] != seg[1:, :]
    b[:, 1:] |= seg[:, 1:] != seg[:, :-1]
    b[:, :-1] |= seg[:, :-1] != seg[:, 1:]
    return b.astype(np.float64)


def alignment_plane(sobel_mag: np.ndarray, boundary: np.ndarray, radius: int = ALIGN_RADIUS) -> np.ndarray:
    """Max normalised Sobel magnitude within ``radius`` of each boundary pixel."""
    peak = sobel_mag.max()
    norm = sobel_mag / peak if peak > 0 else np.zeros_like(sobel_mag)
    return kernels.window_max(norm, radius) * boundary


def alignment_features(edges: EdgeMaps, seg: np.ndarray) -> np.ndarray:
    """``(H, W, 5)`` stack [canny, sobel, log, boundary, alignment]."""
    seg = check_segment_map(seg, edges.sobel.shape)
    b = boundary_plane(seg)
    a = alignment_plane(edges.sobel, b)
    return np.stack([edges.canny.astype(np.float64), edges.sobel, edges.log, b, a], axis=-1)


def mean_alignment(edges: EdgeMaps, seg: np.ndarray) -> float:
    """Average alignment over boundary pixels (0 if there are none)."""
    b = boundary_plane(seg)
    if not b.any():
        return 0.0
    return float(alignment_plane(edges.sobel, b)[b > 0].mean())


SEGMENTS = 4


def mid_features(img: np.ndarray, seg: np.ndarray | None = None, seed: int = 0) -> np.ndarray:
    """Raw mid-level stack for one image; ``seg`` overrides the k-means fallback."""
    gray = to_gray(img)
    if seg is None:
        seg = segment(img, SEGMENTS, seed=seed)
    return alignment_features(edge_maps(gray), seg)


class MidBranch(Module):
    def __init__(self, rng: np.random.Generator, dim: int = 256):
        self.conv = Conv(rng, 5, 32)
        self.proj = Linear(rng, 32, dim)

    def __call__(self, stack: Tensor, grid: int) -> Tensor:
        f = T.gelu(self.conv(stack))
        return self.proj(flatten_grid(to_grid(f, grid)))


def edge_alignment(edges: EdgeMaps, seg: np.ndarray, branch: MidBranch, grid: int) -> Tensor:
    """Tokens ``(G*G, 256)`` for a single image."""
    stack = T.Tensor(alignment_features(edges, seg)[None])
    out = branch(stack, grid)
    return T.reshape(out, out.shape[1:])
