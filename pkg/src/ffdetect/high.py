"""High-level branch: shadow direction, reflection symmetry and depth coherence.

All three cues are heuristic, deterministic functions of the pixels.  The
depth map comes from a blurred-luminance proxy unless an external map is
supplied.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .imaging import gaussian_blur, to_float, to_gray
from .nn import Conv, Linear, Module, flatten_grid, to_grid
from .tensor import Tensor

log = logging.getLogger(__name__)

SHADOW_LUMA_FRACTION = 0.35
SHADOW_SAT_DROP = 0.2
SHADOW_MIN_AREA = 30
SURROUND_SIGMA = 6.0
DEPTH_SIGMA = 4.0


@dataclass
class ShadowRegion:
    label: int
    centroid: tuple[float, float]  # (x, y)
    area: int


@dataclass
class RegionPair:
    object_centroid: tuple[float, float]
    shadow_centroid: tuple[float, float]
    object_id: int
    shadow_id: int


def saturation(img: np.ndarray) -> np.ndarray:
    rgb = to_float(img)
    hi = rgb.max(axis=-1)
    lo = rgb.min(axis=-1)
    return np.where(hi > 0, (hi - lo) / np.where(hi > 0, hi, 1.0), 0.0)


def detect_shadows(img: np.ndarray) -> tuple[np.ndarray, list[ShadowRegion]]:
    """Dark pixels whose saturation stays close to their surround's.

    Returns a label map (0 = no shadow, ids 1..n) and the matching regions,
    which are 4-connected and at least ``SHADOW_MIN_AREA`` pixels.
    """
    lum = to_gray(img)
    sat = saturation(img)
    surround = gaussian_blur(sat, SURROUND_SIGMA)
    cand = (lum < SHADOW_LUMA_FRACTION * lum.mean()) & (surround - sat < SHADOW_SAT_DROP)
    labels, n = kernels.label_components(cand, 4)
    kept = np.zeros(cand.shape, dtype=np.int64)
    regions = []
    for lab in range(1, n + 1):
        sel = labels == lab
        area = int(sel.sum())
        if area < SHADOW_MIN_AREA:
            continue
        ys, xs = np.nonzero(sel)
        regions.append(ShadowRegion(len(regions) + 1, (float(xs.mean()), float(ys.mean())), area))
        kept[sel] = len(regions)
    return kept, regions


def pair_shadows(img: np.ndarray, shadow_map: np.ndarray, regions: list[ShadowRegion]) -> list[RegionPair]:
    """Pair each shadow with the brighter half of a 3-pixel ring around it."""
    lum = to_gray(img)
    any_shadow = shadow_map > 0
    pairs = []
    for reg in regions:
        sel = (shadow_map == reg.label).astype(np.float64)
        ring = (kernels.window_max(sel, 3) > 0) & ~any_shadow
        if not ring.any():
            continue
        bright = ring & (lum >= np.median(lum[ring]))
        ys, xs = np.nonzero(bright)
        pairs.append(RegionPair((float(xs.mean()), float(ys.mean())), reg.centroid, reg.label, reg.label))
    return pairs


def estimate_light_dir(img: np.ndarray) -> np.ndarray:
    """Unit (x, y) vector from the image centre to the brightest 1% of pixels."""
    lum = to_gray(img)
    h, w = lum.shape
    n = max(1, int(math.ceil(0.01 * lum.size)))
    idx = np.argsort(-lum.ravel(), kind="stable")[:n]
    ys, xs = np.divmod(idx, w)
    v = np.array([xs.mean() - (w - 1) / 2.0, ys.mean() - (h - 1) / 2.0])
    norm = np.hypot(*v)
    if norm < 1e-9:
        return np.array([0.0, -1.0])
    return v / norm


def shadow_consistency(pairs: list[RegionPair], light_dir) -> list[float]:
    """Cosine between the expected (-light_dir) and observed shadow offsets.

    With no usable pair the single neutral score 1.0 is returned.
    """
    light = np.asarray(light_dir, dtype=np.float64)
    ln = np.hypot(*light)
    if ln == 0:
        raise ValueError("light direction must be nonzero")
    expected = -light / ln
    scores = []
    for p in pairs:
        d = np.subtract(p.shadow_centroid, p.object_centroid)
        dn = np.hypot(*d)
        if dn < 1e-12:
            log.warning("shadow %d: object and shadow centroids coincide; skipped", p.shadow_id)
            continue
        scores.append(float(np.clip(np.dot(expected, d / dn), -1.0, 1.0)))
    return scores if scores else [1.0]


def reflection_symmetry(img: np.ndarray, axis_row: int | None = None) -> float:
    """NCC between the band below ``axis_row`` and the mirrored band above it.

    The axis lies between rows ``axis_row - 1`` and ``axis_row``; default is
    the horizontal midline.  Zero-variance bands score 0.
    """
    lum = to_gray(img) if np.asarray(img).ndim == 3 else np.asarray(img, dtype=np.float64)
    h = lum.shape[0]
    if axis_row is None:
        axis_row = h // 2
    if not 0 < axis_row < h:
        raise ValueError(f"reflection axis row {axis_row} must lie strictly inside 0..{h}")
    band = min(axis_row, h - axis_row)
    above = lum[axis_row - band:axis_row][::-1]
    below = lum[axis_row:axis_row + band]
    a = above - above.mean()
    b = below - below.mean()
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if den <= 1e-15:
        return 0.0
    return float(np.clip((a * b).sum() / den, -1.0, 1.0))


def normalize_depth(z: np.ndarray) -> np.ndarray:
    lo, hi = float(z.min()), float(z.max())
    if hi - lo <= 0:
        return np.full(z.shape, 0.5)
    return (z - lo) / (hi - lo)


def pseudo_depth(img: np.ndarray, depth: np.ndarray | None = None) -> np.ndarray:
    """Depth proxy in [0, 1]: blurred luminance, min-max normalised.

    ``depth`` (already in [0, 1], e.g. from :func:`imaging.load_plane`)
    overrides the proxy.
    """
    if depth is not None:
        z = np.asarray(depth, dtype=np.float64)
        if z.shape != np.asarray(img).shape[:2]:
            raise ValueError(f"depth map {z.shape} does not match image {np.asarray(img).shape[:2]}")
        return np.clip(z, 0.0, 1.0)
    return normalize_depth(gaussian_blur(to_gray(img), DEPTH_SIGMA))


def depth_coherence(z: np.ndarray, lam: float = 0.0) -> float:
    """``-||grad Z||_1 + lam * TV(Z)``, both terms as means over forward differences."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    z = np.asarray(z, dtype=np.float64)
    dx = np.diff(z, axis=1)
    dy = np.diff(z, axis=0)
    l1 = (np.abs(dx).mean() if dx.size else 0.0) + (np.abs(dy).mean() if dy.size else 0.0)
    tv = 0.0
    if lam:
        tv = float(np.sqrt(dx[:-1, :] ** 2 + dy[:, :-1] ** 2).mean())
    return float(-l1 + lam * tv)


def depth_gradient(z: np.ndarray) -> np.ndarray:
    """Per-pixel forward-difference gradient magnitude (0 on the last row/column)."""
    dx = np.zeros_like(z)
    dy = np.zeros_like(z)
    dx[:, :-1] = np.diff(z, axis=1)
    dy[:-1, :] = np.diff(z, axis=0)
    return np.hypot(dx, dy)


def high_features(img: np.ndarray, depth: np.ndarray | None = None, axis_row: int | None = None,
                  light_dir=None) -> np.ndarray:
    """``(H, W, 4)`` stack [shadow score, reflection score, Z, |grad Z|]."""
    h, w = np.asarray(img).shape[:2]
    shadow_map, regions = detect_shadows(img)
    pairs = pair_shadows(img, shadow_map, regions)
    light = estimate_light_dir(img) if light_dir is None else light_dir
    s_shadow = float(np.mean(shadow_consistency(pairs, light)))
    s_refl = reflection_symmetry(img, axis_row)
    z = pseudo_depth(img, depth)
    return np.stack([np.full((h, w), s_shadow), np.full((h, w), s_refl), z, depth_gradient(z)], axis=-1)


class HighBranch(Module):
    def __init__(self, rng: np.random.Generator, dim: int = 256):
        self.conv = Conv(rng, 4, 32)
        self.proj = Linear(rng, 32, dim)

    def __call__(self, stack: Tensor, grid: int) -> Tensor:
        f = T.gelu(self.conv(stack))
        return self.proj(flatten_grid(to_grid(f, grid)))


def high_branch_forward(img: np.ndarray, branch: HighBranch, grid: int,
                        depth: np.ndarray | None = None) -> Tensor:
    """Tokens ``(G*G, 256)`` for a single image."""
    out = branch(T.Tensor(high_features(img, depth)[None]), grid)
    return T.reshape(out, out.shape[1:])
