"""Per-image branch inputs, computed once and sliced into batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import ForgerySample
from .high import high_features
from .imaging import to_float
from .low import low_features
from .mid import mid_features
from .model import FeatureBatch

_CHUNK = 32


def low_arrays(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed DCT / Haar / SRM maps for a float ``(N, H, W, 3)`` stack."""
    parts = [low_features(T.Tensor(rgb[i:i + _CHUNK])) for i in range(0, len(rgb), _CHUNK)]
    return tuple(np.concatenate([p[k].data for p in parts]) for k in range(3))


@dataclass
class FeatureSet:
    rgb: np.ndarray
    low: tuple[np.ndarray, np.ndarray, np.ndarray]
    mid: np.ndarray
    high: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    types: np.ndarray

    def __len__(self) -> int:
        return len(self.rgb)

    def batch(self, idx) -> FeatureBatch:
        idx = np.asarray(idx)
        return FeatureBatch(T.Tensor(self.rgb[idx]), self.mid[idx], self.high[idx],
                            tuple(f[idx] for f in self.low))

    def targets(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = np.asarray(idx)
        return self.labels[idx], self.masks[idx], self.types[idx]


def image_features(images, seg_maps=None, depth_maps=None, seed: int = 0):
    """``(rgb, low, mid, high)`` arrays for a list of uint8 or float RGB images."""
    rgb = np.stack([to_float(im) for im in images])
    n = len(images)
    seg_maps = seg_maps if seg_maps is not None else [None] * n
    depth_maps = depth_maps if depth_maps is not None else [None] * n
    mid = np.stack([mid_features(im, seg, seed) for im, seg in zip(images, seg_maps)])
    high = np.stack([high_features(im, depth) for im, depth in zip(images, depth_maps)])
    return rgb, low_arrays(rgb), mid, high


def build_feature_set(samples: list[ForgerySample], seed: int = 0) -> FeatureSet:
    rgb, low, mid, high = image_features([s.image for s in samples], seed=seed)
    return FeatureSet(rgb, low, mid, high,
                      np.array([s.label for s in samples], dtype=np.int64),
                      np.stack([s.mask for s in samples]).astype(np.float64),
                      np.array([s.mtype for s in samples], dtype=np.int64))
