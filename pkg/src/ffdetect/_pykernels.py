"""Reference (pure Python + numpy) versions of the compiled kernels.

Semantics must match ``_ckernels.pyx`` exactly; tests run both.
"""

from collections import deque

import numpy as np

_N8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))
_N4 = ((-1, 0), (0, -1), (0, 1), (1, 0))


TAN_22_5 = 0.41421356237309503
TAN_67_5 = 2.414213562373095


def _direction_bins(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    # 0: horizontal gradient, 1: 45 deg, 2: vertical, 3: 135 deg
    ax, ay = np.abs(gx), np.abs(gy)
    d = np.where(gx * gy > 0, 1, 3)
    d = np.where(ay >= TAN_67_5 * ax, 2, d)
    d = np.where(ay <= TAN_22_5 * ax, 0, d)
    return d.astype(np.int64)


# (row, col) step along the gradient for each direction bin
_STEPS = ((0, 1), (1, 1), (1, 0), (1, -1))


def nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Non-maximum suppression along 4 quantised gradient directions.

    A pixel survives if it is strictly above its neighbour behind and at
    least equal to its neighbour ahead, so plateaus two pixels wide keep
    exactly one pixel.  The one-pixel frame is always suppressed.
    """
    mag = np.ascontiguousarray(mag, dtype=np.float64)
    h, w = mag.shape
    out = np.zeros_like(mag)
    if h < 3 or w < 3:
        return out
    d = _direction_bins(gx, gy)
    core = mag[1:-1, 1:-1]
    keep = np.zeros(core.shape, dtype=bool)
    for b, (dr, dc) in enumerate(_STEPS):
        ahead = mag[1 + dr:h - 1 + dr, 1 + dc:w - 1 + dc]
        behind = mag[1 - dr:h - 1 - dr, 1 - dc:w - 1 - dc]
        sel = d[1:-1, 1:-1] == b
        keep |= sel & (core > behind) & (core >= ahead)
    out[1:-1, 1:-1] = np.where(keep, core, 0.0)
    return out


def hysteresis(strength: np.ndarray, low: float, high: float) -> np.ndarray:
    """Keep weak pixels (>= low) 8-connected to a strong pixel (>= high)."""
    s = np.asarray(strength, dtype=np.float64)
    h, w = s.shape
    weak = (s >= low) & (s > 0)
    out = np.zeros((h, w), dtype=np.uint8)
    q = deque()
    for r in range(h):
        for c in range(w):
            if weak[r, c] and s[r, c] >= high and not out[r, c]:
                out[r, c] = 1
                q.append((r, c))
                while q:
                    cr, cc = q.popleft()
                    for dr, dc in _N8:
                        nr, nc = cr + dr, cc + dc
                        if 0 <= nr < h and 0 <= nc < w and weak[nr, nc] and not out[nr, nc]:
                            out[nr, nc] = 1
                            q.append((nr, nc))
    return out


def label_components(mask: np.ndarray, connectivity: int = 4) -> tuple[np.ndarray, int]:
    """Label connected foreground pixels 1..n in raster order of first pixel."""
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    nbrs = _N4 if connectivity == 4 else _N8
    labels = np.zeros((h, w), dtype=np.int64)
    n = 0
    q = deque()
    for r in range(h):
        for c in range(w):
            if m[r, c] and labels[r, c] == 0:
                n += 1
                labels[r, c] = n
                q.append((r, c))
                while q:
                    cr, cc = q.popleft()
                    for dr, dc in nbrs:
                        nr, nc = cr + dr, cc + dc
                        if 0 <= nr < h and 0 <= nc < w and m[nr, nc] and labels[nr, nc] == 0:
                            labels[nr, nc] = n
                            q.append((nr, nc))
    return labels, n


def kmeans_assign(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest centre per point (squared Euclidean); ties go to the lowest index."""
    x = np.asarray(points, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    dist = np.zeros((x.shape[0], c.shape[0]))
    for d in range(x.shape[1]):
        diff = x[:, d:d + 1] - c[None, :, d]
        dist += diff * diff
    return np.argmin(dist, axis=1).astype(np.int64)


def window_max(plane: np.ndarray, radius: int) -> np.ndarray:
    """Max over a (2r+1)^2 window, clamped at the borders."""
    p = np.asarray(plane, dtype=np.float64)
    if radius <= 0:
        return p.copy()
    padded = np.pad(p, radius, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (2 * radius + 1, 2 * radius + 1))
    return win.max(axis=(2, 3))


GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def gelu_forward(x):
    """Tanh-approximated GELU; returns (y, t) with t the inner tanh, kept for backward."""
    x = np.asarray(x, dtype=np.float64)
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(x, t, g):
    x = np.asarray(x, dtype=np.float64)
    inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * inner)


def adamw_update(w, g, m, v, lr, beta1, beta2, eps, wd, step):
    """In-place AdamW on one parameter array: w <- w * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    w *= 1.0 - lr * wd
    w -= lr * (m_hat / (np.sqrt(v_hat) + eps))
