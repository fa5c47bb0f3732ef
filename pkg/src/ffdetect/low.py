"""Low-level branch: block DCT, Haar subbands and SRM noise residuals.

The feature extractors are written with autodiff ops so that gradients with
respect to the input image exist (needed for FGSM); they carry no learned
parameters.  :class:`LowBranch` holds the learned convolutions and the
projection to 256-d tokens.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .imaging import LUMA, to_float
from .nn import Conv, Linear, Module, flatten_grid, to_grid
from .tensor import Tensor

TOKEN_DIM = 256

# -------------------------------------------------------------------- DCT

#: unnormalised DCT-II basis, ``DCT_BASIS[u, x] = cos(pi u (2x + 1) / 16)``
DCT_BASIS = np.cos(np.pi * np.outer(np.arange(8), 2 * np.arange(8) + 1) / 16.0)
# DCT_BASIS @ DCT_BASIS.T == diag(8, 4, ..., 4)
_DCT_INV_SCALE = np.array([1 / 8] + [1 / 4] * 7)


def _check_div(plane: np.ndarray, k: int, what: str) -> None:
    h, w = plane.shape[:2]
    if h % k or w % k:
        raise ValueError(f"{what}: dimensions {h}x{w} must be multiples of {k}")


def block_dct(gray: np.ndarray) -> np.ndarray:
    """Unnormalised 2-D DCT of each non-overlapping 8x8 block.

    Returns an ``(H/8, W/8, 8, 8)`` grid; ``[i, j, u, v]`` is coefficient
    ``(u, v)`` of block ``(i, j)``.  An all-ones block has DC value 64.
    """
    gray = np.asarray(gray, dtype=np.float64)
    _check_div(gray, 8, "block_dct")
    h, w = gray.shape
    blocks = gray.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    return DCT_BASIS @ blocks @ DCT_BASIS.T


def block_idct(grid: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`block_dct`."""
    s = _DCT_INV_SCALE
    blocks = DCT_BASIS.T @ (s[:, None] * grid * s[None, :]) @ DCT_BASIS
    nh, nw = grid.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(nh * 8, nw * 8)


# -------------------------------------------------------------------- Haar

# columns LH, HL, HH over a cell flattened as (a, b, c, d) = [[a, b], [c, d]]
_HAAR_DETAIL = 0.5 * np.array([[1, 1, 1],
                               [-1, 1, -1],
                               [1, -1, -1],
                               [-1, -1, 1]], dtype=np.float64)
_HAAR_LL = 0.5 * np.ones(4)


def _cells(gray: np.ndarray) -> np.ndarray:
    h, w = gray.shape
    return gray.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3).reshape(h // 2, w // 2, 4)


def haar_dwt(gray: np.ndarray, keep_ll: bool = False):
    """One-level Haar transform with 1/2 normalisation per 2x2 cell.

    Returns ``(LH, HL, HH)``, or ``(LL, LH, HL, HH)`` with ``keep_ll``.
    """
    gray = np.asarray(gray, dtype=np.float64)
    _check_div(gray, 2, "haar_dwt")
    cells = _cells(gray)
    det = cells @ _HAAR_DETAIL
    bands = (det[..., 0], det[..., 1], det[..., 2])
    if keep_ll:
        return (cells @ _HAAR_LL,) + bands
    return bands


def haar_idwt(ll: np.ndarray, lh: np.ndarray, hl: np.ndarray, hh: np.ndarray) -> np.ndarray:
    a = (ll + lh + hl + hh) / 2
    b = (ll - lh + hl - hh) / 2
    c = (ll + lh - hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    h, w = ll.shape
    out = np.empty((2 * h, 2 * w))
    out[0::2, 0::2], out[0::2, 1::2], out[1::2, 0::2], out[1::2, 1::2] = a, b, c, d
    return out


# -------------------------------------------------------------------- SRM bank

def _embed(k) -> np.ndarray:
    k = np.asarray(k, dtype=np.int64)
    out = np.zeros((5, 5), dtype=np.int64)
    o = (5 - k.shape[0]) // 2
    out[o:o + k.shape[0], o:o + k.shape[1]] = k
    return out


def _build_srm() -> tuple[np.ndarray, np.ndarray]:
    kernels, divisors = [], []
    # first order: neighbour minus centre, 8 directions
    for dr, dc in ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)):
        k = np.zeros((3, 3), dtype=np.int64)
        k[1, 1] = -1
        k[1 + dr, 1 + dc] = 1
        kernels.append(_embed(k))
        divisors.append(1)
    # second order [1, -2, 1]: horizontal, vertical, two diagonals
    for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
        k = np.zeros((3, 3), dtype=np.int64)
        k[1, 1] = -2
        k[1 + dr, 1 + dc] = 1
        k[1 - dr, 1 - dc] = 1
        kernels.append(_embed(k))
        divisors.append(2)
    # third order [1, -3, 3, -1] with the centre on the -3 tap, 8 directions
    for dr, dc in ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)):
        k = np.zeros((5, 5), dtype=np.int64)
        k[2 - dr, 2 - dc] = 1
        k[2, 2] = -3
        k[2 + dr, 2 + dc] = 3
        k[2 + 2 * dr, 2 + 2 * dc] = -1
        kernels.append(k)
        divisors.append(3)
    sq3 = np.array([[-1, 2, -1], [2, -4, 2], [-1, 2, -1]])
    kernels.append(_embed(sq3))
    divisors.append(4)
    edge3 = np.array([[-1, 2, -1], [2, -4, 2], [0, 0, 0]])
    for rot in range(4):
        kernels.append(_embed(np.rot90(edge3, rot)))
        divisors.append(4)
    sq5 = np.array([[-1, 2, -2, 2, -1],
                    [2, -6, 8, -6, 2],
                    [-2, 8, -12, 8, -2],
                    [2, -6, 8, -6, 2],
                    [-1, 2, -2, 2, -1]])
    kernels.append(sq5)
    divisors.append(12)
    edge5 = sq5.copy()
    edge5[3:] = 0
    for rot in range(4):
        kernels.append(np.rot90(edge5, rot).copy())
        divisors.append(12)
    return np.stack(kernels), np.asarray(divisors, dtype=np.float64)


#: integer taps (30, 5, 5) and per-kernel divisors; effective kernel = taps / divisor
SRM_TAPS, SRM_DIVISORS = _build_srm()
SRM_BANK = SRM_TAPS / SRM_DIVISORS[:, None, None]
SRM_SHA256 = "e19ea8cebee963963a2b36f4d66851dfd06302c6d8553cd28d1f0d2b90af2385"


def srm_digest() -> str:
    return hashlib.sha256(np.ascontiguousarray(SRM_BANK, dtype="<f8").tobytes()).hexdigest()


def verify_srm_bank() -> None:
    if SRM_TAPS.shape != (30, 5, 5):
        raise RuntimeError(f"SRM bank has shape {SRM_TAPS.shape}")
    sums = SRM_TAPS.sum(axis=(1, 2))
    if np.any(sums != 0):
        raise RuntimeError(f"SRM kernels {np.flatnonzero(sums).tolist()} do not sum to zero")
    if srm_digest() != SRM_SHA256:
        raise RuntimeError("SRM bank does not match its published digest")


verify_srm_bank()

# (5, 5, 1, 30) kernel for conv2d; divisors applied after the integer taps
_SRM_KERNEL = T.Tensor(SRM_TAPS.transpose(1, 2, 0)[:, :, None, :].astype(np.float64))
_SRM_SCALE = T.Tensor(1.0 / SRM_DIVISORS)


def _edge_pad_matrix(n: int, r: int) -> np.ndarray:
    m = np.zeros((n + 2 * r, n))
    for i in range(n + 2 * r):
        m[i, min(max(i - r, 0), n - 1)] = 1.0
    return m


# -------------------------------------------------------------------- differentiable extractors

_LUMA_COL = T.Tensor(LUMA.reshape(3, 1))
_DCT_T = T.Tensor(DCT_BASIS)
_DCT_TT = T.Tensor(DCT_BASIS.T.copy())
_HAAR_T = T.Tensor(_HAAR_DETAIL)


def gray_tensor(rgb: Tensor) -> Tensor:
    """``(B, H, W, 3) -> (B, H, W, 1)`` luma."""
    return T.matmul(rgb, _LUMA_COL)


def dct_features(gray: Tensor) -> Tensor:
    """``(B, H, W, 1) -> (B, H/8, W/8, 64)``, coefficient ``u*8+v`` as channel."""
    b, h, w, _ = gray.shape
    x = T.reshape(gray, (b, h // 8, 8, w // 8, 8))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    x = T.matmul(T.matmul(_DCT_T, x), _DCT_TT)
    return T.reshape(x, (b, h // 8, w // 8, 64))


def dwt_features(gray: Tensor) -> Tensor:
    """``(B, H, W, 1) -> (B, H/2, W/2, 3)`` stacked LH, HL, HH."""
    b, h, w, _ = gray.shape
    x = T.reshape(gray, (b, h // 2, 2, w // 2, 2))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    x = T.reshape(x, (b, h // 2, w // 2, 4))
    return T.matmul(x, _HAAR_T)


def srm_features(gray: Tensor) -> Tensor:
    """``(B, H, W, 1) -> (B, H, W, 30)`` residuals, borders edge-replicated."""
    h, w = gray.shape[1], gray.shape[2]
    padded = T.resample(gray, _edge_pad_matrix(h, 2), _edge_pad_matrix(w, 2))
    return T.mul(T.conv2d(padded, _SRM_KERNEL, pad="valid"), _SRM_SCALE)


def low_features(rgb: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Raw (dct, dwt, srm) maps from a ``(B, H, W, 3)`` image in [0, 1]."""
    h, w = rgb.shape[1], rgb.shape[2]
    if h % 8 or w % 8:
        raise ValueError(f"low-level features need sides divisible by 8, got {h}x{w}")
    gray = gray_tensor(rgb)
    return dct_features(gray), dwt_features(gray), srm_features(gray)


def srm_residuals(img: np.ndarray) -> np.ndarray:
    """30 SRM residual planes ``(H, W, 30)`` of the image's grey plane."""
    img = np.asarray(img)
    gray = to_float(img) @ LUMA if img.ndim == 3 else np.asarray(img, dtype=np.float64)
    return srm_features(T.Tensor(gray[None, :, :, None])).data[0]


# -------------------------------------------------------------------- learned part

DCT_GAIN = 1.0 / 8.0
HF_GAIN = 10.0


class LowBranch(Module):
    """Conv per raw map, resample to the token grid, concat, project to 256."""

    def __init__(self, rng: np.random.Generator, dim: int = TOKEN_DIM):
        self.conv_dct = Conv(rng, 64, 64)
        self.conv_dwt = Conv(rng, 3, 16)
        self.conv_srm = Conv(rng, 30, 32)
        self.proj = Linear(rng, 64 + 16 + 32, dim)

    def __call__(self, dct: Tensor, dwt: Tensor, srm: Tensor, grid: int) -> Tensor:
        f_dct = T.gelu(self.conv_dct(T.scale(dct, DCT_GAIN)))
        f_dwt = T.gelu(self.conv_dwt(T.scale(dwt, HF_GAIN)))
        f_srm = T.gelu(self.conv_srm(T.scale(srm, HF_GAIN)))
        maps = [to_grid(f, grid) for f in (f_dct, f_dwt, f_srm)]
        return self.proj(flatten_grid(T.concat(maps, axis=-1)))
