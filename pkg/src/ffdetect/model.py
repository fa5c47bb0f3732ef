"""Branch encoders, pairwise cross-attention fusion, task heads and losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import CLASSES
from .high import HighBranch
from .low import LowBranch, low_features
from .mid import MidBranch
from .nn import LayerNorm, Linear, Module, token_grid
from .tensor import ShapeError, Tensor

DIM = 256
HEADS = 8
LAYERS = 4
FFN = 1024
BRANCHES = ("low", "mid", "high")
FUSIONS = ("cross", "projected", "concat")
DEFAULT_WEIGHTS = (1.0, 0.5, 0.3)
DICE_EPS = 1.0
DICE_WEIGHT = 1.0


EMBED_SCALE = math.sqrt(DIM)


def positional_encoding(grid: int, dim: int = DIM) -> np.ndarray:
    """Fixed 2-D sinusoidal code, ``(grid*grid, dim)``: rows in the first half, columns in the second."""
    half = dim // 2
    freqs = 1.0 / 10000.0 ** (np.arange(0, half, 2) / half)
    pos = np.arange(grid)[:, None] * freqs[None, :]
    axis = np.empty((grid, half))
    axis[:, 0::2] = np.sin(pos)
    axis[:, 1::2] = np.cos(pos)
    rows = np.repeat(axis, grid, axis=0)
    cols = np.tile(axis, (grid, 1))
    return np.concatenate([rows, cols], axis=1)


class EncoderLayer(Module):
    """Pre-LN block: x + MHSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, rng: np.random.Generator, dim: int = DIM, heads: int = HEADS, ffn: int = FFN):
        self.ln1 = LayerNorm(dim)
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self.ln2 = LayerNorm(dim)
        self.ff1 = Linear(rng, dim, ffn)
        self.ff2 = Linear(rng, ffn, dim)
        self._heads = heads
        self._attn: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return T.transpose(T.reshape(x, (b, n, self._heads, d // self._heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.ln1(x)
        q = self._split(T.scale(self.wq(h), 1.0 / math.sqrt(d // self._heads)))
        k = self._split(self.wk(h))
        v = self._split(self.wv(h))
        att = T.softmax_rows(T.matmul(q, T.transpose(k)))
        self._attn = att.data
        ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
        x = T.add(x, self.wo(ctx))
        return T.add(x, self.ff2(T.gelu(self.ff1(self.ln2(x)))))


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, layers: int = LAYERS, dim: int = DIM):
        self.layers = [EncoderLayer(rng, dim) for _ in range(layers)]
        self.norm = LayerNorm(dim)
        self._dim = dim

    def __call__(self, tokens: Tensor) -> Tensor:
        """Encode ``(N, dim)`` or ``(B, N, dim)`` tokens laid out on a square grid."""
        single = tokens.ndim == 2
        if single:
            tokens = T.reshape(tokens, (1,) + tokens.shape)
        if tokens.ndim != 3 or tokens.shape[-1] != self._dim:
            raise ShapeError(f"encoder expects token dim {self._dim}, got {tokens.shape}")
        grid = math.isqrt(tokens.shape[1])
        if grid * grid != tokens.shape[1]:
            raise ShapeError(f"token count {tokens.shape[1]} is not a square grid")
        # embeddings scaled by sqrt(dim) so content is not swamped by the unit-amplitude code
        x = T.add(T.scale(tokens, EMBED_SCALE), Tensor(positional_encoding(grid, self._dim)))
        for layer in self.layers:
            x = layer(x)
        x = self.norm(x)
        return T.reshape(x, x.shape[1:]) if single else x

    def attention_maps(self) -> list[np.ndarray]:
        return [layer._attn for layer in self.layers if layer._attn is not None]


def cross_attention(q: Tensor, k: Tensor) -> Tensor:
    """``softmax(Q K^T / sqrt(d)) K``: no projections, values are the keys."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"cross_attention: token dims differ {q.shape} vs {k.shape}")
    d = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
    return T.matmul(T.softmax_rows(scores), k)


PAIRS = (("low", "mid"), ("mid", "high"), ("low", "high"))


def fuse(h_low: Tensor, h_mid: Tensor, h_high: Tensor, zero_cross: bool = False,
         attend=cross_attention) -> Tensor:
    """Sum of the three encodings plus low->mid, mid->high and low->high cross terms."""
    if not h_low.shape == h_mid.shape == h_high.shape:
        raise ShapeError(f"fuse: shapes differ {h_low.shape}, {h_mid.shape}, {h_high.shape}")
    out = T.add(T.add(h_low, h_mid), h_high)
    if zero_cross:
        return out
    hs = {"low": h_low, "mid": h_mid, "high": h_high}
    for a, b in PAIRS:
        out = T.add(out, attend(hs[a], hs[b]))
    return out


class ProjectedAttention(Module):
    """Cross-attention with learned Q/K/V maps (off by default)."""

    def __init__(self, rng: np.random.Generator, dim: int = DIM):
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)

    def __call__(self, q: Tensor, k: Tensor) -> Tensor:
        scores = T.scale(T.matmul(self.wq(q), T.transpose(self.wk(k))), 1.0 / math.sqrt(q.shape[-1]))
        return T.matmul(T.softmax_rows(scores), self.wv(k))


@dataclass
class ModelOutputs:
    cls_logits: Tensor   # (B, 2)
    mask_logits: Tensor  # (B, H, W)
    type_logits: Tensor  # (B, 7)

    @property
    def y_hat(self) -> np.ndarray:
        return T._sigmoid(self.cls_logits.data)

    @property
    def p_fake(self) -> np.ndarray:
        return self.y_hat[..., 1]

    @property
    def mask_hat(self) -> np.ndarray:
        return T._sigmoid(self.mask_logits.data)

    @property
    def type_hat(self) -> np.ndarray:
        z = self.type_logits.data
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)


class Heads(Module):
    """GAP -> 2-d linear; per-token 1x1 conv upsampled to the image; GAP -> 7-d linear."""

    def __init__(self, rng: np.random.Generator, dim: int = DIM):
        self.cls = Linear(rng, dim, 2)
        self.seg = Linear(rng, dim, 1)
        self.type = Linear(rng, dim, len(CLASSES))

    def __call__(self, fused: Tensor, out_hw: tuple[int, int]) -> ModelOutputs:
        if fused.ndim == 2:
            fused = T.reshape(fused, (1,) + fused.shape)
        b, n, d = fused.shape
        grid = math.isqrt(n)
        if grid * grid != n or d != self.cls.weight.shape[0]:
            raise ShapeError(f"heads expect (B, G*G, {self.cls.weight.shape[0]}), got {fused.shape}")
        gap = T.mean(fused, axis=1)
        seg = T.reshape(self.seg(fused), (b, grid, grid, 1))
        up = T.resample(seg, T.resample_matrix(grid, out_hw[0]), T.resample_matrix(grid, out_hw[1]))
        return ModelOutputs(self.cls(gap), T.reshape(up, (b,) + tuple(out_hw)), self.type(gap))


# -------------------------------------------------------------------- losses

@dataclass
class LossBreakdown:
    total: Tensor
    l_cls: float
    l_loc: float
    l_type: float
    weights: tuple[float, float, float]

    def as_dict(self) -> dict[str, float]:
        return {"l_cls": self.l_cls, "l_loc": self.l_loc, "l_type": self.l_type,
                "l_total": float(self.total.data)}


def _bce_logits(z: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(z) against ``target``."""
    return T.sub(T.softplus(z), T.mul(z, Tensor(target)))


def cls_loss(out: ModelOutputs, labels: np.ndarray) -> Tensor:
    z = T.matmul(out.cls_logits, Tensor(np.array([[0.0], [1.0]])))
    return T.mean(_bce_logits(z, np.asarray(labels, dtype=np.float64).reshape(-1, 1)))


def loc_loss(out: ModelOutputs, masks: np.ndarray) -> Tensor:
    z = out.mask_logits
    m = np.asarray(masks, dtype=np.float64)
    bce = T.mean(_bce_logits(z, m))
    p = T.sigmoid(z)
    axes = (1, 2)
    inter = T.sum(T.mul(p, Tensor(m)), axis=axes)
    num = T.add(T.scale(inter, 2.0), DICE_EPS)
    den = T.add(T.sum(p, axis=axes), Tensor(m.sum(axis=axes) + DICE_EPS))
    dice = T.div(num, den)
    return T.add(bce, T.scale(T.sub(1.0, T.mean(dice)), DICE_WEIGHT))


def type_loss(out: ModelOutputs, types: np.ndarray) -> Tensor:
    onehot = np.eye(len(CLASSES))[np.asarray(types, dtype=np.int64)]
    return T.neg(T.mean(T.sum(T.mul(T.log_softmax(out.type_logits), Tensor(onehot)), axis=-1)))


def total_loss(out: ModelOutputs, labels, masks, types,
               weights: tuple[float, float, float] = DEFAULT_WEIGHTS) -> LossBreakdown:
    """Weighted classification + localization + type loss with its per-term values."""
    labels = np.asarray(labels)
    types = np.asarray(types)
    masks = np.asarray(masks, dtype=np.float64)
    if not np.all(np.isfinite(out.cls_logits.data)) or not np.all(np.isfinite(out.mask_logits.data)) \
            or not np.all(np.isfinite(out.type_logits.data)):
        raise ValueError("model outputs contain non-finite values")
    b = out.cls_logits.shape[0]
    if labels.shape != (b,) or not np.isin(labels, (0, 1)).all():
        raise ValueError(f"labels must be {b} values in {{0, 1}}, got {labels!r}")
    if types.shape != (b,) or types.min() < 0 or types.max() >= len(CLASSES):
        raise ValueError(f"types must be {b} values in [0, {len(CLASSES)}), got {types!r}")
    if masks.shape != out.mask_logits.shape:
        raise ShapeError(f"mask shape {masks.shape} does not match prediction {out.mask_logits.shape}")
    lc, ll, lt = cls_loss(out, labels), loc_loss(out, masks), type_loss(out, types)
    w_cls, w_loc, w_type = weights
    total = T.add(T.add(T.scale(lc, w_cls), T.scale(ll, w_loc)), T.scale(lt, w_type))
    return LossBreakdown(total, float(lc.data), float(ll.data), float(lt.data), tuple(weights))


# -------------------------------------------------------------------- full network

@dataclass
class ModelConfig:
    image_size: int = 64
    branches: tuple[str, ...] = BRANCHES
    fusion: str = "cross"
    layers: int = LAYERS

    def __post_init__(self):
        self.branches = tuple(self.branches)
        bad = [b for b in self.branches if b not in BRANCHES]
        if bad:
            raise ValueError(f"unknown branches {bad}; choose from {BRANCHES}")
        if not self.branches:
            raise ValueError("at least one branch must be enabled")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        token_grid(self.image_size)

    def to_dict(self) -> dict:
        return {"image_size": self.image_size, "branches": list(self.branches),
                "fusion": self.fusion, "layers": self.layers}


@dataclass
class FeatureBatch:
    """Network inputs for ``B`` images of equal size.

    ``rgb`` is ``(B, H, W, 3)`` in [0, 1]; pass a Tensor with
    ``requires_grad`` to differentiate with respect to pixels.  ``low``
    optionally caches the fixed low-level transforms of ``rgb``.
    """
    rgb: Tensor
    mid: np.ndarray
    high: np.ndarray
    low: tuple[np.ndarray, np.ndarray, np.ndarray] | None = field(default=None)

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]


class FusionNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.low = LowBranch(rng)
        self.mid = MidBranch(rng)
        self.high = HighBranch(rng)
        self.enc_low = Encoder(rng, config.layers)
        self.enc_mid = Encoder(rng, config.layers)
        self.enc_high = Encoder(rng, config.layers)
        if config.fusion == "projected":
            self.cross = [ProjectedAttention(rng) for _ in PAIRS]
        elif config.fusion == "concat":
            self.merge = Linear(rng, 3 * DIM, DIM)
        self.heads = Heads(rng)

    def encode(self, batch: FeatureBatch) -> dict[str, Tensor]:
        """Encoded tokens per branch; disabled branches are all-zero."""
        h, w = batch.size
        grid = token_grid(min(h, w))
        b = batch.rgb.shape[0]
        out = {}
        for name in BRANCHES:
            if name not in self.config.branches:
                out[name] = Tensor(np.zeros((b, grid * grid, DIM)))
                continue
            if name == "low":
                feats = low_features(batch.rgb) if batch.low is None or batch.rgb.requires_grad \
                    else tuple(Tensor(f) for f in batch.low)
                tokens = self.low(*feats, grid)
            elif name == "mid":
                tokens = self.mid(Tensor(batch.mid), grid)
            else:
                tokens = self.high(Tensor(batch.high), grid)
            out[name] = getattr(self, f"enc_{name}")(tokens)
        return out

    def fuse(self, hs: dict[str, Tensor], zero_cross: bool = False) -> Tensor:
        if self.config.fusion == "concat":
            return self.merge(T.concat([hs[n] for n in BRANCHES], axis=-1))
        if self.config.fusion == "projected":
            pairs = iter(self.cross)
            return fuse(hs["low"], hs["mid"], hs["high"], zero_cross, lambda q, k: next(pairs)(q, k))
        return fuse(hs["low"], hs["mid"], hs["high"], zero_cross)

    def __call__(self, batch: FeatureBatch, zero_cross: bool = False) -> ModelOutputs:
        return self.heads(self.fuse(self.encode(batch), zero_cross), batch.size)
