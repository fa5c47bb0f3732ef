"""Parameter containers and the few layers the network is built from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Collects ``Tensor`` parameters and sub-modules from instance attributes.

    Parameter names are dotted attribute paths in assignment order, which
    makes the checkpoint layout stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = [n for n in own if n not in state]
        extra = [n for n in state if n not in own]
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for n, p in own.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{n}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.weight = uniform_init(rng, (n_in, n_out), n_in)
        self.bias = zeros_param((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv(Module):
    """Same-padded 2-D convolution with bias, channels-last."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, size: int = 3):
        self.weight = uniform_init(rng, (size, size, c_in, c_out), size * size * c_in)
        self.bias = zeros_param((c_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.conv2d(x, self.weight, pad="same"), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = ones_param((dim,))
        self.beta = zeros_param((dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta)


def token_grid(image_side: int) -> int:
    """Side of the common token grid: one token per 8x8 pixels, capped at 16."""
    if image_side < 8 or image_side % 8:
        raise ValueError(f"image side {image_side} must be a positive multiple of 8")
    return min(image_side // 8, 16)


def to_grid(x: Tensor, grid: int) -> Tensor:
    """Resample a ``(B, h, w, C)`` map onto ``grid x grid`` (box or bilinear)."""
    h, w = x.shape[-3], x.shape[-2]
    if h == grid and w == grid:
        return x
    return T.resample(x, T.resample_matrix(h, grid), T.resample_matrix(w, grid))


def flatten_grid(x: Tensor) -> Tensor:
    """``(B, G, G, C) -> (B, G*G, C)`` in row-major token order."""
    b, g1, g2, c = x.shape
    return T.reshape(x, (b, g1 * g2, c))
