"""Finite-difference checks for every autodiff primitive and the full model."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .model import FeatureBatch, FusionNet, ModelConfig, total_loss
from .tensor import Tensor

H = 1e-5


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1e-12, abs(a) + abs(n))


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """Op name -> (function of input tensors returning a tensor, input arrays)."""
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    away = lambda *s: rng.choice([-1.0, 1.0], s) * rng.uniform(0.3, 2.0, s)  # noqa: E731
    shrink, grow = T.resample_matrix(6, 3), T.resample_matrix(6, 4)
    return {
        "add": (T.add, [r(3, 4), r(4)]),
        "sub": (T.sub, [r(3, 4), r(3, 1)]),
        "mul": (T.mul, [r(3, 4), r(1, 4)]),
        "div": (T.div, [r(3, 4), pos(3, 4)]),
        "neg": (T.neg, [r(5)]),
        "scale": (lambda a: T.scale(a, -1.7), [r(2, 3)]),
        "square": (T.square, [r(4)]),
        "abs": (T.abs, [away(6)]),
        "exp": (T.exp, [r(4)]),
        "log": (T.log, [pos(4)]),
        "sigmoid": (T.sigmoid, [3 * r(6)]),
        "softplus": (T.softplus, [3 * r(6)]),
        "gelu": (T.gelu, [2 * r(3, 5)]),
        "matmul": (lambda a, b, c: T.concat([T.reshape(T.matmul(a, b), (-1,)),
                                             T.reshape(T.matmul(a, c), (-1,))]),
                   [r(2, 3, 4), r(4, 5), r(2, 4, 2)]),
        "linear": (T.linear, [r(2, 3, 4), r(4, 5), r(5)]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [r(2, 3, 4)]),
        "reshape": (lambda a: T.reshape(a, (4, 3)), [r(2, 6)]),
        "concat": (lambda a, b: T.concat([a, b], axis=-1), [r(2, 3), r(2, 2)]),
        "sum": (lambda a: T.sum(a, axis=1), [r(2, 3, 4)]),
        "softmax": (T.softmax_rows, [2 * r(3, 5)]),
        "log_softmax": (T.log_softmax, [2 * r(3, 5)]),
        "layernorm": (T.layernorm, [r(3, 6), r(6), r(6)]),
        "conv2d": (lambda x, k: T.concat([T.reshape(T.conv2d(x, k, "same"), (-1,)),
                                          T.reshape(T.conv2d(x, k, "valid"), (-1,))]),
                   [r(2, 5, 5, 2), r(3, 3, 2, 3)]),
        "resample": (lambda x: T.concat([T.reshape(T.resample(x, shrink, grow), (-1,)),
                                         T.reshape(T.resample(x, grow, shrink), (-1,))]),
                     [r(2, 6, 6, 2)]),
    }


def check_primitive(fn: Callable, arrays: list[np.ndarray], rng: np.random.Generator) -> float:
    """Worst relative error over all coordinates of all inputs."""
    inputs = [Tensor(a.copy()) for a in arrays]
    probe = fn(*inputs)
    weights = Tensor(rng.standard_normal(probe.shape))
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(t, i=i):
            args = list(inputs)
            args[i] = t
            return T.sum(T.mul(fn(*args), weights))
        worst = max(worst, T.finite_diff_check(f, x, H))
    return worst


def tiny_model_problem(seed: int, size: int = 64):
    """A freshly initialised model, one image and its targets (64 tokens at size 64)."""
    rng = np.random.default_rng([seed, 11])
    model = FusionNet(ModelConfig(image_size=size), seed=seed)
    rgb = rng.uniform(0.1, 0.9, (1, size, size, 3))
    mid = rng.standard_normal((1, size, size, 5))
    high = rng.uniform(0, 1, (1, size, size, 4))
    mask = np.zeros((1, size, size))
    mask[0, size // 4:size // 2, size // 4:3 * size // 4] = 1.0
    return model, rgb, mid, high, (np.array([1]), mask, np.array([2]))


def check_model(seed: int, per_tensor: int = 2) -> float:
    """Full forward through fuse, all heads and the loss; checks pixels and sampled weights."""
    model, rgb, mid, high, (labels, masks, types) = tiny_model_problem(seed)
    x = Tensor(rgb, requires_grad=True)

    def loss_value() -> float:
        out = model(FeatureBatch(x, mid, high))
        return float(total_loss(out, labels, masks, types).total.data)

    with T.Graph() as g:
        out = model(FeatureBatch(x, mid, high))
        loss = total_loss(out, labels, masks, types).total
    g.backward(loss)
    named = dict(model.named_parameters())
    picks = ["heads.cls.weight", "heads.seg.weight", "heads.type.weight", "heads.type.bias",
             "enc_low.layers.0.wq.weight", "enc_mid.layers.1.ff1.weight", "enc_high.layers.3.ff2.weight",
             "enc_low.norm.gamma", "enc_mid.layers.2.ln1.beta", "low.conv_srm.weight", "low.proj.weight",
             "mid.conv.weight", "high.proj.bias"]
    targets = [(x, x.grad)] + [(named[n], named[n].grad) for n in picks]
    worst = 0.0
    for t, grad in targets:
        # largest analytic entries: well above the finite-difference noise floor
        flat = np.argsort(-np.abs(grad).ravel(), kind="stable")[:per_tensor]
        for f in flat:
            c = np.unravel_index(f, grad.shape)
            orig = t.data[c]
            t.data[c] = orig + H
            fp = loss_value()
            t.data[c] = orig - H
            fm = loss_value()
            t.data[c] = orig
            worst = max(worst, _rel_err(float(grad[c]), (fp - fm) / (2 * H)))
    T.zero_grad(model.parameters())
    return worst


def inject_fault(op: str, factor: float = 1.5) -> None:
    """Scale the backward output of ``op`` (for testing that the checker catches it)."""
    if op not in T.PRIMITIVES:
        raise ValueError(f"unknown primitive {op!r}")

    def hook(node, g):
        return tuple(None if gi is None else gi * factor for gi in node.backward(g))

    T._BACKWARD_HOOKS[op] = hook


def clear_faults() -> None:
    T._BACKWARD_HOOKS.clear()


def run_gradcheck(seed: int = 7, include_model: bool = True) -> list[tuple[str, float]]:
    """``(name, worst relative error)`` for each primitive, then ``model``."""
    rng = np.random.default_rng(seed)
    cases = primitive_cases(rng)
    missing = set(T.PRIMITIVES) - set(cases)
    if missing:
        raise RuntimeError(f"no gradient case for {sorted(missing)}")
    results = [(name, check_primitive(*cases[name], rng)) for name in T.PRIMITIVES]
    if include_model:
        results.append(("model", check_model(seed)))
    return results
