"""Optimizer, schedule, FGSM and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from . import tensor as T
from .checkpoint import save_checkpoint
from .data import ForgerySample, gen_spectral_dataset, gen_toy_dataset, load_dataset
from .evaluation import localization_scores, predict
from .features import FeatureSet, build_feature_set, image_features
from .model import BRANCHES, FUSIONS, FeatureBatch, FusionNet, LossBreakdown, ModelConfig, cls_loss, total_loss
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "lr", "l_cls", "l_loc", "l_type", "l_total", "acc_train", "acc_val", "iou_val")
CHECKPOINT_NAME = "checkpoint.ffck"
METRICS_NAME = "metrics.csv"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config: " + "; ".join(problems))
        self.problems = problems


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 0.01
    t_max: int = 100
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    fgsm_eps: float = 0.03
    adv_mix: list = field(default_factory=lambda: [0.7, 0.3])
    loss_weights: list = field(default_factory=lambda: [1.0, 0.5, 0.3])
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    image_size: int = 64
    n_per_class: int = 32
    val_per_class: int = 8
    test_per_class: int = 16
    warmup_epochs: int = 10
    adv_epochs: int = 20
    dataset: str = "toy"
    branches: list = field(default_factory=lambda: list(BRANCHES))
    fusion: str = "cross"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Build from a JSON mapping, reporting every bad field at once."""
        if not isinstance(d, dict):
            raise ConfigError([f"config must be a JSON object, got {type(d).__name__}"])
        fields = {f.name: f for f in dataclasses.fields(cls)}
        problems = [f"{k}: unknown field" for k in d if k not in fields]
        defaults = cls()
        for k, v in d.items():
            if k not in fields:
                continue
            want = type(getattr(defaults, k))
            ok = (isinstance(v, bool) is (want is bool)) and (
                isinstance(v, want) or (want is float and isinstance(v, int)))
            if not ok:
                problems.append(f"{k}: expected {want.__name__}, got {type(v).__name__}")
        bad = {p.split(":")[0] for p in problems}
        good = {k: (float(v) if isinstance(getattr(defaults, k), float) else v)
                for k, v in d.items() if k not in bad}
        cfg = cls(**good)
        problems += cfg.problems()
        if problems:
            raise ConfigError(problems)
        return cfg

    def validate(self) -> None:
        p = self.problems()
        if p:
            raise ConfigError(p)

    def problems(self) -> list[str]:
        p = []
        for name in ("lr", "t_max", "epochs", "batch_size", "fgsm_eps", "beta1", "beta2", "adam_eps",
                     "n_per_class", "val_per_class", "test_per_class"):
            if not getattr(self, name) > 0:
                p.append(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("lr_min", "weight_decay", "warmup_epochs", "adv_epochs", "seed"):
            if getattr(self, name) < 0:
                p.append(f"{name}: must be >= 0, got {getattr(self, name)}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            p.append(f"beta1/beta2: must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr_min > self.lr:
            p.append(f"lr_min: {self.lr_min} exceeds lr {self.lr}")
        if len(self.adv_mix) != 2 or any(not isinstance(x, (int, float)) or x < 0 for x in self.adv_mix) \
                or abs(sum(self.adv_mix) - 1.0) > 1e-12:
            p.append(f"adv_mix: need two non-negative weights summing to 1, got {self.adv_mix}")
        if len(self.loss_weights) != 3 or any(not isinstance(x, (int, float)) or x < 0 for x in self.loss_weights):
            p.append(f"loss_weights: need three non-negative weights, got {self.loss_weights}")
        if self.image_size < 32 or self.image_size % 8:
            p.append(f"image_size: must be a multiple of 8 and >= 32, got {self.image_size}")
        if self.warmup_epochs + self.adv_epochs > self.epochs:
            p.append(f"warmup_epochs + adv_epochs ({self.warmup_epochs + self.adv_epochs}) exceed epochs ({self.epochs})")
        bad = [b for b in self.branches if b not in BRANCHES]
        if bad or not self.branches or len(set(self.branches)) != len(self.branches):
            p.append(f"branches: need a non-empty subset of {list(BRANCHES)}, got {self.branches}")
        if self.fusion not in FUSIONS:
            p.append(f"fusion: must be one of {list(FUSIONS)}, got {self.fusion!r}")
        if not isinstance(self.dataset, str) or not self.dataset:
            p.append("dataset: must be 'toy', 'spectral' or a directory path")
        return p

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def model_config(self) -> ModelConfig:
        return ModelConfig(image_size=self.image_size, branches=tuple(self.branches), fusion=self.fusion)


def reference_config() -> TrainConfig:
    """Desk-scale run: 64 px, 32 per class, batch 8, 30 epochs, lr 1e-3."""
    return TrainConfig(lr=1e-3, t_max=30, epochs=30, batch_size=8, image_size=64, n_per_class=32,
                       val_per_class=8, test_per_class=16, warmup_epochs=0, adv_epochs=0)


def load_config(path: str | os.PathLike) -> TrainConfig:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"not valid JSON: {exc}"]) from None
    return TrainConfig.from_dict(d)


# -------------------------------------------------------------------- optimizer pieces

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, wd: float = 0.01) -> None:
    """One in-place AdamW update with bias correction and decoupled weight decay."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(f"adamw_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adamw_step: param {p.shape}, grad {g.shape}, moment {m.shape}")
    state.step += 1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not p.data.flags.c_contiguous or not p.data.flags.writeable:
            p.data = np.ascontiguousarray(p.data).copy()
        kernels.adamw_update(p.data, g, m, v, lr, beta1, beta2, eps, wd, state.step)


def cosine_lr(t: float, t_max: float, lr_max: float, lr_min: float = 0.0) -> float:
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    if t >= t_max:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / t_max))


def fgsm_perturb(img: np.ndarray, grad: np.ndarray, eps: float) -> np.ndarray:
    """``clip(I + eps * sign(grad), 0, 1)``, rounded so no pixel moves by more than ``eps``."""
    img = np.asarray(img, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not eps > 0:
        raise ValueError(f"fgsm eps must be > 0, got {eps}")
    if img.shape != grad.shape:
        raise ShapeError(f"fgsm: image {img.shape} vs gradient {grad.shape}")
    out = img + eps * np.sign(grad)
    # x + eps is rounded to nearest; step back one ulp where that overshot
    over = np.abs(out - img) > eps
    out[over] = np.nextafter(out[over], img[over])
    return np.clip(out, 0.0, 1.0)


@contextmanager
def frozen(params: list[Tensor]):
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def input_gradient(model: FusionNet, fs: FeatureSet, idx: np.ndarray) -> np.ndarray:
    """d L_cls / d pixels for one batch; parameters are not touched."""
    labels = fs.labels[idx]
    rgb = Tensor(fs.rgb[idx], requires_grad=True)
    with frozen(model.parameters()):
        with T.Graph() as g:
            out = model(FeatureBatch(rgb, fs.mid[idx], fs.high[idx]))
            loss = cls_loss(out, labels)
        g.backward(loss)
    return rgb.grad if rgb.grad is not None else np.zeros_like(rgb.data)


# -------------------------------------------------------------------- data

def _make_split(cfg: TrainConfig, n: int, split: int) -> list[ForgerySample]:
    if cfg.dataset == "toy":
        return gen_toy_dataset(n, cfg.image_size, cfg.seed, split)
    if cfg.dataset == "spectral":
        return gen_spectral_dataset(n, cfg.image_size, cfg.seed, split)
    sub = Path(cfg.dataset) / ("train", "val", "test")[split]
    return load_dataset(sub)


def training_samples(cfg: TrainConfig) -> tuple[list[ForgerySample], list[ForgerySample]]:
    return _make_split(cfg, cfg.n_per_class, 0), _make_split(cfg, cfg.val_per_class, 1)


def held_out_samples(cfg: TrainConfig) -> list[ForgerySample]:
    return _make_split(cfg, cfg.test_per_class, 2)


# -------------------------------------------------------------------- loop

@dataclass
class TrainResult:
    model: FusionNet
    rows: list[dict[str, str]]
    checkpoint: Path | None
    metrics: Path | None


def _fmt(v: float) -> str:
    return f"{v:.8g}"


def _check_finite(parts: dict[str, float], epoch: int, batch: int) -> None:
    for name, val in parts.items():
        if not math.isfinite(val):
            raise NonFiniteLossError(f"non-finite {name} ({val}) at epoch {epoch}, batch {batch}")


def _mixed(a: LossBreakdown, b: LossBreakdown, wa: float, wb: float) -> tuple[Tensor, dict[str, float]]:
    total = T.add(T.scale(a.total, wa), T.scale(b.total, wb))
    da, db = a.as_dict(), b.as_dict()
    parts = {k: wa * da[k] + wb * db[k] for k in da}
    parts["l_total"] = float(total.data)
    return total, parts


def train(cfg: TrainConfig, out_dir: str | os.PathLike | None = None,
          data: tuple[FeatureSet, FeatureSet] | None = None) -> TrainResult:
    """Run the configured schedule; writes metrics CSV and checkpoint into ``out_dir``."""
    cfg.validate()
    if data is None:
        train_s, val_s = training_samples(cfg)
        data = build_feature_set(train_s, cfg.seed), build_feature_set(val_s, cfg.seed)
    tr, va = data
    model = FusionNet(cfg.model_config(), seed=cfg.seed)
    params = model.parameters()
    state = AdamState()
    rng = np.random.default_rng([cfg.seed, 3])
    weights = tuple(cfg.loss_weights)
    log.info("training %d samples (%d val), %d params, loss weights %s",
             len(tr), len(va), model.num_parameters(), weights)
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cosine_lr(epoch - 1, cfg.t_max, cfg.lr, cfg.lr_min)
        warm = epoch <= cfg.warmup_epochs
        adversarial = epoch > cfg.epochs - cfg.adv_epochs
        w = (weights[0], 0.0, 0.0) if warm else weights
        perm = rng.permutation(len(tr))
        sums = {"l_cls": 0.0, "l_loc": 0.0, "l_type": 0.0, "l_total": 0.0}
        correct = 0
        nb = 0
        for b, start in enumerate(range(0, len(tr), cfg.batch_size)):
            idx = np.sort(perm[start:start + cfg.batch_size])
            labels, masks, types = tr.targets(idx)
            if adversarial:
                adv = fgsm_perturb(tr.rgb[idx], input_gradient(model, tr, idx), cfg.fgsm_eps)
                _, _, mid, high = image_features(list(adv), seed=cfg.seed)
                adv_batch = FeatureBatch(Tensor(adv), mid, high)
            with T.Graph() as g:
                out = model(tr.batch(idx))
                clean = total_loss(out, labels, masks, types, w)
                if adversarial:
                    attacked = total_loss(model(adv_batch), labels, masks, types, w)
                    loss, parts = _mixed(clean, attacked, *cfg.adv_mix)
                else:
                    loss, parts = clean.total, clean.as_dict()
            _check_finite(parts, epoch, b)
            g.backward(loss)
            adamw_step(params, [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params],
                       state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
            T.zero_grad(params)
            correct += int(np.sum((out.p_fake >= 0.5) == (labels == 1)))
            for k in sums:
                sums[k] += parts[k]
            nb += 1
        pred = predict(model, va, cfg.batch_size)
        acc_val = float(np.mean((pred.p_fake >= 0.5) == (va.labels == 1)))
        _, iou_val = localization_scores(pred, va.masks, va.labels == 1)
        row = {"epoch": str(epoch), "lr": _fmt(lr), **{k: _fmt(v / nb) for k, v in sums.items()},
               "acc_train": _fmt(correct / len(tr)), "acc_val": _fmt(acc_val),
               "iou_val": _fmt(iou_val) if math.isfinite(iou_val) else ""}
        rows.append(row)
        log.info("epoch %d %s", epoch, " ".join(f"{k}={v}" for k, v in row.items() if k != "epoch"))
    ckpt = metrics = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / METRICS_NAME
        with open(metrics, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(METRICS_HEADER), lineterminator="\n")
            wr.writeheader()
            wr.writerows(rows)
        ckpt = out / CHECKPOINT_NAME
        save_checkpoint(model, ckpt, cfg.to_dict())
    return TrainResult(model, rows, ckpt, metrics)
