"""Sample- and mask-level metrics, the perturbation sweep and branch ablations."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import CLASSES, ForgerySample
from .features import FeatureSet, build_feature_set
from .imaging import gaussian_blur, jpeg_simulate

# -------------------------------------------------------------------- metrics


def _check_pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.size == 0:
        raise ValueError("metric needs at least one sample")
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    return s, y.astype(np.int64)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction correct; a score equal to the threshold counts as positive."""
    s, y = _check_pair(scores, labels)
    return float(np.mean((s >= threshold).astype(np.int64) == y))


def auc_roc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg), ties at midrank."""
    s, y = _check_pair(scores, labels)
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined with a single class")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_score(scores, labels, threshold: float = 0.5) -> float:
    """Binary F1 for the positive class; 1.0 when there are no positives at all."""
    s, y = _check_pair(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    den = 2 * tp + fp + fn
    return 1.0 if den == 0 else 2 * tp / den


def pixel_f1_iou(mask_hat, mask_gt, threshold: float = 0.5) -> tuple[float, float]:
    """F1 and IoU of the binarised prediction; both empty -> (1, 1), one empty -> (0, 0)."""
    p = np.asarray(mask_hat)
    g = np.asarray(mask_gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    pb = p >= threshold
    gb = g >= 0.5
    if not pb.any() and not gb.any():
        return 1.0, 1.0
    if not pb.any() or not gb.any():
        return 0.0, 0.0
    tp = int(np.sum(pb & gb))
    fp = int(np.sum(pb & ~gb))
    fn = int(np.sum(~pb & gb))
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn)


# -------------------------------------------------------------------- reports

@dataclass
class EvalReport:
    accuracy: float
    auc_roc: float | None
    f1: float
    pixel_f1: float | None
    iou: float | None
    per_type_accuracy: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return sum(self.counts.values())

    def row(self) -> dict[str, str]:
        return {k: _fmt(v) for k, v in asdict(self).items() if k in REPORT_FIELDS}


REPORT_FIELDS = ("accuracy", "auc_roc", "f1", "pixel_f1", "iou")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


@dataclass
class Predictions:
    p_fake: np.ndarray     # (N,)
    mask_hat: np.ndarray   # (N, H, W)
    type_hat: np.ndarray   # (N, 7)


def predict(model, fs: FeatureSet, batch_size: int = 8) -> Predictions:
    ps, ms, ts = [], [], []
    for start in range(0, len(fs), batch_size):
        idx = np.arange(start, min(start + batch_size, len(fs)))
        out = model(fs.batch(idx))
        ps.append(out.p_fake)
        ms.append(out.mask_hat)
        ts.append(out.type_hat)
    return Predictions(np.concatenate(ps), np.concatenate(ms), np.concatenate(ts))


def localization_scores(pred: Predictions, masks: np.ndarray, select: np.ndarray) -> tuple[float, float]:
    """Mean (pixel F1, IoU) over the selected samples."""
    pairs = [pixel_f1_iou(pred.mask_hat[i], masks[i]) for i in np.flatnonzero(select)]
    if not pairs:
        return float("nan"), float("nan")
    f1s, ious = zip(*pairs)
    return float(np.mean(f1s)), float(np.mean(ious))


def make_report(pred: Predictions, labels: np.ndarray, masks: np.ndarray, types: np.ndarray) -> EvalReport:
    labels = np.asarray(labels)
    try:
        auc = auc_roc(pred.p_fake, labels)
    except ValueError:
        auc = None
    pf1, iou = localization_scores(pred, masks, labels == 1)
    correct = (pred.p_fake >= 0.5).astype(np.int64) == labels
    per_type, counts = {}, {}
    for t, name in enumerate(CLASSES):
        sel = types == t
        if sel.any():
            per_type[name] = float(correct[sel].mean())
            counts[name] = int(sel.sum())
    return EvalReport(accuracy(pred.p_fake, labels), auc, f1_score(pred.p_fake, labels),
                      None if math.isnan(pf1) else pf1, None if math.isnan(iou) else iou,
                      per_type, counts)


def evaluate(model, fs: FeatureSet, batch_size: int = 8) -> EvalReport:
    return make_report(predict(model, fs, batch_size), fs.labels, fs.masks, fs.types)


# -------------------------------------------------------------------- robustness sweep

SWEEP_GRID = (("jpeg", 70), ("jpeg", 80), ("jpeg", 90), ("jpeg", 95), ("jpeg", 100),
              ("blur", 0.5), ("blur", 1.0), ("blur", 2.0))
SWEEP_HEADER = ("perturbation", "level") + REPORT_FIELDS


def perturb(img: np.ndarray, kind: str, level) -> np.ndarray:
    if kind == "jpeg":
        return jpeg_simulate(img, int(level))
    if kind == "blur":
        return gaussian_blur(img, float(level))
    raise ValueError(f"unknown perturbation {kind!r}")


def _perturbed(samples: list[ForgerySample], kind: str, level) -> list[ForgerySample]:
    return [ForgerySample(perturb(s.image, kind, level), s.mask, s.label, s.mtype, s.meta) for s in samples]


def robustness_sweep(model, samples: list[ForgerySample], grid=SWEEP_GRID, seed: int = 0,
                     batch_size: int = 8) -> list[dict[str, str]]:
    """One report row per grid point; every image is perturbed before feature extraction."""
    rows = []
    for kind, level in grid:
        fs = build_feature_set(_perturbed(samples, kind, level), seed)
        rep = evaluate(model, fs, batch_size)
        rows.append({"perturbation": kind, "level": str(level), **rep.row()})
    return rows


def write_rows(rows: list[dict[str, str]], path: str | os.PathLike, header) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# -------------------------------------------------------------------- ablation

ABLATIONS = (("full", ("low", "mid", "high")), ("low", ("low",)), ("mid", ("mid",)), ("high", ("high",)))
ABLATION_HEADER = ("config", "branches") + REPORT_FIELDS


def ablation_run(config, branches, out_dir: str | os.PathLike | None = None):
    """Train with only ``branches`` enabled, then evaluate on the held-out split."""
    from .train import held_out_samples, train

    if not branches:
        raise ValueError("ablation needs at least one enabled branch")
    cfg = config.replace(branches=list(branches))
    result = train(cfg, out_dir)
    fs = build_feature_set(held_out_samples(cfg), cfg.seed)
    return evaluate(result.model, fs, cfg.batch_size)
