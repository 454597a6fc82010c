"""CAM thresholding, confusion matrices and mIoU with best-threshold selection."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def default_taus() -> np.ndarray:
    return np.arange(101) / 100.0


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions; class 0 is background."""

    num_classes: int  # K, foreground only
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.num_classes + 1
        if self.counts is None:
            self.counts = np.zeros((n, n), dtype=np.int64)
        elif self.counts.shape != (n, n):
            raise ValueError(f"counts must be {n}x{n}, got {self.counts.shape}")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class EvalReport:
    per_class_iou: np.ndarray  # K + 1 entries, NaN where the union is empty
    miou: float
    threshold: float = float("nan")
    n_samples: int = 0

    def lines(self) -> list[str]:
        """``key = value`` lines, one metric per line."""
        out = [f"miou = {self.miou:.6f}", f"threshold = {self.threshold:.2f}", f"n_samples = {self.n_samples}"]
        for c, v in enumerate(self.per_class_iou):
            out.append(f"iou_{c} = {'nan' if np.isnan(v) else f'{v:.6f}'}")
        return out


def threshold_cam(cam: np.ndarray, tau: float, labels: np.ndarray | None = None) -> np.ndarray:
    """Argmax class (1-based) where the max activation reaches ``tau``, else 0.

    With ``labels`` given, channels of absent classes are zeroed first.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    cam = np.asarray(cam, dtype=np.float64)
    if labels is not None:
        cam = cam * np.asarray(labels, dtype=np.float64).reshape(-1, 1, 1)
    best = cam.max(axis=0)
    arg = cam.argmax(axis=0)  # first maximum on ties
    return np.where(best >= tau, arg + 1, 0)


def accumulate(conf: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    n = conf.num_classes + 1
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ValueError(f"{name} holds class values outside 0..{n - 1}")
    flat = gt.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel()
    counts = conf.counts + np.bincount(flat, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(conf.num_classes, counts)


def iou_from_counts(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    tp = np.diagonal(counts, axis1=-2, axis2=-1)
    union = counts.sum(axis=-1) + counts.sum(axis=-2) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1.0), np.nan)


def miou(conf: ConfusionMatrix) -> EvalReport:
    """IoU per class (background included); zero-union classes leave the mean."""
    if conf.total == 0:
        raise ValueError("empty confusion matrix")
    iou = iou_from_counts(conf.counts)
    return EvalReport(per_class_iou=iou, miou=float(np.nanmean(iou)))


def _mean_ignoring_nan(iou: np.ndarray) -> np.ndarray:
    valid = ~np.isnan(iou)
    return np.where(valid, iou, 0.0).sum(axis=-1) / np.maximum(valid.sum(axis=-1), 1)


def sweep_counts(cams: Sequence[np.ndarray], gts: Sequence[np.ndarray], taus: np.ndarray,
                 labels: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Confusion matrices for every threshold at once, shape T x (K+1) x (K+1).

    A pixel with peak activation ``m`` and argmax class ``a`` is predicted
    ``a`` for every ``tau <= m`` and background otherwise, so cumulative
    histograms over the sorted grid give all matrices in one pass.
    """
    taus = np.asarray(taus, dtype=np.float64)
    order = np.argsort(taus, kind="stable")
    sorted_taus = taus[order]
    k = cams[0].shape[0]
    n = k + 1
    t = len(taus)
    # hist[g, a, j]: pixels with gt g, argmax a, and exactly j grid values <= peak
    hist = np.zeros((n, n, t + 1), dtype=np.int64)
    for i, (cam, gt) in enumerate(zip(cams, gts)):
        cam = np.asarray(cam, dtype=np.float64)
        if labels is not None:
            cam = cam * np.asarray(labels[i], dtype=np.float64).reshape(-1, 1, 1)
        peak = cam.max(axis=0).ravel()
        arg = cam.argmax(axis=0).ravel() + 1
        j = np.searchsorted(sorted_taus, peak, side="right")
        g = np.asarray(gt, dtype=np.int64).ravel()
        if g.size and (g.min() < 0 or g.max() >= n):
            raise ValueError(f"ground truth holds class values outside 0..{n - 1}")
        np.add.at(hist, (g, arg, j), 1)
    # pixels whose j > s are foreground-predicted at sorted threshold s
    above = hist[:, :, ::-1].cumsum(axis=2)[:, :, ::-1]  # above[..., j] = count with index >= j
    counts = np.zeros((t, n, n), dtype=np.int64)
    for s in range(t):
        fg = above[:, :, s + 1]
        counts[order[s]] = fg
        counts[order[s], :, 0] += hist.sum(axis=(1, 2)) - fg.sum(axis=1)
    return counts


def threshold_sweep(cams: Sequence[np.ndarray], gts: Sequence[np.ndarray], taus=None,
                    labels: Sequence[np.ndarray] | None = None) -> EvalReport:
    """mIoU at every threshold over the whole set; report of the best one.

    Ties go to the smaller threshold.
    """
    if len(cams) == 0:
        raise ValueError("empty dataset")
    if len(cams) != len(gts):
        raise ValueError(f"{len(cams)} cams but {len(gts)} ground-truth masks")
    taus = default_taus() if taus is None else np.asarray(taus, dtype=np.float64).reshape(-1)
    if taus.size == 0 or taus.min() < 0 or taus.max() > 1:
        raise ValueError("threshold grid must be non-empty and inside [0, 1]")
    counts = sweep_counts(cams, gts, taus, labels)
    ious = iou_from_counts(counts)
    scores = _mean_ignoring_nan(ious)
    best = max(range(len(taus)), key=lambda i: (scores[i], -taus[i]))
    return EvalReport(per_class_iou=ious[best], miou=float(np.nanmean(ious[best])),
                      threshold=float(taus[best]), n_samples=len(cams))


@dataclass
class SeedSummary:
    mean_miou: float
    per_seed: list[float]
    best_seed: int  # index into per_seed
    best_miou: float


def aggregate_seeds(reports: Sequence[EvalReport | float]) -> SeedSummary:
    if not reports:
        raise ValueError("need at least one report")
    values = [float(r.miou if isinstance(r, EvalReport) else r) for r in reports]
    best = int(np.argmax(values))
    return SeedSummary(mean_miou=float(np.mean(values)), per_seed=values, best_seed=best, best_miou=values[best])
