"""Saliency metrics: PR curve, F-measure, weighted F-measure and MAE."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError

BETA2 = 0.3
NUM_THRESHOLDS = 256
THRESHOLDS = np.arange(NUM_THRESHOLDS, dtype=np.float64) / 255.0
_EPS = np.finfo(np.float64).eps


def _binary_gt(gt) -> np.ndarray:
    gt = np.asarray(gt)
    if not np.all((gt == 0) | (gt == 1)):
        raise DataError("ground truth must be binary")
    gt = gt.astype(bool)
    if not gt.any():
        raise DataError("ground truth has no positive pixel; recall is undefined")
    return gt


def precision_recall_at(pred, gt, threshold: float) -> tuple[float, float]:
    """Precision/recall of ``pred >= threshold``; an empty prediction has precision 1."""
    gt = _binary_gt(gt)
    binary = np.asarray(pred, dtype=np.float64) >= threshold
    tp = int(np.count_nonzero(binary & gt))
    fp = int(np.count_nonzero(binary & ~gt))
    precision = tp / (tp + fp) if tp + fp else 1.0
    return precision, tp / int(gt.sum())


def pr_curve(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall at thresholds k/255, k = 0..255 (``pred >= t``)."""
    gt = _binary_gt(gt)
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    pos = np.sort(pred[gt])
    neg = np.sort(pred[~gt])
    tp = pos.size - np.searchsorted(pos, THRESHOLDS, side="left")
    fp = neg.size - np.searchsorted(neg, THRESHOLDS, side="left")
    predicted = tp + fp
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / pos.size
    return precision, recall


def f_measure(precision, recall, beta2: float = BETA2):
    """(1 + b2) P R / (b2 P + R), defined as 0 when P = R = 0."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    denom = beta2 * p + r
    out = np.where(denom > 0, (1 + beta2) * p * r / np.where(denom > 0, denom, 1), 0.0)
    return float(out) if out.ndim == 0 else out


def mae(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return float(np.abs(pred - gt).mean())


def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    return k / k.sum()


def weighted_f_measure(pred, gt, beta2: float = 1.0, window: int = 7, sigma: float = 5.0) -> float:
    """Weighted F-measure with dependency- and location-aware error weighting.

    Errors of background pixels are replaced by the error at their nearest
    foreground pixel and smoothed with a Gaussian (zero-padded correlation);
    foreground errors take the smaller of raw and smoothed error; background
    errors are amplified by ``2 - exp(ln(0.5)/5 * distance-to-foreground)``.
    Expects 2-D maps.
    """
    gt = _binary_gt(np.asarray(gt).squeeze())
    pred = np.asarray(pred, dtype=np.float64).squeeze()
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    err = np.abs(pred - gt)
    dist, (ri, ci) = ndimage.distance_transform_edt(~gt, return_indices=True)
    err_t = err.copy()
    bg = ~gt
    err_t[bg] = err[ri[bg], ci[bg]]
    err_a = ndimage.correlate(err_t, gaussian_kernel(window, sigma), mode="constant", cval=0.0)
    min_err = np.where(gt & (err_a < err), err_a, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_err * importance
    tp_w = gt.sum() - ew[gt].sum()
    fp_w = ew[bg].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tp_w / (_EPS + tp_w + fp_w)
    return float((1 + beta2) * recall * precision / (_EPS + recall + beta2 * precision))


@dataclass
class MetricReport:
    precision: np.ndarray
    recall: np.ndarray
    f_beta_max: float
    f_beta_adaptive: float
    f_beta_weighted: float
    mae: float
    count: int = 1

    def summary(self) -> dict:
        return {"f_beta_max": self.f_beta_max, "f_beta_adaptive": self.f_beta_adaptive,
                "f_beta_weighted": self.f_beta_weighted, "mae": self.mae, "count": self.count}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["precision"] = self.precision.tolist()
        d["recall"] = self.recall.tolist()
        return d


def image_metrics(pred, gt) -> dict:
    """Per-image quantities that :func:`aggregate` reduces."""
    pred = np.asarray(pred, dtype=np.float64).squeeze()
    gt = np.asarray(gt).squeeze()
    precision, recall = pr_curve(pred, gt)
    threshold = min(1.0, 2.0 * float(pred.mean()))
    p_a, r_a = precision_recall_at(pred, gt, threshold)
    return {"precision": precision, "recall": recall, "f_adaptive": f_measure(p_a, r_a),
            "f_weighted": weighted_f_measure(pred, gt), "mae": mae(pred, gt)}


def aggregate(per_image: list[dict]) -> MetricReport:
    """Average per image; F_max is taken on the threshold-wise mean P/R curve."""
    if not per_image:
        raise DataError("cannot aggregate an empty set of predictions")
    n = len(per_image)
    precision = np.mean([m["precision"] for m in per_image], axis=0)
    recall = np.mean([m["recall"] for m in per_image], axis=0)
    return MetricReport(
        precision=precision,
        recall=recall,
        f_beta_max=float(np.max(f_measure(precision, recall))),
        f_beta_adaptive=float(np.mean([m["f_adaptive"] for m in per_image])),
        f_beta_weighted=float(np.mean([m["f_weighted"] for m in per_image])),
        mae=float(np.mean([m["mae"] for m in per_image])),
        count=n,
    )


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PICANET_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_predictions(preds, gts, threads: int | None = None) -> MetricReport:
    """Metrics over paired prediction / ground-truth maps (any iterable of 2-D arrays)."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise DataError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    threads = threads or _threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_image = list(pool.map(image_metrics, preds, gts))
    else:
        per_image = [image_metrics(p, g) for p, g in zip(preds, gts)]
    return aggregate(per_image)


def evaluate_model(model, samples, batch: int = 16) -> MetricReport:
    """Run ``model.predict`` in eval mode over ``samples`` and score the saliency maps."""
    if not samples:
        raise DataError("evaluation dataset is empty")
    preds = []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        out = model.predict(np.stack([s.image for s in chunk]))
        preds.extend(out[:, 0])
    return evaluate_predictions(preds, [s.mask[0] for s in samples])
