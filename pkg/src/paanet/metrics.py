"""Per-image DSC, IoU, recall and precision on thresholded maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass(frozen=True)
class MetricsReport:
    dsc: float
    miou: float
    recall: float
    precision: float
    n_images: int

    def tsv(self) -> str:
        return f"{self.dsc:.6f}\t{self.miou:.6f}\t{self.recall:.6f}\t{self.precision:.6f}\t{self.n_images}"

    def text(self) -> str:
        return (
            f"dsc: {self.dsc:.6f}\nmiou: {self.miou:.6f}\nrecall: {self.recall:.6f}\n"
            f"precision: {self.precision:.6f}\nn_images: {self.n_images}\n"
        )


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    """1 where pred >= threshold, else 0 (uint8)."""
    return (np.asarray(pred) >= threshold).astype(np.uint8)


def _check_binary(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{what} must be binary (0/1)")
    return arr.astype(bool)


def confusion(pred_bin, gt) -> ConfusionCounts:
    p = _check_binary(np.asarray(pred_bin), "prediction")
    g = _check_binary(np.asarray(gt), "ground truth")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs ground truth {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    # empty prediction against empty ground truth counts as a perfect match
    return 1.0 if den == 0 else num / den


def image_scores(c: ConfusionCounts) -> tuple:
    """(dsc, iou, recall, precision) for one image."""
    return (
        _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        _ratio(c.tp, c.tp + c.fp + c.fn),
        _ratio(c.tp, c.tp + c.fn),
        _ratio(c.tp, c.tp + c.fp),
    )


def evaluate(preds, gts, threshold: float = 0.5) -> MetricsReport:
    """Average the per-image scores over paired prediction / mask lists."""
    preds, gts = list(preds), list(gts)
    if not preds:
        raise ValueError("evaluate needs at least one image")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} masks")
    scores = np.array([image_scores(confusion(binarize(p, threshold), g)) for p, g in zip(preds, gts)])
    dsc, miou, recall, precision = scores.mean(axis=0)
    return MetricsReport(float(dsc), float(miou), float(recall), float(precision), len(preds))
