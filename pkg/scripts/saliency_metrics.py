#!/usr/bin/env python3
"""
Saliency evaluation: MAE, precision/recall sweep, max F-measure and E-measure.

All thresholded metrics use the 256 thresholds k/255 with ``pred >= t``;
ground truth is binarised at 0.5.
"""

import csv
import json
import logging
import pathlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from data_pipeline import DataError, DatasetManifest, read_prediction, read_unit_array
from tensor_engine import Tensor, bilinear_resize

logger = logging.getLogger(__name__)

THRESHOLDS = np.arange(256, dtype=np.float64) / 255.0
BETA_SQUARED = 0.3
E_MODES = ("max", "adaptive")
BENCHMARKS = ("DUTS-TE", "DUT-OMRON", "HKU-IS", "ECSSD", "PASCAL-S")
EPS = np.finfo(np.float64).eps

ArrayLike = Union[Tensor, np.ndarray]


class MissingPredictionError(DataError):
    """A manifest entry has no saliency map in the prediction directory."""


def _plane(x: ArrayLike) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _pair(pred: ArrayLike, gt: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = _plane(pred), _plane(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt >= 0.5


def mae(pred: ArrayLike, gt: ArrayLike) -> float:
    pred, gt = _plane(pred), _plane(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return float(np.abs(pred - gt).mean())


@dataclass
class ConfusionCurve:
    """TP/FP/FN/TN counts for every threshold (vectors of length 256)."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])


def confusion_curve(pred: ArrayLike, gt: ArrayLike, thresholds: np.ndarray = THRESHOLDS) -> ConfusionCurve:
    pred, positive = _pair(pred, gt)
    # number of thresholds t_k <= p, i.e. pred >= t_k exactly for k < rank
    rank = np.searchsorted(thresholds, pred.ravel(), side="right")
    bins = len(thresholds) + 1
    fg = np.bincount(rank[positive.ravel()], minlength=bins)
    bg = np.bincount(rank[~positive.ravel()], minlength=bins)
    tp = fg[::-1].cumsum()[::-1][1:]
    fp = bg[::-1].cumsum()[::-1][1:]
    n_fg, n_bg = int(positive.sum()), int((~positive).sum())
    return ConfusionCurve(tp, fp, n_fg - tp, n_bg - fp)


def pr_curve(pred: ArrayLike, gt: ArrayLike, thresholds: np.ndarray = THRESHOLDS) -> Tuple[np.ndarray, np.ndarray]:
    """Precision (1 where nothing is predicted) and recall (1 for an empty gt) per threshold."""
    curve = confusion_curve(pred, gt, thresholds)
    predicted = curve.tp + curve.fp
    actual = curve.tp + curve.fn
    precision = np.where(predicted > 0, curve.tp / np.maximum(predicted, 1), 1.0)
    recall = np.where(actual > 0, curve.tp / np.maximum(actual, 1), 1.0)
    return precision, recall


def f_curve(precision: np.ndarray, recall: np.ndarray, beta_squared: float = BETA_SQUARED) -> np.ndarray:
    precision, recall = np.asarray(precision, np.float64), np.asarray(recall, np.float64)
    denominator = beta_squared * precision + recall
    numerator = (1.0 + beta_squared) * precision * recall
    return np.where(denominator > 0, numerator / np.where(denominator > 0, denominator, 1.0), 0.0)


def max_f_measure(precision: np.ndarray, recall: np.ndarray, beta_squared: float = BETA_SQUARED) -> float:
    return float(f_curve(precision, recall, beta_squared).max())


def _alignment(curve: ConfusionCurve) -> np.ndarray:
    """Mean enhanced alignment per threshold, evaluated from the four binary pixel classes."""
    n = float(curve.total)
    mean_fm = (curve.tp + curve.fp) / n
    mean_gt = (curve.tp + curve.fn) / n
    if mean_gt[0] == 0.0:
        return 1.0 - mean_fm
    if mean_gt[0] == 1.0:
        return mean_fm

    def enhanced(fm: float, g: float) -> np.ndarray:
        a_fm = fm - mean_fm
        a_gt = g - mean_gt
        xi = 2.0 * a_gt * a_fm / (a_gt * a_gt + a_fm * a_fm + EPS)
        return (1.0 + xi) ** 2 / 4.0

    total = (
        curve.tp * enhanced(1.0, 1.0)
        + curve.fp * enhanced(1.0, 0.0)
        + curve.fn * enhanced(0.0, 1.0)
        + curve.tn * enhanced(0.0, 0.0)
    )
    return total / n


def e_measure_curve(pred: ArrayLike, gt: ArrayLike, thresholds: np.ndarray = THRESHOLDS) -> np.ndarray:
    return _alignment(confusion_curve(pred, gt, thresholds))


def adaptive_threshold(pred: ArrayLike) -> float:
    return float(min(2.0 * _plane(pred).mean(), 1.0))


def e_measure(pred: ArrayLike, gt: ArrayLike, mode: str = "max") -> float:
    """Max over the threshold sweep, or the single adaptive threshold min(2 * mean(pred), 1)."""
    if mode not in E_MODES:
        raise ValueError(f"e-measure mode must be one of {E_MODES}, got {mode!r}")
    if mode == "max":
        return float(e_measure_curve(pred, gt).max())
    return float(e_measure_curve(pred, gt, np.array([adaptive_threshold(pred)]))[0])


# ---------------------------------------------------------------------------
# Dataset evaluation
# ---------------------------------------------------------------------------

@dataclass
class ImageMetrics:
    image: str
    mae: float
    f_max: float
    e_max: float


@dataclass
class MetricReport:
    mae: float
    f_max: float
    e_max: float
    precision: np.ndarray
    recall: np.ndarray
    n_images: int
    rows: List[ImageMetrics] = field(default_factory=list)
    label: Optional[str] = None

    def to_dict(self) -> Dict[str, Union[float, int, str]]:
        payload = {"mae": self.mae, "f_max": self.f_max, "e_max": self.e_max, "n_images": self.n_images}
        if self.label:
            payload["dataset"] = self.label
        return payload

    def write_csv(self, path: Union[str, pathlib.Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["image", "mae", "f_max", "e_max"])
            for row in self.rows:
                writer.writerow([row.image, repr(row.mae), repr(row.f_max), repr(row.e_max)])

    def write_json(self, path: Union[str, pathlib.Path]) -> None:
        pathlib.Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def find_prediction(pred_dir: pathlib.Path, name: str) -> pathlib.Path:
    for suffix in (".pgm", ".swt"):
        candidate = pred_dir / f"{name}{suffix}"
        if candidate.exists():
            return candidate
    raise MissingPredictionError(f"no prediction for '{name}' in {pred_dir} (expected {name}.pgm)")


def _match_size(pred: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if pred.shape == shape:
        return pred
    resized = bilinear_resize(Tensor(pred[None, None], dtype=np.float64), *shape)
    return np.clip(resized.data[0, 0], 0.0, 1.0)


def evaluate_pairs(
    pairs: List[Tuple[str, np.ndarray, np.ndarray]],
    beta_squared: float = BETA_SQUARED,
    e_mode: str = "max",
    per_image_f: bool = False,
    label: Optional[str] = None,
) -> MetricReport:
    """
    Aggregate (name, prediction, ground truth) triples.

    MAE is the mean of per-image MAE. F_max is taken from the dataset-mean
    precision and recall curves (or the mean of per-image F_max when
    ``per_image_f``). E is the max of the dataset-mean E curve, or the mean
    per-image adaptive E.
    """
    if not pairs:
        raise DataError("nothing to evaluate: the manifest is empty")
    if e_mode not in E_MODES:
        raise ValueError(f"e-measure mode must be one of {E_MODES}, got {e_mode!r}")
    rows, precisions, recalls, e_curves = [], [], [], []
    for name, pred, gt in pairs:
        precision, recall = pr_curve(pred, gt)
        e_curve = e_measure_curve(pred, gt)
        e_value = float(e_curve.max()) if e_mode == "max" else e_measure(pred, gt, "adaptive")
        rows.append(ImageMetrics(name, mae(pred, gt), max_f_measure(precision, recall, beta_squared), e_value))
        precisions.append(precision)
        recalls.append(recall)
        e_curves.append(e_curve)
        logger.debug(f"{name}: mae={rows[-1].mae:.4f} f_max={rows[-1].f_max:.4f} e={e_value:.4f}")

    mean_precision = np.mean(precisions, axis=0)
    mean_recall = np.mean(recalls, axis=0)
    if per_image_f:
        f_max = float(np.mean([r.f_max for r in rows]))
    else:
        f_max = max_f_measure(mean_precision, mean_recall, beta_squared)
    if e_mode == "max":
        e_value = float(np.mean(e_curves, axis=0).max())
    else:
        e_value = float(np.mean([r.e_max for r in rows]))
    return MetricReport(
        mae=float(np.mean([r.mae for r in rows])),
        f_max=f_max,
        e_max=e_value,
        precision=mean_precision,
        recall=mean_recall,
        n_images=len(rows),
        rows=rows,
        label=label,
    )


def evaluate_dataset(
    pred_dir: Union[str, pathlib.Path],
    manifest: DatasetManifest,
    beta_squared: float = BETA_SQUARED,
    e_mode: str = "max",
    per_image_f: bool = False,
    label: Optional[str] = None,
    csv_path: Optional[Union[str, pathlib.Path]] = None,
    json_path: Optional[Union[str, pathlib.Path]] = None,
) -> MetricReport:
    """
    Evaluate ``<pred_dir>/<image stem>.pgm`` against every manifest mask.

    Raises:
        MissingPredictionError: when any manifest entry lacks a prediction
    """
    pred_dir = pathlib.Path(pred_dir)
    if label and label not in BENCHMARKS:
        logger.info(f"Evaluating custom dataset label '{label}'")
    pairs = []
    for entry in manifest:
        gt = read_unit_array(entry.mask, 1)[0]
        pred = _match_size(read_prediction(find_prediction(pred_dir, entry.name)), gt.shape)
        pairs.append((entry.name, pred, gt))
    report = evaluate_pairs(pairs, beta_squared, e_mode, per_image_f, label)
    if csv_path is not None:
        report.write_csv(csv_path)
    if json_path is not None:
        report.write_json(json_path)
    logger.info(
        f"Evaluated {report.n_images} images: MAE={report.mae:.4f} "
        f"F_max={report.f_max:.4f} E={report.e_max:.4f}"
    )
    return report
