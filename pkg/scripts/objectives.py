#!/usr/bin/env python3
"""
Training objectives: alpha-weighted saliency losses and the contour loss.

    saliency: wBCE + wIoU + wL1 + SSIM         (alpha = windowed max of gt)
    contour:  0.001 * BCE + Dice + SSIM

Every loss takes logits shaped N x 1 x H x W and a ground truth of the same
shape in [0, 1], computes one value per image and averages over the batch.
"""

import hashlib
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tensor_engine import (
    ConvWeights,
    ShapeError,
    Tensor,
    abs_,
    activation,
    bce_with_logits,
    conv2d,
    mean,
    pool2d,
    sum_,
)

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
CONTOUR_BCE_WEIGHT = 0.001
SMOOTH = 1.0


@dataclass
class LossConfig:
    alpha_window: int = 31
    weight_lambda: Optional[float] = None   # None: w = alpha; x: w = 1 + x * alpha
    normalization: str = "alpha_sum"       # or "pixel_count"
    contour_bce_weight: float = CONTOUR_BCE_WEIGHT

    def validate(self) -> "LossConfig":
        if self.alpha_window < 1 or self.alpha_window % 2 == 0:
            raise ValueError(f"loss.alpha_window must be odd and >= 1, got {self.alpha_window}")
        if self.normalization not in ("alpha_sum", "pixel_count"):
            raise ValueError(f"loss.normalization must be alpha_sum or pixel_count, got {self.normalization!r}")
        return self


@dataclass
class AlphaMap:
    weights: Tensor
    window: int


@dataclass
class LossReport:
    """Per-term float values, their coefficients and the differentiable total."""

    terms: Dict[str, float]
    coefficients: Dict[str, float]
    value: Optional[Tensor] = field(default=None, repr=False)

    @property
    def total(self) -> float:
        return sum(self.coefficients[name] * term for name, term in self.terms.items())

    def merged(self, other: "LossReport") -> "LossReport":
        value = self.value if other.value is None else (other.value if self.value is None else self.value + other.value)
        return LossReport({**self.terms, **other.terms}, {**self.coefficients, **other.coefficients}, value)

    def to_dict(self) -> Dict[str, float]:
        return {"total": self.total, **self.terms}


def _as_batch(t: Tensor, name: str) -> Tensor:
    if t.ndim != 4 or t.shape[1] != 1:
        raise ShapeError(f"{name} must be N x 1 x H x W, got {t.shape}")
    return t


def _check_pair(logits: Tensor, gt: Tensor) -> None:
    _as_batch(logits, "logits")
    if logits.shape != gt.shape:
        raise ShapeError(f"logits {logits.shape} and ground truth {gt.shape} differ in shape")


# ---------------------------------------------------------------------------
# Alpha maps
# ---------------------------------------------------------------------------

def alpha_map(gt: Tensor, window: int = 31) -> AlphaMap:
    """Windowed maximum of the ground truth (stride 1, centred, zero outside the frame)."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"alpha window must be odd and >= 1, got {window}")
    _as_batch(gt, "ground truth")
    constant = Tensor(gt.data)
    # gt >= 0 and the window always covers its centre, so -inf padding acts as zero padding
    pooled = pool2d(constant, "max", window, 1, padding=window // 2)
    return AlphaMap(Tensor(pooled.data), window)


class AlphaCache:
    """Thread-safe LRU of alpha maps keyed on (ground-truth digest, window)."""

    def __init__(self, capacity: int = 4096):
        self.capacity = capacity
        self._entries: "OrderedDict[Tuple[str, int], AlphaMap]" = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(gt: Tensor, window: int) -> Tuple[str, int]:
        digest = hashlib.sha1(repr(gt.shape).encode() + gt.data.tobytes()).hexdigest()
        return digest, window

    def get(self, gt: Tensor, window: int) -> AlphaMap:
        key = self.key(gt, window)
        with self._lock:
            if key in self._entries:
                self._entries.move_to_end(key)
                self.hits += 1
                return self._entries[key]
        alpha = alpha_map(gt, window)
        with self._lock:
            self.misses += 1
            self._entries[key] = alpha
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
        return alpha


def _pixel_weights(alpha: AlphaMap, config: LossConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(weights N x 1 x H x W, per-image denominators N x 1 x 1 x 1)."""
    w = alpha.weights.data.astype(np.float64)
    if config.weight_lambda is not None:
        w = 1.0 + config.weight_lambda * w
    sums = w.sum(axis=(1, 2, 3), keepdims=True)
    empty = sums[:, 0, 0, 0] == 0
    if empty.any():
        logger.warning(f"alpha weights sum to zero for {int(empty.sum())} image(s); using uniform weights")
        w = np.where(sums == 0, 1.0, w)
        sums = w.sum(axis=(1, 2, 3), keepdims=True)
    if config.normalization == "pixel_count":
        sums = np.full_like(sums, float(np.prod(w.shape[1:])))
    return w, sums


def _per_image_sum(x: Tensor) -> Tensor:
    return sum_(x, axis=(1, 2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# Weighted saliency terms
# ---------------------------------------------------------------------------

def weighted_bce(logits: Tensor, gt: Tensor, alpha: AlphaMap, config: Optional[LossConfig] = None) -> Tensor:
    _check_pair(logits, gt)
    w, denom = _pixel_weights(alpha, config or LossConfig())
    per_image = _per_image_sum(bce_with_logits(logits, gt) * w) / denom
    return mean(per_image)


def weighted_iou(logits: Tensor, gt: Tensor, alpha: AlphaMap, config: Optional[LossConfig] = None) -> Tensor:
    _check_pair(logits, gt)
    w, _ = _pixel_weights(alpha, config or LossConfig())
    p = activation(logits, "sigmoid")
    g = gt.data
    inter = _per_image_sum(p * (w * g))
    union = _per_image_sum(p * w) + (w * g).sum(axis=(1, 2, 3), keepdims=True) - inter
    return mean(1.0 - (inter + SMOOTH) / (union + SMOOTH))


def weighted_l1(logits: Tensor, gt: Tensor, alpha: AlphaMap, config: Optional[LossConfig] = None) -> Tensor:
    _check_pair(logits, gt)
    w, denom = _pixel_weights(alpha, config or LossConfig())
    per_image = _per_image_sum(abs_(activation(logits, "sigmoid") - gt) * w) / denom
    return mean(per_image)


# ---------------------------------------------------------------------------
# SSIM and Dice
# ---------------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    profile = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    profile /= profile.sum()
    return np.outer(profile, profile)


def ssim_index(x: Tensor, y: Tensor) -> Tensor:
    """Mean SSIM over all valid 11x11 Gaussian windows (dynamic range 1)."""
    if x.shape != y.shape:
        raise ShapeError(f"ssim operands differ in shape: {x.shape} vs {y.shape}")
    _as_batch(x, "ssim operand")
    if x.shape[2] < SSIM_WINDOW or x.shape[3] < SSIM_WINDOW:
        raise ShapeError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} inputs, got {x.shape[2:]}")
    kernel = Tensor(gaussian_window().reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW), dtype=x.dtype)

    def blur(t: Tensor) -> Tensor:
        return conv2d(t, ConvWeights(kernel))

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y
    numerator = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
    denominator = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return mean(numerator / denominator)


def ssim_loss(logits: Tensor, gt: Tensor) -> Tensor:
    _check_pair(logits, gt)
    return 1.0 - ssim_index(activation(logits, "sigmoid"), Tensor(gt.data, dtype=logits.dtype))


def dice_loss(logits: Tensor, gt: Tensor) -> Tensor:
    _check_pair(logits, gt)
    p = activation(logits, "sigmoid")
    g = gt.data
    overlap = _per_image_sum(p * g)
    mass = _per_image_sum(p) + g.sum(axis=(1, 2, 3), keepdims=True)
    return mean(1.0 - (2.0 * overlap + SMOOTH) / (mass + SMOOTH))


def plain_bce(logits: Tensor, gt: Tensor) -> Tensor:
    _check_pair(logits, gt)
    return mean(bce_with_logits(logits, gt))


# ---------------------------------------------------------------------------
# Combined objectives
# ---------------------------------------------------------------------------

def salient_loss(
    logits: Tensor,
    gt: Tensor,
    window: Optional[int] = None,
    config: Optional[LossConfig] = None,
    alpha: Optional[AlphaMap] = None,
) -> LossReport:
    """wBCE + wIoU + wL1 + SSIM with a single alpha map shared by the weighted terms."""
    config = (config or LossConfig()).validate()
    window = window if window is not None else config.alpha_window
    if alpha is None:
        alpha = alpha_map(gt, window)
    parts = {
        "wbce": weighted_bce(logits, gt, alpha, config),
        "wiou": weighted_iou(logits, gt, alpha, config),
        "wl1": weighted_l1(logits, gt, alpha, config),
        "ssim": ssim_loss(logits, gt),
    }
    value = parts["wbce"] + parts["wiou"] + parts["wl1"] + parts["ssim"]
    return LossReport({k: v.item() for k, v in parts.items()}, {k: 1.0 for k in parts}, value)


def contour_loss(logits: Tensor, contour_gt: Tensor, config: Optional[LossConfig] = None) -> LossReport:
    weight = (config or LossConfig()).contour_bce_weight
    parts = {
        "bce": plain_bce(logits, contour_gt),
        "dice": dice_loss(logits, contour_gt),
        "ssim_contour": ssim_loss(logits, contour_gt),
    }
    value = weight * parts["bce"] + parts["dice"] + parts["ssim_contour"]
    coefficients = {"bce": weight, "dice": 1.0, "ssim_contour": 1.0}
    return LossReport({k: v.item() for k, v in parts.items()}, coefficients, value)


def total_loss(
    sal_logits: Tensor,
    con_logits: Optional[Tensor],
    gt: Tensor,
    contour_gt: Optional[Tensor],
    config: Optional[LossConfig] = None,
    alpha: Optional[AlphaMap] = None,
) -> LossReport:
    """Saliency loss plus the contour loss when a contour head produced logits."""
    report = salient_loss(sal_logits, gt, config=config, alpha=alpha)
    if con_logits is None:
        return report
    if contour_gt is None:
        raise ValueError("contour logits given without contour ground truth")
    return report.merged(contour_loss(con_logits, contour_gt, config))


# ---------------------------------------------------------------------------
# Contour ground truth
# ---------------------------------------------------------------------------

def contour_from_mask(gt: Tensor) -> Tensor:
    """3x3 morphological gradient (dilate - erode, zero padded) of the binarised mask."""
    array = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    binary = (array >= 0.5).astype(np.float64)
    pad = [(0, 0)] * (binary.ndim - 2) + [(1, 1), (1, 1)]
    windows = sliding_window_view(np.pad(binary, pad), (3, 3), axis=(-2, -1))
    dilated = windows.max(axis=(-2, -1))
    eroded = windows.min(axis=(-2, -1))
    dtype = gt.dtype if isinstance(gt, Tensor) else np.float32
    return Tensor(np.clip(dilated - eroded, 0.0, 1.0), dtype=dtype)
