"""Exposure-mask generation: histograms, Otsu thresholds, tri-level labels.

Luminance maps are reduced to 256-bin histograms; single-cut and two-cut
Otsu searches pick thresholds that maximize between-class variance. Labels
use codes CORRECT=0, UNDER=1, OVER=2 and persist as grayscale PNGs with
byte codes 0/128/255.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image

from . import imaging
from .errors import DecodeError

CORRECT = 0
UNDER = 1
OVER = 2

# label code -> PNG byte
_LABEL_TO_BYTE = np.array([0, 128, 255], dtype=np.uint8)


@dataclass(frozen=True)
class MaskConfig:
    """Knobs for offline label-map precomputation.

    labeling: "trilevel" (two-cut Otsu labels) or "binary" (dataset-mean
    threshold, under/correct only). The denoise chain runs at reduced
    resolution: downsample by `downsample_factor`, blur with `blur_sigma`
    (0 disables), label, then upsample back by nearest neighbor.
    """

    labeling: str = "trilevel"
    downsample_factor: int = 2
    blur_sigma: float = 1.0

    def validate(self) -> None:
        if self.labeling not in ("trilevel", "binary"):
            raise ValueError(f"unknown labeling mode {self.labeling!r}")
        if self.downsample_factor < 1:
            raise ValueError(f"downsample_factor must be >= 1, got {self.downsample_factor}")
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")

    def to_dict(self) -> dict:
        return {
            "labeling": self.labeling,
            "downsample_factor": self.downsample_factor,
            "blur_sigma": self.blur_sigma,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MaskConfig":
        cfg = cls(**doc)
        cfg.validate()
        return cfg


class TwoThresholds(NamedTuple):
    """Result of the two-cut search. degenerate means the fallback single
    threshold was used (fewer than 3 populated bins) and t_low == t_high."""

    t_low: float
    t_high: float
    degenerate: bool


@dataclass
class ThresholdStats:
    per_image_thresholds: list[float]
    mean_threshold: float
    count: int


def histogram(lum: np.ndarray) -> np.ndarray:
    """256-bin luminance histogram; bin(v) = min(floor(256*v), 255)."""
    if lum.ndim != 2:
        raise ValueError(f"expected 2-D luminance map, got shape {lum.shape}")
    bins = np.minimum(np.floor(lum.astype(np.float64) * 256.0).astype(np.int64), 255)
    return np.bincount(bins.ravel(), minlength=256).astype(np.int64)


def _populated_bins(hist: np.ndarray) -> np.ndarray:
    return np.nonzero(np.asarray(hist) > 0)[0]


def otsu_threshold(hist: np.ndarray) -> float:
    """Single Otsu threshold from a 256-bin histogram.

    Searches cut points t in 0..254 (class 0 = bins <= t) for the maximum
    between-class variance w0*w1*(mu0-mu1)^2; ties go to the smallest t.
    Returns (t*+1)/256. A histogram with a single populated bin b returns
    (b+1)/256.
    """
    counts = np.asarray(hist, dtype=np.float64)
    if counts.shape != (256,):
        raise ValueError(f"expected 256-bin histogram, got shape {counts.shape}")
    populated = _populated_bins(counts)
    if populated.size == 0:
        raise ValueError("histogram is empty (all-zero counts)")
    if populated.size == 1:
        return float((populated[0] + 1) / 256.0)

    bins = np.arange(256, dtype=np.float64)
    cum = np.cumsum(counts)
    cumw = np.cumsum(counts * bins)
    total = cum[-1]
    total_w = cumw[-1]

    w0 = cum[:255]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.divide(cumw[:255], w0, out=np.zeros(255), where=valid)
    mu1 = np.divide(total_w - cumw[:255], w1, out=np.zeros(255), where=valid)
    score = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -1.0)
    t_star = int(np.argmax(score))  # argmax returns the first maximum
    return float((t_star + 1) / 256.0)


def multi_otsu_two_thresholds(hist: np.ndarray) -> TwoThresholds:
    """Two-cut Otsu over all pairs t1 < t2, t1 in 0..253, t2 in t1+1..254.

    Maximizes the three-class between-class variance (equivalently
    sum_k S_k^2/N_k with S the weighted and N the raw class mass; empty
    classes contribute zero). Ties resolve to the lexicographically
    smallest (t1, t2). Histograms with fewer than 3 populated bins fall
    back to the single threshold with t_low == t_high and degenerate=True.
    """
    counts = np.asarray(hist, dtype=np.float64)
    if counts.shape != (256,):
        raise ValueError(f"expected 256-bin histogram, got shape {counts.shape}")
    populated = _populated_bins(counts)
    if populated.size == 0:
        raise ValueError("histogram is empty (all-zero counts)")
    if populated.size < 3:
        t = otsu_threshold(counts)
        return TwoThresholds(t, t, True)

    bins = np.arange(256, dtype=np.float64)
    cum = np.concatenate([[0.0], np.cumsum(counts)])
    cumw = np.concatenate([[0.0], np.cumsum(counts * bins)])

    def class_term(lo: int, hi: int) -> float:
        # bins lo..hi inclusive
        n = cum[hi + 1] - cum[lo]
        if n <= 0:
            return 0.0
        s = cumw[hi + 1] - cumw[lo]
        return s * s / n

    best = (-1.0, 0, 0)
    for t1 in range(254):
        term0 = class_term(0, t1)
        for t2 in range(t1 + 1, 255):
            score = term0 + class_term(t1 + 1, t2) + class_term(t2 + 1, 255)
            if score > best[0]:
                best = (score, t1, t2)
    _, t1, t2 = best
    return TwoThresholds(float((t1 + 1) / 256.0), float((t2 + 1) / 256.0), False)


def dataset_average_threshold(lums: Sequence[np.ndarray]) -> ThresholdStats:
    """Per-image Otsu thresholds and their arithmetic mean."""
    if len(lums) == 0:
        raise ValueError("need at least one luminance map")
    per_image = [otsu_threshold(histogram(lum)) for lum in lums]
    return ThresholdStats(per_image, float(np.mean(per_image)), len(per_image))


def save_threshold_stats(stats: ThresholdStats, path: str | os.PathLike) -> None:
    doc = {
        "per_image": stats.per_image_thresholds,
        "mean": stats.mean_threshold,
        "count": stats.count,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_threshold_stats(path: str | os.PathLike) -> ThresholdStats:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return ThresholdStats(list(doc["per_image"]), float(doc["mean"]), int(doc["count"]))


def binarize(lum: np.ndarray, threshold: float) -> np.ndarray:
    """Bright-class mask: 1 where v > threshold, else 0.

    Strict comparison keeps constant images (including all-1.0) in class 0
    under the degenerate single-bin threshold convention.
    """
    return (lum > threshold).astype(np.uint8)


def adaptive_block_threshold(lum: np.ndarray, block: int) -> np.ndarray:
    """Per-tile Otsu binarization on block x block tiles (edge tiles smaller)."""
    if block < 8:
        raise ValueError(f"block must be >= 8, got {block}")
    if lum.ndim != 2:
        raise ValueError(f"expected 2-D luminance map, got shape {lum.shape}")
    h, w = lum.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for r0 in range(0, h, block):
        for c0 in range(0, w, block):
            tile = lum[r0 : r0 + block, c0 : c0 + block]
            t = otsu_threshold(histogram(tile))
            out[r0 : r0 + block, c0 : c0 + block] = binarize(tile, t)
    return out


def make_exposure_labels(
    lum: np.ndarray, t_low: float, t_high: float, sigma: float = 1.0
) -> np.ndarray:
    """Tri-level label map: UNDER where v < t_low, OVER where v > t_high.

    The map is blurred with `sigma` first (0 skips the blur) so isolated
    speckle does not flip labels. Requires 0 < t_low <= t_high < 1.
    """
    if not (0.0 < t_low <= t_high < 1.0):
        raise ValueError(f"thresholds must satisfy 0 < t_low <= t_high < 1, got ({t_low}, {t_high})")
    if sigma > 0:
        lum = imaging.gaussian_blur(lum, sigma)
    labels = np.full(lum.shape, CORRECT, dtype=np.uint8)
    labels[lum < t_low] = UNDER
    labels[lum > t_high] = OVER
    return labels


def label_to_target_map(labels: np.ndarray) -> np.ndarray:
    """Encode labels as an (H, W, 2) indicator target: ch0=under, ch1=over."""
    target = np.zeros(labels.shape + (2,), dtype=np.float32)
    target[:, :, 0] = labels == UNDER
    target[:, :, 1] = labels == OVER
    return target


def trilevel_label_map(
    lum: np.ndarray, t_low: float, t_high: float, cfg: MaskConfig
) -> np.ndarray:
    """Full denoise chain: downsample, blur, label, upsample back to size."""
    cfg.validate()
    h, w = lum.shape
    small = lum
    if cfg.downsample_factor > 1:
        small = imaging.downsample_nearest(lum, cfg.downsample_factor)
    labels = make_exposure_labels(small, t_low, t_high, sigma=cfg.blur_sigma)
    if labels.shape != (h, w):
        labels = imaging.upsample_nearest(labels, h, w)
    return labels


def binary_label_map(lum: np.ndarray, threshold: float, cfg: MaskConfig) -> np.ndarray:
    """Binary under-mask through the same denoise chain: UNDER where v < threshold."""
    cfg.validate()
    h, w = lum.shape
    small = lum
    if cfg.downsample_factor > 1:
        small = imaging.downsample_nearest(lum, cfg.downsample_factor)
    if cfg.blur_sigma > 0:
        small = imaging.gaussian_blur(small, cfg.blur_sigma)
    labels = np.where(small < threshold, UNDER, CORRECT).astype(np.uint8)
    if labels.shape != (h, w):
        labels = imaging.upsample_nearest(labels, h, w)
    return labels


def save_label_map(labels: np.ndarray, path: str | os.PathLike) -> None:
    """Persist a label map as grayscale PNG (0=CORRECT, 128=UNDER, 255=OVER)."""
    if labels.max(initial=0) > OVER:
        raise ValueError(f"label map contains codes above {OVER}")
    Image.fromarray(_LABEL_TO_BYTE[labels], mode="L").save(path, format="PNG")


def load_label_map(path: str | os.PathLike) -> np.ndarray:
    """Decode a label-map PNG back to {0,1,2} codes."""
    gray = imaging.load_grayscale(path)
    bytes_ = np.floor(gray.astype(np.float64) * 255.0 + 0.5).astype(np.int64)
    labels = np.full(bytes_.shape, -1, dtype=np.int64)
    labels[bytes_ == 0] = CORRECT
    labels[bytes_ == 128] = UNDER
    labels[bytes_ == 255] = OVER
    if (labels < 0).any():
        bad = sorted(set(np.unique(bytes_)) - {0, 128, 255})
        raise DecodeError(f"label PNG {path} contains unexpected byte codes {bad}")
    return labels.astype(np.uint8)
