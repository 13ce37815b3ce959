"""Segmentation metrics and parameter-range vulnerability analyses."""

from __future__ import annotations

import math
import warnings
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError
from .graph import ModelGraph

MSB_BIT = 30
DANGER_RANGE = (1.0, 2.0)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction shape {pred.shape} does not match ground truth shape {gt.shape}")
    return pred.ravel(), gt.ravel()


def _num_classes(pairs, num_classes) -> int:
    if num_classes is not None:
        return int(num_classes)
    return int(max(max(p.max(initial=0), g.max(initial=0)) for p, g in pairs)) + 1


def intersections_unions(preds, gts, num_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-class intersection and union pixel counts summed over image pairs."""
    pairs = [_pair(p, g) for p, g in zip(preds, gts)]
    if not pairs or len(preds) != len(gts):
        raise ContractError("need equally many (at least one) predictions and ground truths")
    k = _num_classes(pairs, num_classes)
    inter = np.zeros(k, np.int64)
    union = np.zeros(k, np.int64)
    for p, g in pairs:
        if p.size and (p.max() >= k or g.max() >= k or p.min() < 0 or g.min() < 0):
            raise ContractError(f"class index outside [0, {k})")
        pc = np.bincount(p, minlength=k)
        gc = np.bincount(g, minlength=k)
        ic = np.bincount(p[p == g], minlength=k)
        inter += ic
        union += pc + gc - ic
    return inter, union


def iou_per_class(pred, gt, num_classes: int | None = None) -> np.ndarray:
    """IoU percentage per class; NaN for classes absent from both maps."""
    inter, union = intersections_unions([pred], [gt], num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, 100.0 * inter / np.maximum(union, 1), np.nan)


def class_iou(preds, gts, num_classes: int | None = None) -> np.ndarray:
    """Per-class IoU over a whole evaluation set (counts pooled across images)."""
    inter, union = intersections_unions(preds, gts, num_classes)
    return np.where(union > 0, 100.0 * inter / np.maximum(union, 1), np.nan)


def global_iou(preds, gts, num_classes: int | None = None) -> float:
    """Micro-averaged IoU: intersections and unions summed over classes first."""
    inter, union = intersections_unions(preds, gts, num_classes)
    if union.sum() == 0:
        raise ContractError("empty evaluation set")
    return float(100.0 * inter.sum() / union.sum())


def weighted_iou(preds, gts, frequencies=None, num_classes: int | None = None) -> float:
    """IoU averaged with weights proportional to inverse class frequency.

    Frequencies default to ground-truth pixel counts of the supplied set;
    classes with zero frequency are left out (with a warning).
    """
    ious = class_iou(preds, gts, num_classes)
    if frequencies is None:
        freq = np.zeros(len(ious), np.float64)
        for g in gts:
            freq += np.bincount(np.asarray(g).ravel(), minlength=len(ious))[: len(ious)]
    else:
        freq = np.asarray(frequencies, dtype=np.float64)
        if freq.shape != ious.shape:
            raise ContractError(f"expected {len(ious)} class frequencies, got {freq.shape}")
    keep = freq > 0
    if not keep.all():
        warnings.warn(f"classes {np.flatnonzero(~keep).tolist()} have zero frequency and are excluded", stacklevel=2)
    keep &= ~np.isnan(ious)
    if not keep.any():
        raise ContractError("no class with positive frequency")
    # relative to the rarest class, so equal frequencies give unit weights and an exact mean
    w = freq[keep].min() / freq[keep]
    return math.fsum(w * ious[keep]) / math.fsum(w)


def range_ratio(values, lo: float = DANGER_RANGE[0], hi: float = DANGER_RANGE[1]) -> float:
    """Fraction of values with ``lo < |v| < hi`` (strict on both ends)."""
    v = np.abs(np.asarray(values, dtype=np.float64)).ravel()
    if v.size == 0:
        raise ContractError("empty parameter set")
    return float(np.count_nonzero((v > lo) & (v < hi)) / v.size)


def range_ratio_table(model: ModelGraph, lo: float = DANGER_RANGE[0], hi: float = DANGER_RANGE[1]) -> dict[str, float]:
    return {ps.id: range_ratio(model.params[ps.id], lo, hi) for ps in model.param_sets()}


def msb_gap(report, ratios: Mapping[str, float], metric: str = "critical", msb_bit: int = MSB_BIT) -> dict[str, float]:
    """Exponent-MSB error rate minus the percentage of values in the (1, 2) range.

    ``metric="critical"`` uses the percentage of critical injections,
    ``metric="pixel"`` the mean pixel-change rate. Negative values are
    expected from sampling noise.
    """
    if metric not in ("critical", "pixel"):
        raise ContractError(f"unknown metric {metric!r}")
    out = {}
    for sid in report.set_order:
        stats = report.grid.get((sid, msb_bit))
        if stats is None:
            continue
        rate = 100.0 * stats.critical_fraction if metric == "critical" else stats.mean_rate
        out[sid] = rate - 100.0 * ratios[sid]
    if not out:
        raise ContractError(f"report has no injections on bit {msb_bit}")
    return out


def msb_rows(report, ratios: Mapping[str, float], metric: str = "critical") -> list[dict]:
    """Plot-ready rows: set id, MSB rate, range ratio, gap."""
    gaps = msb_gap(report, ratios, metric)
    rows = []
    for sid, gap in gaps.items():
        stats = report.grid[(sid, MSB_BIT)]
        rate = 100.0 * stats.critical_fraction if metric == "critical" else stats.mean_rate
        rows.append({"set_id": sid, "msb_rate": rate, "range_ratio": ratios[sid], "gap": gap})
    return rows


def segmentation_summary(preds: Sequence, gts: Sequence, num_classes: int) -> dict:
    per_class = class_iou(preds, gts, num_classes)
    return {
        "per_class": [None if np.isnan(v) else float(v) for v in per_class],
        "global": global_iou(preds, gts, num_classes),
        "weighted": weighted_iou(preds, gts, num_classes=num_classes),
    }
