"""Evaluation: multi-class Dice with the background class ignored, plus
plain pixel accuracy (used by the training plateau criterion).

Dice is computed jointly over all foreground classes of a frame
(micro-averaged one-hot overlap); per-class values are also reported so a
per-class (macro) reading stays auditable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np


def _check_maps(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} contains classes outside [0, {num_classes})")


def dice_frame(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Joint foreground Dice of one frame: 2|P∩G| / (|P|+|G|) over the
    one-hot foreground channels. Both foregrounds empty scores 1.0,
    exactly one empty scores 0.0."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _check_maps(pred, gt, num_classes)
    p_fore = pred != 0
    g_fore = gt != 0
    denom = int(p_fore.sum()) + int(g_fore.sum())
    if denom == 0:
        return 1.0
    inter = int(np.count_nonzero((pred == gt) & g_fore))
    return 2.0 * inter / denom


def per_class_dice(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> Dict[int, float]:
    """Per foreground class Dice for one frame (empty-empty scores 1.0)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _check_maps(pred, gt, num_classes)
    out = {}
    for c in range(1, num_classes):
        p = pred == c
        g = gt == c
        denom = int(p.sum()) + int(g.sum())
        if denom == 0:
            out[c] = 1.0
        else:
            out[c] = 2.0 * int(np.count_nonzero(p & g)) / denom
    return out


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of agreeing pixels, background included."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return float(np.count_nonzero(pred == gt)) / pred.size


@dataclass
class DiceReport:
    frame_scores: List[float]
    per_class: Dict[int, float]
    mean_dice: float
    frame_count: int


def dice_report(frame_pairs, num_classes: int) -> DiceReport:
    """Aggregate Dice over (pred, gt) labeled frames.

    The dataset mean is the arithmetic mean of per-frame joint Dice; the
    per-class table aggregates intersections and sizes across all frames
    (micro per class).
    """
    scores = []
    inter = np.zeros(num_classes, dtype=np.int64)
    sizes = np.zeros(num_classes, dtype=np.int64)
    for pred, gt in frame_pairs:
        scores.append(dice_frame(pred, gt, num_classes))
        for c in range(1, num_classes):
            p = pred == c
            g = gt == c
            inter[c] += int(np.count_nonzero(p & g))
            sizes[c] += int(p.sum()) + int(g.sum())
    per_class = {}
    for c in range(1, num_classes):
        per_class[c] = 1.0 if sizes[c] == 0 else 2.0 * inter[c] / sizes[c]
    mean = float(np.mean(scores)) if scores else 0.0
    return DiceReport(frame_scores=scores, per_class=per_class,
                      mean_dice=mean, frame_count=len(scores))
