"""Multi-source inference: split a video into clips at high-motion
(watershed) frames, segment each clip's middle frame directly, and
propagate that key frame's output to the rest of the clip.

The clip boundary threshold is the alpha-percentile of a Gaussian fitted to
the mean absolute inter-frame pixel differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .losses import harden
from .propagation import propagate_full
from .tensor import Tensor


@dataclass
class DiffStats:
    """Inter-frame difference statistics: diffs[k] is the mean absolute
    difference between frames k and k+1; sigma is the population standard
    deviation of the fitted Gaussian."""
    diffs: np.ndarray
    mu: float
    sigma: float
    alpha: Optional[float] = None
    threshold: Optional[float] = None


@dataclass
class Clip:
    start: int   # inclusive
    end: int     # exclusive
    key: int

    def frames(self) -> range:
        return range(self.start, self.end)


@dataclass
class ClipPartition:
    num_frames: int
    clips: List[Clip]
    watershed_indices: List[int]


def frame_diffs(frames) -> DiffStats:
    """Mean absolute pixel difference between consecutive frames."""
    if len(frames) < 1:
        raise ValueError("frame_diffs: empty video")
    shape = frames[0].shape
    diffs = []
    for k in range(len(frames) - 1):
        if frames[k + 1].shape != shape:
            raise ValueError(f"frame_diffs: frame {k + 1} shape {frames[k + 1].shape} "
                             f"!= {shape}")
        diffs.append(float(np.abs(frames[k + 1] - frames[k]).mean()))
    diffs = np.asarray(diffs, dtype=np.float64)
    if diffs.size:
        mu = float(diffs.mean())
        sigma = float(diffs.std())  # population std
    else:
        mu = sigma = 0.0
    return DiffStats(diffs=diffs, mu=mu, sigma=sigma)


# Rational approximation to the standard normal quantile (Acklam's
# coefficients); absolute error below 1.2e-9, comfortably inside the 1e-6
# contract. Kept dependency-free so inference needs nothing beyond numpy.
_Q_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
        1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_Q_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
        6.680131188771972e+01, -1.328068155288572e+01)
_Q_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
        -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_Q_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
        3.754408661907416e+00)


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF for p in (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"normal_quantile: p must be in (0, 1), got {p}")
    a, b, c, d = _Q_A, _Q_B, _Q_C, _Q_D
    p_low, p_high = 0.02425, 1.0 - 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    if p > p_high:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)


def watershed_threshold(stats: DiffStats, alpha: float) -> float:
    """Percentile of the fitted Gaussian: mu + z(alpha) * sigma."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"watershed_threshold: alpha must be in (0, 1), got {alpha}")
    return stats.mu + normal_quantile(alpha) * stats.sigma


def watershed_indices(stats: DiffStats, threshold: float) -> List[int]:
    """Frame k+1 opens a new clip when diff k exceeds the threshold."""
    return [k + 1 for k in range(stats.diffs.size) if stats.diffs[k] > threshold]


def partition_clips(num_frames: int, watersheds) -> ClipPartition:
    """Clips are the maximal runs between watershed frames, each watershed
    starting a new clip; the key frame is the (lower) middle of its clip."""
    if num_frames < 1:
        raise ValueError("partition_clips: need at least one frame")
    ws = list(watersheds)
    prev = 0
    for cur in ws:
        if not 1 <= cur < num_frames:
            raise ValueError(f"partition_clips: watershed {cur} outside [1, {num_frames})")
        if cur <= prev:
            raise ValueError("partition_clips: watershed indices must be strictly increasing")
        prev = cur
    bounds = [0] + ws + [num_frames]
    clips = []
    for s, e in zip(bounds[:-1], bounds[1:]):
        clips.append(Clip(start=s, end=e, key=(s + e - 1) // 2))
    return ClipPartition(num_frames=num_frames, clips=clips, watershed_indices=ws)


def select_clips(frames, alpha: float) -> ClipPartition:
    """Full clip selection for a video: diffs, threshold, partition."""
    if len(frames) < 2:
        return partition_clips(len(frames), [])
    stats = frame_diffs(frames)
    thr = watershed_threshold(stats, alpha)
    return partition_clips(len(frames), watershed_indices(stats, thr))


def msi_infer(model, frames, alpha: float, k: int,
              hard_source: bool = False) -> List[np.ndarray]:
    """Segment a video clip-wise: one segmentation forward per clip (on the
    key frame), propagation for every other frame from that key frame's
    output (soft by default, hardened argmax behind the flag)."""
    partition = select_clips(frames, alpha)
    out: List[Optional[np.ndarray]] = [None] * len(frames)
    for clip in partition.clips:
        key_probs = model.segment(Tensor(frames[clip.key]))
        key_label = harden(key_probs)
        out[clip.key] = key_label
        source = key_label if hard_source else key_probs.detach()
        for t in clip.frames():
            if t == clip.key:
                continue
            probs = propagate_full(model, frames[clip.key], frames[t], source, k)
            out[t] = harden(probs)
    return out  # type: ignore[return-value]


def seg_infer(model, frames) -> List[np.ndarray]:
    """Per-frame segmentation branch only (no propagation)."""
    return [harden(model.segment(Tensor(f))) for f in frames]
