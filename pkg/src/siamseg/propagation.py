"""Feature-space label transfer between frames.

A similarity matrix of pairwise cosines between the two frames' matching
features drives, per target point, a mean of the k best-matching source
class vectors weighted by their scores, followed by a softmax over classes.
Differentiable end to end (the top-k index set itself is held constant), and
usable standalone at inference time.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(H, W) int labels -> (C, H, W) float64 indicator planes."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"labels out of range [0, {num_classes}): min {labels.min()}, max {labels.max()}")
    out = np.zeros((num_classes, *labels.shape), dtype=np.float64)
    for c in range(num_classes):
        out[c][labels == c] = 1.0
    return out


def _flatten_features(fmap: Tensor) -> Tensor:
    """(D, h, w) feature map -> (h*w, D) rows of per-point feature vectors."""
    d = fmap.shape[0]
    flat = T.reshape(fmap, (d, fmap.shape[1] * fmap.shape[2]))
    return T.transpose2d(flat)


def similarity_matrix(fp_target: Tensor, fp_source: Tensor) -> Tensor:
    """Cosine affinity between every target point (rows) and source point
    (columns) of two same-shape (D, h, w) feature maps."""
    if fp_target.shape != fp_source.shape:
        raise ValueError(
            f"similarity_matrix: shape mismatch {fp_target.shape} vs {fp_source.shape}")
    return T.cosine_rows(_flatten_features(fp_target), _flatten_features(fp_source))


def propagate_labels(m: Tensor, source_probs: Tensor, k: int) -> Tensor:
    """Transfer (N_src, C) source class vectors to targets through the
    (N_tgt, N_src) similarity matrix; returns (N_tgt, C) distributions."""
    agg = T.topk_rows_aggregate(m, source_probs, k)
    return T.softmax(agg, axis=1)


def downsample_source_labels(labels: np.ndarray, stride: int, num_classes: int) -> Tensor:
    """Ground-truth source labels -> one-hot class vectors on the feature
    grid, (h*w, C). Nearest (top-left) downsampling keeps label identity."""
    small = T.downsample_nearest_labels(labels, stride)
    oh = one_hot(small, num_classes)  # (C, h, w)
    return Tensor(np.ascontiguousarray(oh.reshape(num_classes, -1).T))


def downsample_source_probs(probs: Tensor, stride: int) -> Tensor:
    """Soft source map (C, H, W) -> feature-grid class vectors (h*w, C).

    Area averaging preserves probability mass; the renormalization after it
    keeps each vector an exact distribution.
    """
    x = T.reshape(probs, (1, *probs.shape))
    x = T.avg_pool(x, stride)
    x = T.normalize_channel(x)
    c = probs.shape[0]
    x = T.reshape(x, (c, x.shape[2] * x.shape[3]))
    return T.transpose2d(x)


def lift_to_full_resolution(grid_probs: Tensor, grid_hw, stride: int) -> Tensor:
    """(N, C) feature-grid distributions -> (C, H, W) full-resolution map."""
    h, w = grid_hw
    c = grid_probs.shape[1]
    x = T.transpose2d(grid_probs)            # (C, N)
    x = T.reshape(x, (1, c, h, w))
    x = T.upsample_bilinear(x, stride)
    x = T.normalize_channel(x)
    return T.reshape(x, x.shape[1:])


def propagate_full(model, x_src, x_tgt, source, k: int) -> Tensor:
    """Propagate a source frame's labels to a target frame, end to end.

    `source` is either a ground-truth (H, W) int label map or a soft
    (C, H, W) probability map produced by the segmentation head. Output is
    a full-resolution (C, H, W) probability map for the target frame.
    """
    stride = model.cfg.output_stride
    fp_t = model.prop_features(model.encode(x_tgt))
    fp_s = model.prop_features(model.encode(x_src))
    if isinstance(source, Tensor):
        src_vectors = downsample_source_probs(source, stride)
    elif isinstance(source, np.ndarray) and np.issubdtype(source.dtype, np.integer):
        src_vectors = downsample_source_labels(source, stride, model.cfg.num_classes)
    else:
        raise ValueError("propagate_full: source must be an int label map or a "
                         "probability-map Tensor")
    m = similarity_matrix(fp_t, fp_s)
    grid = propagate_labels(m, src_vectors, k)
    return lift_to_full_resolution(grid, fp_t.shape[1:], stride)
