"""Cross-entropy, branch-agreement penalty, and the three per-case
composite losses for supervised, unsupervised and half-labeled frame pairs.

Reductions differ deliberately: segmentation / propagation cross-entropies
average over pixels (resolution-independent magnitude), while the agreement
penalty sums over pixels and is then scaled by a small factor, which is what
makes the default factor of 1e-6 land it near the other terms' magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .propagation import one_hot
from .tensor import Tensor

PROB_FLOOR = 1e-12  # clamp below this before log


@dataclass
class LossBreakdown:
    """Per-term values of one training step's loss.

    Components absent for a case are None. `total` keeps the live graph
    node so callers can run backward; the floats are for logging.
    """
    total: Tensor
    lam: float
    case: int
    l_s_m: Optional[Tensor] = None
    l_s_n: Optional[Tensor] = None
    l_p_m: Optional[Tensor] = None
    l_p_n: Optional[Tensor] = None
    l_c_m: Optional[Tensor] = None
    l_c_n: Optional[Tensor] = None

    _FIELDS = ("l_s_m", "l_s_n", "l_p_m", "l_p_n", "l_c_m", "l_c_n")

    def component_floats(self) -> dict:
        out = {}
        for name in self._FIELDS:
            t = getattr(self, name)
            out[name] = None if t is None else t.item()
        out["total"] = self.total.item()
        return out


def _check_pred_target(pred: Tensor, target: np.ndarray) -> None:
    c = pred.shape[0]
    if pred.ndim != 3:
        raise ValueError(f"expected (C, H, W) probability map, got {pred.shape}")
    if target.shape != pred.shape[1:]:
        raise ValueError(f"target shape {target.shape} != map shape {pred.shape[1:]}")
    if target.min() < 0 or target.max() >= c:
        raise ValueError(f"target class {target.max()} out of range [0, {c})")


def _ce(pred: Tensor, target_onehot: np.ndarray) -> Tensor:
    picked = T.mul(Tensor(target_onehot), T.log(T.clamp_min(pred, PROB_FLOOR)))
    return T.tsum(picked)


def ce_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Pixel-mean cross-entropy of a (C, H, W) probability map against an
    (H, W) integer label map; probabilities are clamped at 1e-12."""
    target = np.asarray(target)
    _check_pred_target(pred, target)
    oh = one_hot(target, pred.shape[0])
    n_pix = target.size
    return T.scale(_ce(pred, oh), -1.0 / n_pix)


def ce_sum_hard(pred: Tensor, hard: np.ndarray) -> Tensor:
    """Pixel-sum cross-entropy against an (H, W) integer map (no mean)."""
    hard = np.asarray(hard)
    _check_pred_target(pred, hard)
    oh = one_hot(hard, pred.shape[0])
    return T.scale(_ce(pred, oh), -1.0)


def harden(prob: Tensor) -> np.ndarray:
    """Per-pixel argmax of a (C, H, W) map; ties go to the lower class."""
    return np.argmax(prob.data, axis=0)


def consistency_loss(o_a: Tensor, o_b: Tensor) -> Tensor:
    """Symmetric disagreement between two (C, H, W) probability maps.

    Each side is scored against the other's hardened argmax (a constant:
    no gradient is taken through the argmax), summed over pixels, and the
    two directions are averaged, so the value is symmetric by construction.
    """
    if o_a.shape != o_b.shape:
        raise ValueError(f"consistency_loss: shape mismatch {o_a.shape} vs {o_b.shape}")
    term_ab = ce_sum_hard(o_a, harden(o_b))
    term_ba = ce_sum_hard(o_b, harden(o_a))
    return T.scale(T.add(term_ab, term_ba), 0.5)


def loss_case1(o_s_m, o_s_n, o_p_m, o_p_n, y_m, y_n, lam: float) -> LossBreakdown:
    """Both frames labeled: two segmentation terms, two propagation terms
    (each propagated from the other frame's ground truth), and the scaled
    agreement penalties. Symmetric under swapping the two frames."""
    if y_m is None or y_n is None:
        raise ValueError("loss_case1 requires labels for both frames")
    l_s_m = ce_loss(o_s_m, y_m)
    l_s_n = ce_loss(o_s_n, y_n)
    l_p_m = ce_loss(o_p_m, y_m)
    l_p_n = ce_loss(o_p_n, y_n)
    l_c_m = consistency_loss(o_p_m, o_s_m)
    l_c_n = consistency_loss(o_p_n, o_s_n)
    total = T.add(T.add(T.add(l_s_m, l_s_n), T.add(l_p_m, l_p_n)),
                  T.scale(T.add(l_c_m, l_c_n), lam))
    return LossBreakdown(total=total, lam=lam, case=1, l_s_m=l_s_m, l_s_n=l_s_n,
                         l_p_m=l_p_m, l_p_n=l_p_n, l_c_m=l_c_m, l_c_n=l_c_n)


def loss_case2(o_s_m, o_s_n, o_pp_m, o_pp_n, lam: float) -> LossBreakdown:
    """Neither frame labeled: only the scaled agreement penalties between
    each frame's segmentation output and the map propagated onto it from
    the other frame's segmentation output."""
    l_c_m = consistency_loss(o_pp_m, o_s_m)
    l_c_n = consistency_loss(o_pp_n, o_s_n)
    total = T.scale(T.add(l_c_m, l_c_n), lam)
    return LossBreakdown(total=total, lam=lam, case=2, l_c_m=l_c_m, l_c_n=l_c_n)


def loss_case3(o_s_m, o_s_n, o_p_n, o_pp_m, y_m, lam: float) -> LossBreakdown:
    """Exactly frame m labeled. o_pp_m is propagated onto m from frame n's
    segmentation output and scored against y_m; o_p_n is propagated onto n
    from the ground truth y_m and enters only through the agreement term.
    Asymmetric in (m, n) by construction."""
    if y_m is None:
        raise ValueError("loss_case3 requires a label for frame m")
    l_s_m = ce_loss(o_s_m, y_m)
    l_p_m = ce_loss(o_pp_m, y_m)
    l_c_m = consistency_loss(o_pp_m, o_s_m)
    l_c_n = consistency_loss(o_p_n, o_s_n)
    total = T.add(T.add(l_s_m, l_p_m), T.scale(T.add(l_c_m, l_c_n), lam))
    return LossBreakdown(total=total, lam=lam, case=3, l_s_m=l_s_m,
                         l_p_m=l_p_m, l_c_m=l_c_m, l_c_n=l_c_n)
