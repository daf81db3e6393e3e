"""Joint training of the segmentation and propagation branches.

Each step draws a training mode from the annealed schedule, pulls a batch of
same-video frame pairs from that mode's pool, runs the mode-appropriate
forward paths and loss, and takes one momentum-SGD step under a polynomial
learning-rate decay. Training stops when the held-out pixel accuracy of both
branches plateaus, or at the epoch cap.

Everything is driven by one seeded generator, so a (seed, config, dataset)
triple reproduces checkpoints bit-exactly single-threaded.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional

import numpy as np

from . import losses as L
from . import propagation as P
from . import schedule as S
from . import tensor as T
from .errors import DataError, NumericalError
from .metrics import pixel_accuracy
from .model import ModelConfig, SegPropModel, save_checkpoint
from .schedule import (CASE_SEMI, CASE_SUPERVISED, CASE_UNSUPERVISED,
                       AatConfig, PairPools, TrainingCase)
from .tensor import SGD, Tensor

LOG_COLUMNS = "step,epoch,case,lr,l_s_m,l_s_n,l_p_m,l_p_n,l_c_m,l_c_n,total"


class TrainMode(str, Enum):
    FULL = "full"
    NO_SSL = "no-ssl"
    NO_CONSISTENCY = "no-consistency"
    SEG_ONLY = "seg-only"


@dataclass
class TrainConfig:
    lr0: float = 2.5e-4
    momentum: float = 0.9
    poly_power: float = 0.9
    batch_pairs: int = 4
    max_epochs: int = 20
    plateau_eps: float = 0.002
    plateau_epochs: int = 2
    lam: float = 1e-6
    k_top: int = 20
    mode: TrainMode = TrainMode.FULL
    aat: AatConfig = field(default_factory=AatConfig)
    aat_epochs: int = 20
    pairs_per_case: int = 500
    holdout_fraction: float = 0.1
    augment: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_pairs < 1:
            raise ValueError("batch_pairs must be >= 1")
        if self.plateau_epochs < 1:
            raise ValueError("plateau_epochs must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


def poly_lr(i: int, max_steps: int, cfg: TrainConfig) -> float:
    """lr0 * (1 - i/max_steps)^power; reaches exactly 0 at max_steps."""
    if not 0 <= i <= max_steps:
        raise ValueError(f"step {i} outside [0, {max_steps}]")
    if max_steps == 0:
        return cfg.lr0
    return cfg.lr0 * (1.0 - i / max_steps) ** cfg.poly_power


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _rotate_coords(h: int, w: int, angle_deg: float):
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(angle_deg)
    cos_t, sin_t = math.cos(th), math.sin(th)
    yg, xg = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse mapping: output pixel samples the source at the back-rotation
    ys = cy + (yg - cy) * cos_t - (xg - cx) * sin_t
    xs = cx + (yg - cy) * sin_t + (xg - cx) * cos_t
    return ys, xs


def _rotate_frame(frame: np.ndarray, ys, xs) -> np.ndarray:
    h, w = frame.shape[1:]
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    ty = np.clip(ys - y0, 0.0, 1.0)
    tx = np.clip(xs - x0, 0.0, 1.0)
    out = np.empty_like(frame)
    for c in range(frame.shape[0]):
        ch = frame[c]
        top = ch[y0, x0] * (1 - tx) + ch[y0, x1] * tx
        bot = ch[y1, x0] * (1 - tx) + ch[y1, x1] * tx
        out[c] = top * (1 - ty) + bot * ty
    return out


def _rotate_labels(lab: np.ndarray, ys, xs) -> np.ndarray:
    h, w = lab.shape
    yn = np.clip(np.rint(ys).astype(np.int64), 0, h - 1)
    xn = np.clip(np.rint(xs).astype(np.int64), 0, w - 1)
    return lab[yn, xn]


def augment_pair(rng, frames: list, labels: list):
    """One jointly-sampled transform for a frame pair: horizontal flip
    (p=0.5), rotation within +-15 degrees, per-channel color scale in
    [0.8, 1.2] plus offset in +-0.05. Frames are resampled bilinearly with
    edge clamping, labels with nearest lookup, so no new class appears."""
    flip = rng.random() < 0.5
    angle = rng.uniform(-15.0, 15.0)
    scales = rng.uniform(0.8, 1.2, size=3)
    offsets = rng.uniform(-0.05, 0.05, size=3)
    h, w = frames[0].shape[1:]
    ys, xs = _rotate_coords(h, w, angle)
    out_frames, out_labels = [], []
    for f in frames:
        if flip:
            f = f[:, :, ::-1]
        f = _rotate_frame(np.ascontiguousarray(f), ys, xs)
        f = np.clip(f * scales[:, None, None] + offsets[:, None, None], 0.0, 1.0)
        out_frames.append(f)
    for lab in labels:
        if lab is None:
            out_labels.append(None)
            continue
        if flip:
            lab = lab[:, ::-1]
        out_labels.append(_rotate_labels(np.ascontiguousarray(lab), ys, xs))
    return out_frames, out_labels


# ---------------------------------------------------------------------------
# per-pair forward + loss
# ---------------------------------------------------------------------------

def pair_loss(model: SegPropModel, case: TrainingCase, dataset, cfg: TrainConfig,
              rng=None) -> L.LossBreakdown:
    """Forward both frames of one drawn pair through the mode-appropriate
    paths and return the case loss (graph attached, no optimizer step)."""
    video = dataset.by_id(case.video_id)
    x_m = video.frames[case.frame_m]
    x_n = video.frames[case.frame_n]
    y_m = video.labels.get(case.frame_m)
    y_n = video.labels.get(case.frame_n)
    if cfg.augment and rng is not None:
        (x_m, x_n), (y_m, y_n) = augment_pair(rng, [x_m, x_n], [y_m, y_n])

    lam = 0.0 if cfg.mode is TrainMode.NO_CONSISTENCY else cfg.lam
    k = cfg.k_top

    f_m = model.encode(Tensor(x_m))
    f_n = model.encode(Tensor(x_n))
    o_s_m = model.seg_forward(f_m)
    o_s_n = model.seg_forward(f_n)

    if cfg.mode is TrainMode.SEG_ONLY:
        if y_m is None or y_n is None:
            raise DataError("seg-only training needs labeled pairs")
        l_s_m = L.ce_loss(o_s_m, y_m)
        l_s_n = L.ce_loss(o_s_n, y_n)
        total = T.add(l_s_m, l_s_n)
        return L.LossBreakdown(total=total, lam=lam, case=CASE_SUPERVISED,
                               l_s_m=l_s_m, l_s_n=l_s_n)

    fp_m = model.prop_features(f_m)
    fp_n = model.prop_features(f_n)
    stride = model.cfg.output_stride
    num_classes = model.cfg.num_classes
    grid_hw = fp_m.shape[1:]

    def propagate(target_feats, source_feats, source_vectors):
        m = P.similarity_matrix(target_feats, source_feats)
        grid = P.propagate_labels(m, source_vectors, k)
        return P.lift_to_full_resolution(grid, grid_hw, stride)

    if case.kind == CASE_SUPERVISED:
        if y_m is None or y_n is None:
            raise DataError(f"pair {case} drawn for the fully-labeled case lacks labels")
        o_p_m = propagate(fp_m, fp_n, P.downsample_source_labels(y_n, stride, num_classes))
        o_p_n = propagate(fp_n, fp_m, P.downsample_source_labels(y_m, stride, num_classes))
        return L.loss_case1(o_s_m, o_s_n, o_p_m, o_p_n, y_m, y_n, lam)

    if case.kind == CASE_UNSUPERVISED:
        o_pp_m = propagate(fp_m, fp_n, P.downsample_source_probs(o_s_n, stride))
        o_pp_n = propagate(fp_n, fp_m, P.downsample_source_probs(o_s_m, stride))
        return L.loss_case2(o_s_m, o_s_n, o_pp_m, o_pp_n, lam)

    if case.kind == CASE_SEMI:
        if y_m is None or y_n is not None:
            raise DataError(f"pair {case} drawn for the half-labeled case must have "
                            f"exactly frame m labeled")
        o_pp_m = propagate(fp_m, fp_n, P.downsample_source_probs(o_s_n, stride))
        o_p_n = propagate(fp_n, fp_m, P.downsample_source_labels(y_m, stride, num_classes))
        return L.loss_case3(o_s_m, o_s_n, o_p_n, o_pp_m, y_m, lam)

    raise ValueError(f"unknown case kind {case.kind}")


def train_step(model: SegPropModel, case: TrainingCase, dataset, cfg: TrainConfig,
               opt: Optional[SGD] = None, lr: Optional[float] = None,
               rng=None) -> L.LossBreakdown:
    """Single-pair step: forward, backward and one SGD update."""
    if opt is None:
        opt = SGD(model.params, momentum=cfg.momentum)
    bd = pair_loss(model, case, dataset, cfg, rng=rng)
    if not np.isfinite(bd.total.item()):
        raise NumericalError(f"non-finite loss {bd.total.item()} at pair {case}")
    opt.zero_grad()
    bd.total.backward()
    opt.step(cfg.lr0 if lr is None else lr)
    return bd


# ---------------------------------------------------------------------------
# held-out accuracy for the plateau criterion
# ---------------------------------------------------------------------------

def select_holdout(dataset, fraction: float) -> List[tuple]:
    """A fixed slice of labeled training frames: every round(1/fraction)-th
    entry of the (video, frame) list in manifest order, at least one."""
    frames = dataset.labeled_frames("train")
    if not frames:
        return []
    stride = max(1, int(round(1.0 / fraction))) if fraction > 0 else len(frames) + 1
    picked = frames[::stride]
    return picked if picked else [frames[0]]


def _nearest_labeled_source(video, idx: int, holdout: set) -> int:
    candidates = [j for j in video.labeled_indices()
                  if j != idx and (video.id, j) not in holdout]
    if not candidates:
        return idx
    return min(candidates, key=lambda j: (abs(j - idx), j))


def holdout_accuracy(model: SegPropModel, dataset, holdout: List[tuple],
                     k: int) -> tuple:
    """Pixel accuracy of both branches on the held-out labeled frames.

    The propagation branch is scored by propagating the nearest remaining
    labeled frame's ground truth onto the held-out frame.
    """
    holdout_set = set(holdout)
    acc_s, acc_p = [], []
    for vid, idx in holdout:
        video = dataset.by_id(vid)
        gt = video.labels[idx]
        frame = video.frames[idx]
        pred_s = L.harden(model.segment(Tensor(frame)))
        acc_s.append(pixel_accuracy(pred_s, gt))
        src_idx = _nearest_labeled_source(video, idx, holdout_set)
        probs = P.propagate_full(model, video.frames[src_idx], frame,
                                 video.labels[src_idx], k)
        acc_p.append(pixel_accuracy(L.harden(probs), gt))
    if not acc_s:
        return 0.0, 0.0
    return float(np.mean(acc_s)), float(np.mean(acc_p))


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    epoch: int
    case: int
    lr: float
    components: dict


@dataclass
class EpochRecord:
    epoch: int
    acc_seg: float
    acc_prop: float


@dataclass
class TrainResult:
    model: SegPropModel
    steps: List[StepRecord]
    epochs: List[EpochRecord]
    global_step: int
    stopped_early: bool
    holdout: List[tuple]


def _effective_config(cfg: TrainConfig, dataset) -> TrainConfig:
    """Resolve mode and dataset degeneracies into schedule settings."""
    aat = replace(cfg.aat)
    if cfg.mode in (TrainMode.NO_SSL, TrainMode.SEG_ONLY):
        aat = replace(aat, p1_floor=1.0)
    has_unlabeled = any(v.unlabeled_indices() for v in dataset.split_videos("train"))
    if not has_unlabeled:
        # nothing for the unlabeled-involving modes to draw; run fully
        # supervised regardless of the requested floor
        aat = replace(aat, p1_floor=1.0)
    return replace(cfg, aat=aat)


def train(dataset, cfg: TrainConfig, ckpt_path=None, log_path=None) -> TrainResult:
    """Run the full loop and optionally write the checkpoint and CSV log."""
    cfg.validate()
    cfg = _effective_config(cfg, dataset)
    model = SegPropModel(replace(cfg.model, seed=cfg.seed))
    opt = SGD(model.params, momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)

    holdout = select_holdout(dataset, cfg.holdout_fraction)
    needed = (CASE_SUPERVISED,) if cfg.aat.p1_floor >= 1.0 else S.ALL_CASES
    pools = S.build_pools(dataset, cfg.pairs_per_case, rng,
                          cases=needed, exclude=set(holdout))

    steps_per_epoch = max(1, math.ceil(cfg.pairs_per_case / cfg.batch_pairs))
    max_steps = max(1, cfg.max_epochs * steps_per_epoch)
    aat = replace(cfg.aat, i_max=max(1, cfg.aat_epochs * steps_per_epoch))
    cfg = replace(cfg, aat=aat)

    steps: List[StepRecord] = []
    epochs: List[EpochRecord] = []
    prev_acc = None
    calm_epochs = 0
    stopped = False
    step = 0

    for epoch in range(cfg.max_epochs):
        for _ in range(steps_per_epoch):
            lr = poly_lr(step, max_steps, cfg)
            kind = S.draw_case_kind(step, rng, cfg.aat)
            cases = []
            for _ in range(cfg.batch_pairs):
                vid, a, b = pools.next_pair(kind, rng)
                cases.append(TrainingCase(kind=kind, video_id=vid, frame_m=a, frame_n=b))
            breakdowns = [pair_loss(model, c, dataset, cfg, rng=rng) for c in cases]
            total = T.scale(T.add_n([bd.total for bd in breakdowns]),
                            1.0 / len(breakdowns))
            if not np.isfinite(total.item()):
                raise NumericalError(f"non-finite batch loss at step {step}")
            opt.zero_grad()
            total.backward()
            opt.step(lr)

            comps = {}
            for name in L.LossBreakdown._FIELDS:
                vals = [bd.component_floats()[name] for bd in breakdowns]
                comps[name] = None if vals[0] is None else float(np.mean(vals))
            comps["total"] = total.item()
            steps.append(StepRecord(step=step, epoch=epoch, case=kind, lr=lr,
                                    components=comps))
            step += 1

        acc_s, acc_p = holdout_accuracy(model, dataset, holdout, cfg.k_top)
        epochs.append(EpochRecord(epoch=epoch, acc_seg=acc_s, acc_prop=acc_p))
        if prev_acc is not None:
            if abs(acc_s - prev_acc[0]) < cfg.plateau_eps and \
               abs(acc_p - prev_acc[1]) < cfg.plateau_eps:
                calm_epochs += 1
            else:
                calm_epochs = 0
            if calm_epochs >= cfg.plateau_epochs:
                stopped = True
        prev_acc = (acc_s, acc_p)
        if stopped:
            break

    result = TrainResult(model=model, steps=steps, epochs=epochs,
                         global_step=step, stopped_early=stopped, holdout=holdout)
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, model.params, step=step)
    if log_path is not None:
        write_log(log_path, cfg, result)
    return result


def write_log(path, cfg: TrainConfig, result: TrainResult) -> None:
    """CSV step log with '#'-prefixed header and per-epoch accuracy lines."""
    parent = os.path.dirname(os.path.abspath(str(path)))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        f.write(f"# mode={cfg.mode.value} seed={cfg.seed} lr0={cfg.lr0} "
                f"lambda={cfg.lam} k={cfg.k_top} t={cfg.aat.t} "
                f"p1_min={cfg.aat.p1_floor} batch={cfg.batch_pairs}\n")
        f.write(f"# holdout={';'.join(f'{v}:{i}' for v, i in result.holdout)}\n")
        f.write(LOG_COLUMNS + "\n")
        for rec in result.steps:
            comps = rec.components
            cells = [str(rec.step), str(rec.epoch), str(rec.case), repr(rec.lr)]
            for name in L.LossBreakdown._FIELDS:
                v = comps[name]
                cells.append("" if v is None else repr(v))
            cells.append(repr(comps["total"]))
            f.write(",".join(cells) + "\n")
        for e in result.epochs:
            f.write(f"#epoch,{e.epoch},{e.acc_seg!r},{e.acc_prop!r}\n")
