"""Deterministic synthetic videos of an articulated five-class figure.

Each video shows one figure (ellipse head, rectangle torso, capsule arms and
legs) over a textured background, with smooth per-video joint trajectories,
optional frames where an arm swings across the head/torso (occlusion),
optional moving shadows on the background, and an optional injected
large-motion frame. Labels are rendered pixel-exactly from the same geometry
in the same painter order, so image and label always agree.

All randomness derives from (seed, video index), so output is byte-identical
across runs and independent of generation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import NUM_CLASSES, Video, VideoDataset, save_dataset
from .errors import DataError

CLASS_BG, CLASS_HEAD, CLASS_ARM, CLASS_TORSO, CLASS_LEG = range(5)

# figure geometry in units of a 64-pixel frame (scaled by min(H, W)/64);
# chosen so normal arm poses stay >= 3 rows clear of the head and pixel
# shares keep the background >> torso > legs > arms > head imbalance
TORSO_HW, TORSO_HH = 9.0, 13.0
HEAD_RX, HEAD_RY = 6.5, 7.0
HEAD_GAP = 3.0
ARM_LEN, ARM_R = 14.0, 2.75
LEG_LEN, LEG_R = 15.0, 3.25
SHOULDER_DX, SHOULDER_DY = 9.0, 2.75
HIP_DX, HIP_INSET = 4.5, 2.0

BASE_COLORS = {
    CLASS_HEAD: (0.85, 0.72, 0.58),
    CLASS_ARM: (0.25, 0.62, 0.30),
    CLASS_TORSO: (0.30, 0.38, 0.78),
    CLASS_LEG: (0.78, 0.72, 0.25),
}
BG_COLOR = (0.55, 0.52, 0.50)


@dataclass
class SynthConfig:
    videos: int = 8
    frames_per_video: int = 32
    width: int = 64
    height: int = 64
    label_fraction: float = 1.0
    unlabeled_videos: int = 0
    occlusion_rate: float = 0.0
    shadow: bool = True
    test_videos: int = 2
    jump_at: Optional[int] = None   # frame index where pose/background jump
    seed: int = 0

    def validate(self) -> None:
        if self.videos < 1 or self.frames_per_video < 1:
            raise DataError("need at least one video and one frame per video")
        if not 0.0 < self.label_fraction <= 1.0:
            raise DataError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise DataError(f"occlusion_rate must be in [0, 1], got {self.occlusion_rate}")
        if self.test_videos < 0 or self.test_videos >= self.videos:
            raise DataError("test_videos must leave at least one training video")
        train = self.videos - self.test_videos
        if self.unlabeled_videos < 0 or self.unlabeled_videos >= self.videos \
                or self.unlabeled_videos > train:
            raise DataError("unlabeled_videos must be fewer than the training videos")
        if self.width < 16 or self.height < 16:
            raise DataError("frames must be at least 16x16")
        if self.jump_at is not None and not 1 <= self.jump_at < self.frames_per_video:
            raise DataError(f"jump_at must be in [1, {self.frames_per_video})")


def _ellipse(xg, yg, cx, cy, rx, ry):
    return ((xg - cx) / rx) ** 2 + ((yg - cy) / ry) ** 2 <= 1.0


def _rect(xg, yg, cx, cy, hw, hh):
    return (np.abs(xg - cx) <= hw) & (np.abs(yg - cy) <= hh)


def _capsule(xg, yg, x0, y0, x1, y1, r):
    vx, vy = x1 - x0, y1 - y0
    vv = vx * vx + vy * vy
    if vv == 0.0:
        return (xg - x0) ** 2 + (yg - y0) ** 2 <= r * r
    tt = np.clip(((xg - x0) * vx + (yg - y0) * vy) / vv, 0.0, 1.0)
    dx = xg - (x0 + tt * vx)
    dy = yg - (y0 + tt * vy)
    return dx * dx + dy * dy <= r * r


class _Oscillator:
    """base + amp * sin(omega * t + phase), parameters drawn per video."""

    def __init__(self, rng, base, amp_range, omega_range=(0.15, 0.45)):
        self.base = base
        self.amp = rng.uniform(*amp_range)
        self.omega = rng.uniform(*omega_range)
        self.phase = rng.uniform(0.0, 2.0 * math.pi)

    def __call__(self, t: float) -> float:
        return self.base + self.amp * math.sin(self.omega * t + self.phase)


def _render_video(cfg: SynthConfig, vid_index: int):
    rng = np.random.default_rng([cfg.seed, vid_index])
    h, w = cfg.height, cfg.width
    u = min(h, w) / 64.0
    yg, xg = np.mgrid[0:h, 0:w].astype(np.float64)

    colors = {c: np.clip(np.asarray(col) + rng.uniform(-0.12, 0.12, 3), 0.08, 0.95)
              for c, col in BASE_COLORS.items()}
    bg = np.clip(np.asarray(BG_COLOR) + rng.uniform(-0.15, 0.15, 3), 0.10, 0.90)

    # static background texture: two low-frequency sinusoids per channel
    tex_freq = rng.uniform(0.05, 0.20, size=(2, 2))
    tex_phase = rng.uniform(0.0, 2.0 * math.pi, size=2)
    tex_amp = rng.uniform(0.03, 0.06, size=2)

    cx_t = _Oscillator(rng, w / 2.0, (1.0 * u, 3.0 * u))
    cy_t = _Oscillator(rng, h / 2.0, (0.5 * u, 1.5 * u))
    head_dx_t = _Oscillator(rng, 0.0, (0.5 * u, 1.5 * u))
    arm_l_t = _Oscillator(rng, math.radians(35.0), (math.radians(10.0), math.radians(20.0)))
    arm_r_t = _Oscillator(rng, math.radians(35.0), (math.radians(10.0), math.radians(20.0)))
    leg_l_t = _Oscillator(rng, math.radians(-8.0), (math.radians(6.0), math.radians(10.0)))
    leg_r_t = _Oscillator(rng, math.radians(8.0), (math.radians(6.0), math.radians(10.0)))

    t_count = cfg.frames_per_video
    n_occ = int(round(cfg.occlusion_rate * t_count))
    occ_frames = set(int(i) for i in rng.choice(t_count, size=n_occ, replace=False)) \
        if n_occ else set()

    frames, labels = [], []
    for t in range(t_count):
        jumped = cfg.jump_at is not None and t >= cfg.jump_at
        cx = cx_t(t) + (12.0 * u if jumped else 0.0)
        cy = cy_t(t)
        phase_shift = math.pi if jumped else 0.0

        texture = np.zeros((h, w))
        for s in range(2):
            texture += tex_amp[s] * np.sin(tex_freq[s, 0] * xg + tex_freq[s, 1] * yg
                                           + tex_phase[s] + phase_shift)
        img = bg[:, None, None] + texture[None, :, :]

        torso_top = cy - TORSO_HH * u
        sh_l = (cx - SHOULDER_DX * u, torso_top + SHOULDER_DY * u)
        sh_r = (cx + SHOULDER_DX * u, torso_top + SHOULDER_DY * u)
        hip_l = (cx - HIP_DX * u, cy + (TORSO_HH - HIP_INSET) * u)
        hip_r = (cx + HIP_DX * u, cy + (TORSO_HH - HIP_INSET) * u)
        head_c = (cx + head_dx_t(t), torso_top - (HEAD_GAP + HEAD_RY) * u)

        a_l, a_r = arm_l_t(t), arm_r_t(t)
        arm_l_end = (sh_l[0] - ARM_LEN * u * math.sin(a_l), sh_l[1] + ARM_LEN * u * math.cos(a_l))
        arm_r_end = (sh_r[0] + ARM_LEN * u * math.sin(a_r), sh_r[1] + ARM_LEN * u * math.cos(a_r))
        p_l, p_r = leg_l_t(t), leg_r_t(t)
        leg_l_end = (hip_l[0] + LEG_LEN * u * math.sin(p_l), hip_l[1] + LEG_LEN * u * math.cos(p_l))
        leg_r_end = (hip_r[0] + LEG_LEN * u * math.sin(p_r), hip_r[1] + LEG_LEN * u * math.cos(p_r))

        parts = [
            (CLASS_LEG, _capsule(xg, yg, *hip_l, *leg_l_end, LEG_R * u)),
            (CLASS_LEG, _capsule(xg, yg, *hip_r, *leg_r_end, LEG_R * u)),
            (CLASS_TORSO, _rect(xg, yg, cx, cy, TORSO_HW * u, TORSO_HH * u)),
            (CLASS_ARM, _capsule(xg, yg, *sh_l, *arm_l_end, ARM_R * u)),
            (CLASS_ARM, _capsule(xg, yg, *sh_r, *arm_r_end, ARM_R * u)),
            (CLASS_HEAD, _ellipse(xg, yg, *head_c, HEAD_RX * u, HEAD_RY * u)),
        ]
        if t in occ_frames:
            # the right arm swings up across the head and upper torso and is
            # drawn last, occluding them
            occ_end = (head_c[0] + 1.0 * u, head_c[1] + 1.0 * u)
            parts.append((CLASS_ARM, _capsule(xg, yg, *sh_r, *occ_end, ARM_R * u)))

        if cfg.shadow:
            for (ex, ey) in (arm_l_end, arm_r_end, leg_l_end, leg_r_end):
                blob = _ellipse(xg, yg, ex + 3.0 * u, ey + 4.0 * u, 5.0 * u, 3.5 * u)
                img[:, blob] *= 0.55

        label = np.zeros((h, w), dtype=np.int64)
        for cls, mask in parts:
            label[mask] = cls
            img[:, mask] = colors[cls][:, None]

        img += 0.01 * rng.standard_normal((3, h, w))
        img = np.clip(img, 0.0, 1.0)
        # quantize to the on-disk 8-bit precision so in-memory and reloaded
        # datasets are identical
        img = np.rint(img * 255.0) / 255.0
        frames.append(img)
        labels.append(label)
    return frames, labels, rng


def generate(cfg: SynthConfig) -> VideoDataset:
    """Render the configured dataset in memory (already 8-bit quantized)."""
    cfg.validate()
    train_count = cfg.videos - cfg.test_videos
    videos = []
    for vi in range(cfg.videos):
        frames, labels, rng = _render_video(cfg, vi)
        split = "train" if vi < train_count else "test"
        is_stripped = split == "train" and vi >= train_count - cfg.unlabeled_videos
        if is_stripped:
            kept = {}
        else:
            t_count = cfg.frames_per_video
            n_keep = max(1, int(round(cfg.label_fraction * t_count)))
            keep = sorted(int(i) for i in rng.choice(t_count, size=n_keep, replace=False))
            kept = {i: labels[i] for i in keep}
        videos.append(Video(id=f"video{vi:02d}", split=split, frames=frames, labels=kept))
    return VideoDataset(videos=videos)


def generate_to_dir(cfg: SynthConfig, out_dir) -> VideoDataset:
    ds = generate(cfg)
    save_dataset(out_dir, ds)
    return ds
