"""Video dataset on disk: a plain-text manifest plus per-video directories
of binary PPM frames and optional PGM label maps.

Layout:
    <root>/manifest.txt                 header line, then "<id> <frames> <split>"
    <root>/<video_id>/frame_%04d.ppm    RGB frames
    <root>/<video_id>/label_%04d.pgm    class-index maps; absence = unlabeled

Frames live in memory as (3, H, W) float64 in [0, 1] quantized to 8 bits,
so save(load(dir)) reproduces the directory byte-exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .errors import DataError
from .imageio import (bytes_to_frame, frame_to_bytes, load_pgm, load_ppm,
                      save_pgm, save_ppm)

MANIFEST_NAME = "manifest.txt"
MANIFEST_MAGIC = "SPNDATA1"
NUM_CLASSES = 5
CLASS_NAMES = ("background", "head", "arm", "torso", "leg")
# overlay palette, indexed by class
PALETTE = np.array([
    (0, 0, 0),        # background
    (255, 0, 0),      # head
    (0, 255, 0),      # arm
    (0, 0, 255),      # torso
    (255, 255, 0),    # leg
], dtype=np.uint8)


@dataclass
class Video:
    id: str
    split: str
    frames: List[np.ndarray]                 # (3, H, W) float64 each
    labels: Dict[int, np.ndarray] = field(default_factory=dict)  # idx -> (H, W) int64

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def labeled_indices(self) -> List[int]:
        return sorted(self.labels)

    def unlabeled_indices(self) -> List[int]:
        return [i for i in range(len(self.frames)) if i not in self.labels]


@dataclass
class VideoDataset:
    videos: List[Video]

    def by_id(self, video_id: str) -> Video:
        for v in self.videos:
            if v.id == video_id:
                return v
        raise DataError(f"no video named {video_id!r} in dataset")

    def split_videos(self, split: str) -> List[Video]:
        return [v for v in self.videos if v.split == split]

    def labeled_frames(self, split: str) -> List[tuple]:
        out = []
        for v in self.split_videos(split):
            out.extend((v.id, i) for i in v.labeled_indices())
        return out


def frame_path(root, video_id: str, idx: int) -> str:
    return os.path.join(str(root), video_id, f"frame_{idx:04d}.ppm")


def label_path(root, video_id: str, idx: int) -> str:
    return os.path.join(str(root), video_id, f"label_{idx:04d}.pgm")


def save_dataset(root, dataset: VideoDataset) -> None:
    root = str(root)
    os.makedirs(root, exist_ok=True)
    lines = [MANIFEST_MAGIC]
    for v in dataset.videos:
        if v.split not in ("train", "test"):
            raise DataError(f"video {v.id}: bad split {v.split!r}")
        lines.append(f"{v.id} {v.num_frames} {v.split}")
        vdir = os.path.join(root, v.id)
        os.makedirs(vdir, exist_ok=True)
        for i, frame in enumerate(v.frames):
            save_ppm(frame_path(root, v.id, i), frame_to_bytes(frame))
        for i, lab in v.labels.items():
            if lab.max() >= NUM_CLASSES or lab.min() < 0:
                raise DataError(f"video {v.id} frame {i}: label class out of range")
            save_pgm(label_path(root, v.id, i), lab.astype(np.uint8))
    with open(os.path.join(root, MANIFEST_NAME), "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(root) -> VideoDataset:
    root = str(root)
    mpath = os.path.join(root, MANIFEST_NAME)
    if not os.path.exists(mpath):
        raise DataError(f"{mpath}: manifest not found")
    with open(mpath, "r") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise DataError(f"{mpath}: bad or missing header line")
    videos = []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        parts = ln.split()
        if len(parts) != 3:
            raise DataError(f"{mpath}: malformed line {ln!r}")
        vid, count_s, split = parts
        if split not in ("train", "test"):
            raise DataError(f"{mpath}: bad split {split!r} for video {vid}")
        try:
            count = int(count_s)
        except ValueError:
            raise DataError(f"{mpath}: bad frame count {count_s!r}") from None
        frames = []
        labels: Dict[int, np.ndarray] = {}
        shape = None
        for i in range(count):
            fpath = frame_path(root, vid, i)
            if not os.path.exists(fpath):
                raise DataError(f"{fpath}: frame file missing")
            img = load_ppm(fpath)
            if shape is None:
                shape = img.shape[:2]
            elif img.shape[:2] != shape:
                raise DataError(f"{fpath}: frame size {img.shape[:2]} != {shape}")
            frames.append(bytes_to_frame(img))
            lpath = label_path(root, vid, i)
            if os.path.exists(lpath):
                lab = load_pgm(lpath)
                if lab.shape != shape:
                    raise DataError(f"{lpath}: label size {lab.shape} != {shape}")
                if lab.max() >= NUM_CLASSES:
                    raise DataError(f"{lpath}: class index {lab.max()} out of range "
                                    f"[0, {NUM_CLASSES})")
                labels[i] = lab.astype(np.int64)
        videos.append(Video(id=vid, split=split, frames=frames, labels=labels))
    return VideoDataset(videos=videos)


def overlay_image(label_map: np.ndarray) -> np.ndarray:
    """Class-index map -> fixed-palette RGB image for quick inspection."""
    lab = np.asarray(label_map)
    if lab.max() >= len(PALETTE) or lab.min() < 0:
        raise ValueError(f"label values out of palette range: {lab.min()}..{lab.max()}")
    return PALETTE[lab]
