"""Adaptive alternation between the three training modes.

Early steps draw almost exclusively fully-labeled pairs; the probability of
that mode anneals toward a floor as the step count grows, with the leftover
mass split evenly between the unlabeled and half-labeled modes. Pair pools
for each mode are pre-built from same-video frame pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError

CASE_SUPERVISED = 1
CASE_UNSUPERVISED = 2
CASE_SEMI = 3
ALL_CASES = (CASE_SUPERVISED, CASE_UNSUPERVISED, CASE_SEMI)


@dataclass
class AatConfig:
    p1_floor: float = 1.0 / 3.0
    t: float = 0.4
    i_max: int = 1
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.p1_floor <= 1.0:
            raise ValueError(f"p1_floor must be in (0, 1], got {self.p1_floor}")
        if self.t <= 0.0:
            raise ValueError(f"t must be positive, got {self.t}")
        if self.i_max < 1:
            raise ValueError(f"i_max must be >= 1, got {self.i_max}")


def p1(i: int, cfg: AatConfig) -> float:
    """Probability of drawing a fully-labeled pair at step i:
    max(1 - (1 - floor) * (i / i_max)^t, floor). Non-increasing in i,
    equal to 1 at step 0, held at the floor from i_max onward."""
    if i < 0:
        raise ValueError(f"step must be >= 0, got {i}")
    frac = min(i / cfg.i_max, 1.0)
    return max(1.0 - (1.0 - cfg.p1_floor) * frac ** cfg.t, cfg.p1_floor)


def case_probabilities(i: int, cfg: AatConfig):
    """(p1, p2, p3) at step i; the two unlabeled-involving modes split the
    remaining mass equally, so the triple sums to 1 exactly."""
    q1 = p1(i, cfg)
    rest = (1.0 - q1) / 2.0
    return q1, rest, rest


@dataclass
class TrainingCase:
    """A drawn training mode with its frame pair. For the half-labeled mode
    the labeled frame is always the first (m) slot."""
    kind: int
    video_id: str
    frame_m: int
    frame_n: int


@dataclass
class PairPools:
    """Per-mode lists of (video_id, frame_m, frame_n), each drawn down
    without replacement and reshuffled once exhausted."""
    pools: dict = field(default_factory=dict)
    _order: dict = field(default_factory=dict)
    _pos: dict = field(default_factory=dict)

    def pool(self, kind: int) -> list:
        return self.pools.get(kind, [])

    def next_pair(self, kind: int, rng) -> tuple:
        entries = self.pools.get(kind)
        if not entries:
            raise DataError(f"no pairs available for training case {kind}")
        order = self._order.get(kind)
        pos = self._pos.get(kind, 0)
        if order is None or pos >= len(order):
            order = rng.permutation(len(entries))
            self._order[kind] = order
            pos = 0
        self._pos[kind] = pos + 1
        return entries[order[pos]]


def sample_case(i: int, rng, pools: PairPools, cfg: AatConfig) -> TrainingCase:
    """Draw a mode according to the step-i probabilities, then the next pair
    from that mode's pool (without replacement within a pass)."""
    kind = draw_case_kind(i, rng, cfg)
    vid, a, b = pools.next_pair(kind, rng)
    return TrainingCase(kind=kind, video_id=vid, frame_m=a, frame_n=b)


def draw_case_kind(i: int, rng, cfg: AatConfig) -> int:
    q1, q2, _ = case_probabilities(i, cfg)
    u = rng.random()
    if u < q1:
        return CASE_SUPERVISED
    if u < q1 + q2:
        return CASE_UNSUPERVISED
    return CASE_SEMI


def _video_frame_sets(video, exclude) -> tuple:
    labeled, unlabeled = [], []
    for idx in range(len(video.frames)):
        if exclude and (video.id, idx) in exclude:
            continue
        (labeled if idx in video.labels else unlabeled).append(idx)
    return labeled, unlabeled


def build_pools(dataset, count_per_case: int, rng,
                cases=ALL_CASES, exclude: Optional[set] = None,
                split: str = "train") -> PairPools:
    """Sample `count_per_case` same-video pairs per requested mode,
    uniformly with replacement over the mode's eligible pair space.

    Fully-labeled pairs need a video with two labeled frames, unlabeled
    pairs two unlabeled frames, half-labeled pairs one of each; a requested
    mode with an empty pair space is an error here, not at sample time.
    `exclude` removes (video_id, frame_idx) pairs (e.g. a held-out slice)
    from eligibility.
    """
    videos = [v for v in dataset.videos if v.split == split]
    per_video = [_video_frame_sets(v, exclude) for v in videos]

    def counts(kind: int) -> np.ndarray:
        out = []
        for labeled, unlabeled in per_video:
            nl, nu = len(labeled), len(unlabeled)
            if kind == CASE_SUPERVISED:
                out.append(nl * (nl - 1))
            elif kind == CASE_UNSUPERVISED:
                out.append(nu * (nu - 1))
            else:
                out.append(nl * nu)
        return np.asarray(out, dtype=np.float64)

    pools = PairPools()
    for kind in cases:
        weights = counts(kind)
        total = weights.sum()
        if total <= 0:
            raise DataError(
                f"cannot build pairs for training case {kind}: no eligible "
                f"same-video frame pair exists in split '{split}'")
        probs = weights / total
        entries = []
        for _ in range(count_per_case):
            vi = int(rng.choice(len(videos), p=probs))
            labeled, unlabeled = per_video[vi]
            if kind == CASE_SUPERVISED:
                a = labeled[int(rng.integers(len(labeled)))]
                rest = [f for f in labeled if f != a]
                b = rest[int(rng.integers(len(rest)))]
            elif kind == CASE_UNSUPERVISED:
                a = unlabeled[int(rng.integers(len(unlabeled)))]
                rest = [f for f in unlabeled if f != a]
                b = rest[int(rng.integers(len(rest)))]
            else:
                a = labeled[int(rng.integers(len(labeled)))]
                b = unlabeled[int(rng.integers(len(unlabeled)))]
            entries.append((videos[vi].id, a, b))
        pools.pools[kind] = entries
    return pools
