"""Linking per-frame proposals into action tubes with Viterbi decoding."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
from sklearn.base import BaseEstimator

from .geometry import Box, as_boxes, iou, iou_matrix

NEG_INF = -math.inf


@dataclass
class FrameProposals:
    t: int
    boxes: np.ndarray                       # (N, 4)
    confidences: np.ndarray                 # (N,)

    def __post_init__(self):
        self.boxes = as_boxes(self.boxes)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).ravel()
        if len(self.boxes) != len(self.confidences):
            raise ValueError("boxes and confidences differ in length")
        if not np.all(np.isfinite(self.confidences)):
            raise ValueError("confidences must be finite")

    def __len__(self):
        return len(self.boxes)

    @classmethod
    def from_pairs(cls, t: int, entries) -> "FrameProposals":
        entries = list(entries)
        return cls(t, [b for b, _ in entries], [c for _, c in entries])


@dataclass
class Tube:
    boxes: np.ndarray                       # (T, 4), one box per frame
    path_score: float
    frames: list[int] = field(default_factory=list)
    indices: list[int] = field(default_factory=list)   # chosen proposal per frame

    def __len__(self):
        return len(self.boxes)


@dataclass
class GroundTruthTube:
    """Per-frame optional boxes; ``None`` marks frames without the action."""

    boxes: list[Box | None]

    def __post_init__(self):
        self.boxes = [None if b is None else (b if isinstance(b, Box) else Box.from_array(b))
                      for b in self.boxes]
        if not any(b is not None for b in self.boxes):
            raise ValueError("ground-truth tube has no annotated frame")

    def __len__(self):
        return len(self.boxes)


def link_score(b1: Box, c1: float, b2: Box, c2: float, gate: float = 0.5) -> float:
    """``c1 + c2 + IoU`` when the boxes overlap by more than ``gate``, else ``-inf``."""
    o = iou(b1, b2)
    if o <= gate:
        return NEG_INF
    return c1 + c2 + o


def _transition(prev: FrameProposals, cur: FrameProposals, gate: float) -> np.ndarray:
    ov = iou_matrix(prev.boxes, cur.boxes)
    s = prev.confidences[:, None] + cur.confidences[None, :] + ov
    s[ov <= gate] = NEG_INF
    return s


def best_path(frames: list[FrameProposals], gate: float = 0.5) -> Tube | None:
    """Highest-scoring full-length path, or ``None`` when every path is infeasible.

    The path score is the sum of link scores of consecutive boxes. A
    single frame yields its most confident box with score 0. Ties resolve
    to the lowest box index.
    """
    if not frames:
        raise ValueError("no frames to link")
    if any(len(f) == 0 for f in frames):
        return None
    if len(frames) == 1:
        j = int(np.argmax(frames[0].confidences))
        return Tube(frames[0].boxes[[j]].copy(), 0.0, [frames[0].t], [j])
    acc = np.zeros(len(frames[0]))
    back = []
    for prev, cur in zip(frames, frames[1:]):
        total = acc[:, None] + _transition(prev, cur, gate)     # (N_prev, N_cur)
        arg = np.argmax(total, axis=0)                           # first max = lowest index
        acc = total[arg, np.arange(total.shape[1])]
        back.append(arg)
    end = int(np.argmax(acc))
    score = float(acc[end])
    if score == NEG_INF:
        return None
    path = [end]
    for arg in reversed(back):
        path.append(int(arg[path[-1]]))
    path.reverse()
    boxes = np.stack([f.boxes[j] for f, j in zip(frames, path)])
    return Tube(boxes, score, [f.t for f in frames], path)


def extract_tubes(frames: list[FrameProposals], max_tubes: int, gate: float = 0.5) -> list[Tube]:
    """Repeatedly take the best path and delete its boxes.

    Stops when no feasible path is left, a frame runs out of boxes, or
    ``max_tubes`` tubes were found. ``Tube.indices`` refer to the original
    per-frame proposal order.
    """
    if max_tubes < 1:
        raise ValueError("max_tubes must be >= 1")
    alive = [np.arange(len(f)) for f in frames]
    tubes = []
    while len(tubes) < max_tubes:
        if any(len(a) == 0 for a in alive):
            break
        sub = [FrameProposals(f.t, f.boxes[a], f.confidences[a]) for f, a in zip(frames, alive)]
        tube = best_path(sub, gate)
        if tube is None:
            break
        tube.indices = [int(a[j]) for a, j in zip(alive, tube.indices)]
        tubes.append(tube)
        alive = [np.delete(a, np.flatnonzero(a == j)) for a, j in zip(alive, tube.indices)]
    return tubes


def tube_overlap(P: Tube | list, G: GroundTruthTube) -> float:
    """Mean per-frame IoU over frames where the proposal or the ground truth exists.

    Frames where only one side has a box count as zero overlap.
    """
    p_boxes = list(P.boxes) if isinstance(P, Tube) else list(P)
    p_boxes = [None if b is None else (b if isinstance(b, Box) else Box.from_array(b))
               for b in p_boxes]
    if len(p_boxes) != len(G.boxes):
        raise ValueError("proposal and ground-truth tubes cover different frame counts")
    total, n = 0.0, 0
    for p, g in zip(p_boxes, G.boxes):
        if p is None and g is None:
            continue
        n += 1
        if p is not None and g is not None:
            total += iou(p, g)
    if n == 0:
        raise ValueError("no frame holds a proposal or ground-truth box")
    return total / n


def top_per_frame(frames: list[FrameProposals], n: int) -> list[FrameProposals]:
    """Keep the ``n`` most confident proposals of every frame (stable order)."""
    out = []
    for f in frames:
        order = np.argsort(-f.confidences, kind="stable")[:n]
        out.append(FrameProposals(f.t, f.boxes[order], f.confidences[order]))
    return out


class TubeLinker(BaseEstimator):
    """Turn per-frame proposals into ranked action tubes.

    ``transform`` maps a list of videos (each a list of
    :class:`FrameProposals`) to a list of tube lists.
    """

    def __init__(self, per_frame=100, max_tubes=20, gate=0.5):
        self.per_frame = per_frame
        self.max_tubes = max_tubes
        self.gate = gate

    def fit(self, X=None, y=None):
        return self

    def link(self, frames: list[FrameProposals]) -> list[Tube]:
        return extract_tubes(top_per_frame(frames, self.per_frame), self.max_tubes, self.gate)

    def transform(self, X):
        return [self.link(frames) for frames in X]
