"""Boxes, IoU, coordinate scaling and non-maximum suppression.

Boxes are half-open ``[x0, x1) x [y0, y1)`` in real coordinates. Batched
helpers take ``(N, 4)`` arrays in the same ``(x0, y0, x1, y1)`` layout.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box":
        x0, y0, x1, y1 = (float(v) for v in a)
        return cls(x0, y0, x1, y1)


@dataclass(frozen=True)
class NmsConfig:
    """Suppression threshold ``alpha`` tuned for an evaluation IoU ``beta``."""

    beta: float = 0.5
    alpha: float | None = None

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if self.alpha is not None and not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")

    @property
    def within_scale(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return min(1.0, self.beta + 0.05)

    @property
    def across_scales(self) -> float:
        return self.beta


def as_boxes(boxes) -> np.ndarray:
    """Coerce a Box, a sequence of Box, or an array-like to an ``(N, 4)`` float array."""
    if isinstance(boxes, Box):
        return boxes.as_array()[None, :]
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64, copy=False)
    else:
        boxes = list(boxes)
        if boxes and isinstance(boxes[0], Box):
            arr = np.array([b.as_array() for b in boxes], dtype=np.float64)
        else:
            arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected (N, 4) boxes, got shape {arr.shape}")
    return arr


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = as_boxes(boxes)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` boxes, shape ``(N, M)``."""
    a = as_boxes(a)
    b = as_boxes(b)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return inter / union


def score_order(scores) -> np.ndarray:
    """Indices by descending score; equal scores keep insertion order."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def nms(boxes, scores, alpha: float, max_keep: int | None = None,
        chunk: int = 256) -> list[int]:
    """Greedy non-maximum suppression.

    A box is dropped when its IoU with an already kept (higher scored) box
    exceeds ``alpha``. Returns kept indices sorted by descending score.
    ``max_keep`` stops the sweep early, which equals truncating the full
    result because the sweep runs in score order.

    Candidates are visited in chunks: each chunk is first tested against
    all kept boxes at once, and only its survivors are resolved one by one.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores differ in length")
    order = score_order(scores)
    limit = len(order) if max_keep is None else max_keep
    keep: list[int] = []
    kept_boxes = np.zeros((0, 4))
    for start in range(0, len(order), chunk):
        if len(keep) >= limit:
            break
        idx = order[start:start + chunk]
        cand = boxes[idx]
        if len(kept_boxes):
            alive = iou_matrix(cand, kept_boxes).max(axis=1) <= alpha
            idx, cand = idx[alive], cand[alive]
        if not len(idx):
            continue
        within = iou_matrix(cand, cand) > alpha
        dead = np.zeros(len(idx), dtype=bool)
        taken = []
        for i in range(len(idx)):
            if dead[i]:
                continue
            taken.append(i)
            if len(keep) + len(taken) >= limit:
                break
            dead |= within[i]
        keep.extend(int(j) for j in idx[taken])
        kept_boxes = np.vstack([kept_boxes, cand[taken]])
    return keep[:limit]


def map_to_image(b, scale_factor: float):
    """Feature-map cells to original-image pixels (divide by ``scale_factor``)."""
    if scale_factor <= 0:
        raise ValueError("scale_factor must be positive")
    if isinstance(b, Box):
        return Box(b.x0 / scale_factor, b.y0 / scale_factor,
                   b.x1 / scale_factor, b.y1 / scale_factor)
    return as_boxes(b) / scale_factor


def map_from_image(b, scale_factor: float):
    """Inverse of :func:`map_to_image`."""
    if scale_factor <= 0:
        raise ValueError("scale_factor must be positive")
    if isinstance(b, Box):
        return Box(b.x0 * scale_factor, b.y0 * scale_factor,
                   b.x1 * scale_factor, b.y1 * scale_factor)
    return as_boxes(b) * scale_factor
