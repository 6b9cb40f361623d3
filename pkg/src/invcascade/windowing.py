"""Window-shape bank selection and dense sliding-window grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .featmap import IntegralImage, PyramidSpec, pyramid_pool_many
from .geometry import Box, as_boxes

DEFAULT_ALPHA_GRID = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))
DEFAULT_SCALES = (227, 300, 400, 600)


@dataclass(frozen=True, order=True)
class WindowShape:
    w: int
    h: int

    def __post_init__(self):
        if int(self.w) != self.w or int(self.h) != self.h or self.w < 1 or self.h < 1:
            raise ValueError(f"window shape must be positive integers, got {self.w}x{self.h}")


@dataclass(frozen=True)
class ShapeBank:
    shapes: tuple[WindowShape, ...]
    pool_bound: int = 20
    count: int = 50

    def __post_init__(self):
        shapes = tuple(s if isinstance(s, WindowShape) else WindowShape(*s) for s in self.shapes)
        if len(set(shapes)) != len(shapes):
            raise ValueError("duplicate shapes in bank")
        if len(shapes) > self.count:
            raise ValueError("bank holds more shapes than its count")
        for s in shapes:
            if s.w > self.pool_bound or s.h > self.pool_bound:
                raise ValueError(f"shape {s} exceeds pool bound {self.pool_bound}")
        object.__setattr__(self, "shapes", shapes)

    def __len__(self):
        return len(self.shapes)

    def __iter__(self):
        return iter(self.shapes)

    def as_array(self) -> np.ndarray:
        return np.array([(s.w, s.h) for s in self.shapes], dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True)
class ScaleSet:
    """Target short sides; an image is resized so that ``min(w, h) == s``."""

    sides: tuple[int, ...] = DEFAULT_SCALES

    def __post_init__(self):
        sides = tuple(int(s) for s in self.sides)
        if not sides or any(s <= 0 for s in sides):
            raise ValueError("scales must be positive")
        if any(b <= a for a, b in zip(sides, sides[1:])):
            raise ValueError("scales must be strictly increasing")
        object.__setattr__(self, "sides", sides)

    def factors(self, image_w: int, image_h: int, cell_size: float) -> list[float]:
        """Feature cells per original pixel at every scale."""
        short = min(image_w, image_h)
        return [s / short / cell_size for s in self.sides]


def shape_pool(pool_bound: int) -> np.ndarray:
    """All ``(w, h)`` in ``[1..Z]^2`` ordered by area, then width."""
    w, h = np.meshgrid(np.arange(1, pool_bound + 1), np.arange(1, pool_bound + 1), indexing="ij")
    pool = np.stack([w.ravel(), h.ravel()], axis=1)
    order = np.lexsort((pool[:, 0], pool[:, 0] * pool[:, 1]))
    return pool[order]


def centered_placement(gt_boxes, shapes) -> np.ndarray:
    """Place every shape on the lattice as close to every gt center as possible.

    Returns ``(N_gt, N_shapes, 4)`` boxes whose top-left corner is the
    nearest integer to ``center - size / 2``.
    """
    gt = as_boxes(gt_boxes)
    shapes = np.asarray(shapes, dtype=np.float64).reshape(-1, 2)
    cx = (gt[:, 0] + gt[:, 2]) / 2
    cy = (gt[:, 1] + gt[:, 3]) / 2
    x0 = np.floor(cx[:, None] - shapes[None, :, 0] / 2 + 0.5)
    y0 = np.floor(cy[:, None] - shapes[None, :, 1] / 2 + 0.5)
    return np.stack([x0, y0, x0 + shapes[None, :, 0], y0 + shapes[None, :, 1]], axis=2)


def placement_iou(gt_boxes, shapes) -> np.ndarray:
    """IoU of each gt box with each shape placed at its center; ``(N_gt, N_shapes)``."""
    gt = as_boxes(gt_boxes)
    placed = centered_placement(gt, shapes)
    iw = np.minimum(gt[:, None, 2], placed[..., 2]) - np.maximum(gt[:, None, 0], placed[..., 0])
    ih = np.minimum(gt[:, None, 3], placed[..., 3]) - np.maximum(gt[:, None, 1], placed[..., 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    gt_area = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    sh = np.asarray(shapes, dtype=np.float64).reshape(-1, 2)
    union = gt_area[:, None] + (sh[:, 0] * sh[:, 1])[None, :] - inter
    return inter / union


def _recall_sum(best: np.ndarray, alpha_grid: np.ndarray) -> np.ndarray:
    # best: (..., N_gt) -> summed recall over alpha, shape (...); counted in
    # integers first so that equal objectives compare equal
    hits = (best[..., None] > alpha_grid).sum(axis=(-2, -1))
    return hits / best.shape[-1]


def select_shapes(gt_boxes, pool_bound: int = 20, k: int = 50,
                  alpha_grid=DEFAULT_ALPHA_GRID) -> ShapeBank:
    """Greedy forward selection of window shapes maximizing summed recall.

    At each step the pool shape with the largest objective
    ``sum_alpha recall(IoU > alpha)`` given the shapes chosen so far is
    added. Ties go to the smaller area, then the smaller width. Stops at
    ``k`` shapes or when no shape adds recall.
    """
    bank, _ = _greedy_select(gt_boxes, pool_bound, k, alpha_grid)
    return bank


def _greedy_select(gt_boxes, pool_bound, k, alpha_grid):
    gt = as_boxes(gt_boxes)
    if len(gt) == 0:
        raise ValueError("shape selection needs at least one annotation")
    if k < 1:
        raise ValueError("k must be at least 1")
    alphas = np.asarray(alpha_grid, dtype=np.float64)
    pool = shape_pool(pool_bound)
    ious = placement_iou(gt, pool)                       # (N_gt, P)
    best = np.zeros(len(gt))
    current = 0.0
    chosen: list[tuple[int, int]] = []
    history: list[float] = []
    available = np.ones(len(pool), dtype=bool)
    for _ in range(k):
        cand = np.maximum(best[:, None], ious).T          # (P, N_gt)
        obj = _recall_sum(cand, alphas)
        obj[~available] = -np.inf
        j = int(np.argmax(obj))                           # first max = tie-break order
        if not obj[j] > current + 1e-12:
            break
        chosen.append((int(pool[j, 0]), int(pool[j, 1])))
        available[j] = False
        best = cand[j]
        current = float(obj[j])
        history.append(current)
    return ShapeBank(tuple(chosen), pool_bound=pool_bound, count=k), history


def bank_recall(gt_boxes, bank: ShapeBank, alpha: float) -> float:
    """Best achievable recall at ``IoU > alpha`` with the bank's shapes (centered)."""
    if len(bank) == 0:
        return 0.0
    best = placement_iou(gt_boxes, bank.as_array()).max(axis=1)
    return float(np.mean(best > alpha))


def grid_positions(map_h: int, map_w: int, shape: WindowShape, stride: int = 1) -> np.ndarray:
    """All placements of ``shape`` on the stride lattice inside the map, row-major."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if shape.w > map_w or shape.h > map_h:
        return np.zeros((0, 4))
    ys = np.arange(0, map_h - shape.h + 1, stride)
    xs = np.arange(0, map_w - shape.w + 1, stride)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    x0 = xx.ravel().astype(np.float64)
    y0 = yy.ravel().astype(np.float64)
    return np.stack([x0, y0, x0 + shape.w, y0 + shape.h], axis=1)


def sliding_windows(map_h: int, map_w: int, bank: ShapeBank,
                    stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Grid boxes of every bank shape, in bank order; returns (boxes, shape index)."""
    boxes, index = [], []
    for i, shape in enumerate(bank):
        g = grid_positions(map_h, map_w, shape, stride)
        boxes.append(g)
        index.append(np.full(len(g), i, dtype=np.int64))
    if not boxes:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    return np.concatenate(boxes), np.concatenate(index)


def _l2_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    out = np.zeros_like(x)
    np.divide(x, norm, out=out, where=norm > 0)
    return out


def size_features(boxes, scale_factor: float, image_dims: tuple[int, int]) -> np.ndarray:
    """``(w, h, w*h)`` of boxes in image space, as fractions of the image size."""
    arr = as_boxes(boxes)
    img_w, img_h = image_dims
    w = (arr[:, 2] - arr[:, 0]) / scale_factor / img_w
    h = (arr[:, 3] - arr[:, 1]) / scale_factor / img_h
    return np.stack([w, h, w * h], axis=1)


def assemble_descriptors(ii: IntegralImage, boxes, spec: PyramidSpec,
                         image_dims: tuple[int, int], *, size_bias: bool = True,
                         strict: bool = True) -> np.ndarray:
    """Batched window descriptors: l2-normalized pyramid block, then l2-normalized size block."""
    pooled = _l2_rows(pyramid_pool_many(ii, boxes, spec, strict=strict))
    if not size_bias:
        return pooled
    sizes = _l2_rows(size_features(boxes, ii.scale_factor, image_dims))
    return np.hstack([pooled, sizes])


def assemble_descriptor(ii: IntegralImage, b: Box, spec: PyramidSpec,
                        image_dims: tuple[int, int]) -> np.ndarray:
    return assemble_descriptors(ii, b, spec, image_dims)[0]


class WindowShapeSelector(BaseEstimator):
    """Learn a bank of sliding-window shapes from annotated boxes.

    Parameters
    ----------
    n_shapes : int
        Maximum number of shapes to keep.
    pool_bound : int
        Shapes are drawn from ``[1..pool_bound]^2`` (in feature cells).
    alpha_grid : sequence of float, optional
        IoU levels whose recall is summed by the greedy objective.

    Attributes
    ----------
    bank_ : ShapeBank
    objective_ : list of float
        Objective value after each greedy step.
    """

    def __init__(self, n_shapes=50, pool_bound=20, alpha_grid=None):
        self.n_shapes = n_shapes
        self.pool_bound = pool_bound
        self.alpha_grid = alpha_grid

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 4:
            raise ValueError("X must hold (x0, y0, x1, y1) boxes in feature cells")
        alphas = DEFAULT_ALPHA_GRID if self.alpha_grid is None else self.alpha_grid
        self.bank_, self.objective_ = _greedy_select(X, self.pool_bound, self.n_shapes, alphas)
        return self

    def recall(self, X, alpha=0.5):
        check_is_fitted(self, "bank_")
        return bank_recall(check_array(X, dtype=np.float64), self.bank_, alpha)
