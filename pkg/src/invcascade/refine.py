"""Stage-3 box refinement on an edge map.

The edge map here is a channel-gradient magnitude of the fine feature layer,
and the box score is a perimeter-band surrogate of the EdgeBoxes score:
edge mass inside a thin internal band divided by ``(2 (w + h)) ** gamma``.
Externally computed edge maps can be wrapped with :class:`EdgeMap` directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featmap import FeatureMap, build_integral
from .geometry import Box, as_boxes


@dataclass(frozen=True, eq=False)
class EdgeMap:
    values: np.ndarray
    scale_factor: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 3 and v.shape[0] == 1:
            v = v[0]
        if v.ndim != 2:
            raise ValueError(f"edge map must be (H, W), got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("edge values must be finite and non-negative")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_table", build_integral(v[None]).table[0])

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def table(self) -> np.ndarray:
        return self._table

    @classmethod
    def from_feature_map(cls, fm: FeatureMap) -> "EdgeMap":
        """Wrap an ingested single-channel edge tensor."""
        if fm.channels != 1:
            raise ValueError("an edge map tensor must have exactly one channel")
        return cls(np.clip(fm.data[0], 0, None), fm.scale_factor)


@dataclass(frozen=True)
class RefineConfig:
    band_width: int = 1
    gamma: float = 1.5
    step_fraction: float = 1 / 8
    shrink: float = 0.5
    min_step: float = 2.0
    max_iter: int = 200

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if self.band_width < 1:
            raise ValueError("band_width must be >= 1")
        if not 0 < self.step_fraction < 1:
            raise ValueError("step_fraction must lie in (0, 1)")


def edge_from_features(fm: FeatureMap) -> EdgeMap:
    """Gradient-magnitude edge map of a feature map, max-normalized to [0, 1].

    Gradients are central differences in the interior and one-sided
    differences on the border; the magnitude is the l2 norm over channels
    of both spatial derivatives.
    """
    if fm.height < 3 or fm.width < 3:
        raise ValueError("edge extraction needs a map of at least 3x3 cells")
    data = fm.data.astype(np.float64)
    gy, gx = np.gradient(data, axis=(1, 2))
    mag = np.sqrt((gx ** 2 + gy ** 2).sum(axis=0))
    top = mag.max()
    if top > 0:
        mag = mag / top
    return EdgeMap(mag, fm.scale_factor)


def _rect(table, x0, y0, x1, y1):
    return table[y1, x1] - table[y0, x1] - table[y1, x0] + table[y0, x0]


def edge_scores(em: EdgeMap, boxes, cfg: RefineConfig = RefineConfig()) -> np.ndarray:
    """Batched :func:`edge_score` for integer cell boxes."""
    arr = np.rint(as_boxes(boxes)).astype(np.int64)
    x0, y0, x1, y1 = arr.T
    w, h = x1 - x0, y1 - y0
    bw = cfg.band_width
    if np.any(w < 2 * bw) or np.any(h < 2 * bw):
        raise ValueError(f"box thinner than twice the band width ({bw})")
    if np.any(x0 < 0) or np.any(y0 < 0) or np.any(x1 > em.width) or np.any(y1 > em.height):
        raise ValueError("box outside the edge map")
    t = em.table
    outer = _rect(t, x0, y0, x1, y1)
    inner = _rect(t, x0 + bw, y0 + bw, x1 - bw, y1 - bw)
    return (outer - inner) / (2.0 * (w + h)) ** cfg.gamma


def edge_score(em: EdgeMap, b: Box, cfg: RefineConfig = RefineConfig()) -> float:
    return float(edge_scores(em, b, cfg)[0])


def _moves(boxes: np.ndarray, frac: np.ndarray) -> np.ndarray:
    """Eight candidate moves per box: four shifts, two scalings, two aspect changes."""
    x0, y0, x1, y1 = boxes.T
    w, h = x1 - x0, y1 - y0
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    dx, dy = frac * w, frac * h
    out = [
        (x0 - dx, y0, x1 - dx, y1), (x0 + dx, y0, x1 + dx, y1),
        (x0, y0 - dy, x1, y1 - dy), (x0, y0 + dy, x1, y1 + dy),
    ]
    for sw, sh in ((1 + frac, 1 + frac), (1 - frac, 1 - frac),
                   (1 + frac, 1 - frac), (1 - frac, 1 + frac)):
        nw, nh = w * sw, h * sh
        out.append((cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2))
    moves = np.stack([np.stack(m, axis=1) for m in out], axis=1)   # (N, 8, 4)
    return np.floor(moves + 0.5)


def _legal(cands: np.ndarray, em: EdgeMap, bw: int) -> np.ndarray:
    ok = (cands[..., 0] >= 0) & (cands[..., 1] >= 0)
    ok &= (cands[..., 2] <= em.width) & (cands[..., 3] <= em.height)
    ok &= (cands[..., 2] - cands[..., 0] >= 2 * bw) & (cands[..., 3] - cands[..., 1] >= 2 * bw)
    return ok


def refine_all(em: EdgeMap, boxes, cfg: RefineConfig = RefineConfig()):
    """Greedy hill climb over translations, scalings and aspect changes.

    Every round each box takes its best strictly improving move; a box
    with no improving move shrinks its step, and it stops once the step
    drops below ``cfg.min_step`` cells. Boxes are refined independently
    (batched for speed). Returns ``(boxes, scores)``; no score is below
    the input box's score. Boxes that cannot be scored are returned as
    given with score 0.
    """
    given = as_boxes(boxes)
    out = given.copy()
    cur = np.zeros(len(given))
    if not len(given):
        return out, cur
    box = np.rint(given)
    ok = _legal(box, em, cfg.band_width)
    cur[ok] = edge_scores(em, box[ok], cfg)
    out[ok] = box[ok]
    frac = np.full(len(given), cfg.step_fraction)
    active = ok.copy()
    for _ in range(cfg.max_iter):
        side = np.maximum(out[:, 2] - out[:, 0], out[:, 3] - out[:, 1])
        active &= frac * side >= cfg.min_step
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        cands = _moves(out[idx], frac[idx])
        legal = _legal(cands, em, cfg.band_width)
        legal &= np.any(cands != out[idx][:, None, :], axis=2)
        scores = np.full(legal.shape, -np.inf)
        scores[legal] = edge_scores(em, cands[legal], cfg)
        j = np.argmax(scores, axis=1)
        best = scores[np.arange(len(idx)), j]
        better = best > cur[idx]
        up = idx[better]
        out[up] = cands[better, j[better]]
        cur[up] = best[better]
        frac[idx[~better]] *= cfg.shrink
    return out, cur


def refine_box(em: EdgeMap, b, cfg: RefineConfig = RefineConfig()) -> tuple[Box, float]:
    """Refine a single box; see :func:`refine_all`."""
    out, scores = refine_all(em, b, cfg)
    return Box.from_array(out[0]), float(scores[0])
