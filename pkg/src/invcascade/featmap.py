"""Feature-map tensors, summed-area tables and constant-time average pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box, as_boxes


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """A ``(C, H, W)`` tensor tagged with its scale and source layer.

    ``scale_factor`` is feature cells per original-image pixel, so dividing
    cell coordinates by it yields image coordinates.
    """

    data: np.ndarray
    scale_factor: float = 1.0
    layer_tag: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"feature map must be (C, H, W), got shape {data.shape}")
        if data.shape[1] < 1 or data.shape[2] < 1:
            raise ValueError("feature map height and width must be positive")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite values")
        if not self.scale_factor > 0:
            raise ValueError("scale_factor must be positive")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class IntegralImage:
    """Per-channel summed-area table with a zero first row and column.

    ``table[c, y, x]`` is the sum of channel ``c`` over ``[0, x) x [0, y)``.
    """

    table: np.ndarray
    scale_factor: float = 1.0
    layer_tag: str = ""

    @property
    def channels(self) -> int:
        return self.table.shape[0]

    @property
    def height(self) -> int:
        return self.table.shape[1] - 1

    @property
    def width(self) -> int:
        return self.table.shape[2] - 1


@dataclass(frozen=True)
class PyramidSpec:
    """Grid sizes of a spatial pyramid, e.g. ``(1, 2)`` for 1x1 + 2x2."""

    levels: tuple[int, ...] = (1,)

    def __post_init__(self):
        levels = tuple(int(g) for g in self.levels)
        if not levels or any(g < 1 for g in levels):
            raise ValueError("pyramid levels must be a non-empty list of grid sizes >= 1")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def from_sp_level(cls, sp_level: int) -> "PyramidSpec":
        """sp_level 0 -> 1x1, 1 -> 1x1+2x2, 2 -> 1x1+2x2+4x4."""
        return cls(tuple(2 ** i for i in range(sp_level + 1)))

    @property
    def n_cells(self) -> int:
        return sum(g * g for g in self.levels)

    def descriptor_length(self, channels: int) -> int:
        return channels * self.n_cells


def build_integral(fm: FeatureMap | np.ndarray) -> IntegralImage:
    """Summed-area table in double precision."""
    if isinstance(fm, FeatureMap):
        data, scale, tag = fm.data, fm.scale_factor, fm.layer_tag
    else:
        data, scale, tag = np.asarray(fm), 1.0, ""
        if data.ndim == 2:
            data = data[None]
    if not np.all(np.isfinite(data)):
        raise ValueError("cannot integrate non-finite values")
    c, h, w = data.shape
    table = np.zeros((c, h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(data, axis=1, dtype=np.float64), axis=2, out=table[:, 1:, 1:])
    table.setflags(write=False)
    return IntegralImage(table, scale, tag)


def _cell_boxes(ii: IntegralImage, boxes) -> np.ndarray:
    arr = as_boxes(boxes)
    cells = np.rint(arr)
    if not np.allclose(cells, arr, atol=1e-9):
        raise ValueError("pooling boxes must be aligned to feature cells")
    cells = cells.astype(np.int64)
    x0, y0, x1, y1 = cells.T
    if np.any(x1 <= x0) or np.any(y1 <= y0):
        raise ValueError("cannot pool a zero-area box")
    if np.any(x0 < 0) or np.any(y0 < 0) or np.any(x1 > ii.width) or np.any(y1 > ii.height):
        raise ValueError("pooling box outside the feature map")
    return cells


def _rect_sums(table: np.ndarray, x0, y0, x1, y1) -> np.ndarray:
    # four lookups per channel; result (C, N)
    return table[:, y1, x1] - table[:, y0, x1] - table[:, y1, x0] + table[:, y0, x0]


def avg_pool(ii: IntegralImage, b: Box) -> np.ndarray:
    """Mean of every channel over box ``b``; shape ``(C,)``."""
    x0, y0, x1, y1 = (int(v) for v in _cell_boxes(ii, b)[0])
    t = ii.table
    total = t[:, y1, x1] - t[:, y0, x1] - t[:, y1, x0] + t[:, y0, x0]
    return total / ((x1 - x0) * (y1 - y0))


def avg_pool_many(ii: IntegralImage, boxes) -> np.ndarray:
    """Batched :func:`avg_pool`; returns ``(N, C)``."""
    cells = _cell_boxes(ii, boxes)
    x0, y0, x1, y1 = cells.T
    area = (x1 - x0) * (y1 - y0)
    return (_rect_sums(ii.table, x0, y0, x1, y1) / area).T


def _split(lo: np.ndarray, hi: np.ndarray, g: int) -> list[np.ndarray]:
    # split points lo + round(i * w / g), rounding halves up
    w = hi - lo
    return [lo + np.floor(i * w / g + 0.5).astype(np.int64) for i in range(g + 1)]


def pyramid_boxes(boxes, spec: PyramidSpec, *, strict: bool = True) -> np.ndarray:
    """Sub-window corners for every pyramid cell: ``(N, n_cells, 4)``.

    Cells are ordered level by level, row-major within a level. With
    ``strict`` a sub-window that would be empty raises; otherwise it is
    widened to one cell inside the parent box.
    """
    arr = np.rint(as_boxes(boxes)).astype(np.int64)
    x0, y0, x1, y1 = arr.T
    out = []
    for g in spec.levels:
        xs = _split(x0, x1, g)
        ys = _split(y0, y1, g)
        for r in range(g):
            for c in range(g):
                sub = np.stack([xs[c], ys[r], xs[c + 1], ys[r + 1]], axis=1)
                empty = (sub[:, 2] <= sub[:, 0]) | (sub[:, 3] <= sub[:, 1])
                if np.any(empty):
                    if strict:
                        raise ValueError(
                            f"box too small to split at pyramid level {g}x{g}")
                    sub = sub.copy()
                    sub[:, 0] = np.minimum(sub[:, 0], x1 - 1)
                    sub[:, 2] = np.maximum(sub[:, 2], sub[:, 0] + 1)
                    sub[:, 1] = np.minimum(sub[:, 1], y1 - 1)
                    sub[:, 3] = np.maximum(sub[:, 3], sub[:, 1] + 1)
                out.append(sub)
    return np.stack(out, axis=1)


def pyramid_pool(ii: IntegralImage, b: Box, spec: PyramidSpec) -> np.ndarray:
    """Concatenated average pools over each pyramid cell; length ``C * n_cells``."""
    return pyramid_pool_many(ii, b, spec)[0]


def pyramid_pool_many(ii: IntegralImage, boxes, spec: PyramidSpec, *,
                      strict: bool = True) -> np.ndarray:
    """Batched :func:`pyramid_pool`; returns ``(N, n_cells * C)``."""
    _cell_boxes(ii, boxes)
    subs = pyramid_boxes(boxes, spec, strict=strict)
    n, k, _ = subs.shape
    if spec.levels == (1,):
        return avg_pool_many(ii, subs[:, 0])
    flat = subs.reshape(n * k, 4)
    pooled = avg_pool_many(ii, flat)
    return pooled.reshape(n, k * ii.channels)


def concat_maps(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    """Channel-wise concatenation (``a`` first) for early fusion."""
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(
            f"spatial shape mismatch: {(a.height, a.width)} vs {(b.height, b.width)}")
    if not np.isclose(a.scale_factor, b.scale_factor, rtol=1e-12, atol=0):
        raise ValueError("scale factors differ; maps are not aligned")
    dtype = np.result_type(a.data.dtype, b.data.dtype)
    data = np.concatenate([a.data.astype(dtype), b.data.astype(dtype)], axis=0)
    return FeatureMap(data, a.scale_factor, a.layer_tag)


def transfer_boxes(boxes, src_hw: tuple[int, int], dst_hw: tuple[int, int],
                   *, snap: bool = True) -> np.ndarray:
    """Move cell boxes between maps of one scale using their (H, W) ratio.

    Snapped boxes are rounded outward-consistently to cells and kept at
    least one cell wide; ``snap=False`` keeps fractional coordinates.
    """
    arr = as_boxes(boxes)
    ry = dst_hw[0] / src_hw[0]
    rx = dst_hw[1] / src_hw[1]
    out = arr * np.array([rx, ry, rx, ry])
    if not snap:
        return out
    out = np.floor(out + 0.5)
    out[:, 2] = np.maximum(out[:, 2], out[:, 0] + 1)
    out[:, 3] = np.maximum(out[:, 3], out[:, 1] + 1)
    return out
