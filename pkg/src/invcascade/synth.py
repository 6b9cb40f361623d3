"""Deterministic synthetic feature maps with planted rectangular objects.

Each planted object adds its area coverage of every cell, with amplitude
1.0, to a random subset of its "identity" channels. Five further part
channels are shared by all objects: one per box quadrant and one for the
outer band of the box (a stand-in for part and boundary units of a CNN).
They give windows that cut through an object a pooled composition
different from windows that enclose it; every signal stays inside its box. The coarse layer
has one cell per ``cell_size`` resized pixels, the mid layer twice and
the fine layer four times that resolution. The fine layer carries the
object silhouettes on all channels, so its gradient traces sharp
outlines. Background is Gaussian noise of standard deviation
``noise_level``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cascade import ImageMaps
from .featmap import FeatureMap
from .geometry import as_boxes, iou_matrix
from .refine import edge_from_features

SYNTH_SIZE = (160, 120)
SYNTH_SCALES = (120, 180)
SYNTH_CELL = 8
LAYER_RATIOS = {"L5": 1, "L3": 2, "L2": 4}
RING_FRACTION = 0.2
PART_CHANNELS = 5             # four quadrants and the outer band


@dataclass
class SyntheticImage:
    maps: ImageMaps
    boxes: np.ndarray             # planted objects, image pixels


@dataclass
class SyntheticVideo:
    video_id: str
    frames: list[ImageMaps]
    tracks: np.ndarray            # (n_actors, T, 4), image pixels


def coverage(box, map_h: int, map_w: int, factor: float) -> np.ndarray:
    """Fraction of every cell covered by ``box`` (pixels) on a map with ``factor`` cells/pixel."""
    x0, y0, x1, y1 = as_boxes(box)[0] * factor

    def overlap(lo, hi, n):
        edges = np.arange(n, dtype=np.float64)
        return np.clip(np.minimum(edges + 1, hi) - np.maximum(edges, lo), 0, None)

    return np.outer(overlap(y0, y1, map_h), overlap(x0, x1, map_w))


def _inner(box, frac):
    x0, y0, x1, y1 = box
    dx, dy = (x1 - x0) * frac, (y1 - y0) * frac
    return [x0 + dx, y0 + dy, x1 - dx, y1 - dy]


def _quadrants(box):
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    return [[x0, y0, cx, cy], [cx, y0, x1, cy], [x0, cy, cx, y1], [cx, cy, x1, y1]]


def _render(boxes, subsets, n_channels, map_h, map_w, factor, noise, rng, dtype=np.float32,
            parts=True):
    """Coverage maps; with ``parts`` the first PART_CHANNELS channels hold part responses."""
    offset = PART_CHANNELS if parts else 0
    data = np.zeros((offset + n_channels, map_h, map_w), dtype=np.float64)
    for box, chans in zip(boxes, subsets):
        cov = coverage(box, map_h, map_w, factor)
        data[offset + np.asarray(chans, dtype=np.int64)] += cov
        if parts:
            for q, quad in enumerate(_quadrants(box)):
                data[q] += coverage(quad, map_h, map_w, factor)
            data[4] += cov - coverage(_inner(box, RING_FRACTION), map_h, map_w, factor)
    if noise > 0:
        data += rng.normal(0.0, noise, size=data.shape)
    return data.astype(dtype)


def _scale_geometry(width, height, sides, cell_size):
    short = min(width, height)
    out = []
    for s in sides:
        f = s / short / cell_size
        out.append((f, int(np.floor(height * f)), int(np.floor(width * f))))
    return out


def render_maps(image_id: str, boxes, width: int, height: int, rng: np.random.Generator, *,
                channels: int = 8, noise_level: float = 0.1, scales=SYNTH_SCALES,
                cell_size: float = SYNTH_CELL, subsets=None, with_edges: bool = True,
                motion: np.ndarray | None = None) -> ImageMaps:
    """Feature maps of one image at every scale for layers L5, L3 and L2.

    ``motion`` (per-box speeds) adds flow layers F5 and F3 whose channels
    respond inside moving boxes with amplitude 1.0.
    """
    boxes = as_boxes(boxes)
    if subsets is None:
        subsets = [rng.choice(channels, size=channels // 2, replace=False) for _ in boxes]
    layers: dict[str, list[FeatureMap]] = {tag: [] for tag in LAYER_RATIOS}
    if motion is not None:
        layers.update({"F5": [], "F3": []})
    edges = []
    all_channels = np.arange(channels)
    for f, h, w in _scale_geometry(width, height, scales, cell_size):
        for tag, r in LAYER_RATIOS.items():
            if tag == "L2":
                data = _render(boxes, [all_channels] * len(boxes), channels, h * r, w * r,
                               f * r, noise_level, rng, parts=False)
            else:
                data = _render(boxes, subsets, channels, h * r, w * r, f * r, noise_level, rng)
            layers[tag].append(FeatureMap(data, f * r, tag))
        if motion is not None:
            moving = [b for b, v in zip(boxes, motion) if v > 0]
            for tag, r in (("F5", 1), ("F3", 2)):
                data = _render(moving, [np.arange(2)] * len(moving), 2, h * r, w * r, f * r,
                               noise_level, rng, parts=False)
                layers[tag].append(FeatureMap(data, f * r, tag))
        if with_edges:
            edges.append(edge_from_features(layers["L2"][-1]))
    return ImageMaps(image_id, width, height, layers, edges if with_edges else None)


def _random_box(rng, width, height, min_side, max_side):
    w = int(rng.integers(min_side, max_side + 1))
    h = int(rng.integers(min_side, max_side + 1))
    x0 = int(rng.integers(0, width - w + 1))
    y0 = int(rng.integers(0, height - h + 1))
    return [x0, y0, x0 + w, y0 + h]


def synth_generate(seed: int, n_images: int, objects_per_image: int | tuple[int, int] = (1, 3),
                   noise_level: float = 0.1, *, size=SYNTH_SIZE, channels: int = 8,
                   min_side: int = 24, max_side: int = 80, scales=SYNTH_SCALES,
                   cell_size: float = SYNTH_CELL) -> list[SyntheticImage]:
    """Planted-object images; identical output for identical arguments.

    Objects of one image overlap each other by at most IoU 0.3 so that
    every planted box remains a distinct target.
    """
    rng = np.random.default_rng(seed)
    lo, hi = ((objects_per_image, objects_per_image) if isinstance(objects_per_image, int)
              else objects_per_image)
    width, height = size
    out = []
    for i in range(n_images):
        n_obj = int(rng.integers(lo, hi + 1))
        boxes: list[list[int]] = []
        for _ in range(200):
            if len(boxes) == n_obj:
                break
            cand = _random_box(rng, width, height, min_side, max_side)
            if not boxes or _max_iou(cand, boxes) <= 0.3:
                boxes.append(cand)
        maps = render_maps(f"img{i:04d}", boxes, width, height, rng, channels=channels,
                           noise_level=noise_level, scales=scales, cell_size=cell_size)
        out.append(SyntheticImage(maps, as_boxes(boxes) if boxes else np.zeros((0, 4))))
    return out


def _max_iou(box, others) -> float:
    return float(iou_matrix([box], others).max())


def synth_videos(seed: int, n_videos: int, n_frames: int = 20, actors: int = 2,
                 noise_level: float = 0.1, *, size=SYNTH_SIZE, channels: int = 8,
                 min_side: int = 36, max_side: int = 64, scales=SYNTH_SCALES,
                 cell_size: float = SYNTH_CELL, max_speed: float = 1.5) -> list[SyntheticVideo]:
    """Videos of actors drifting at constant velocity (whole pixels per frame).

    Actors keep their channel subsets over time; flow layers respond to
    every moving actor.
    """
    rng = np.random.default_rng(seed)
    width, height = size
    out = []
    for v in range(n_videos):
        starts, vels = [], []
        for _ in range(200):
            if len(starts) == actors:
                break
            box = _random_box(rng, width, height, min_side, max_side)
            vel = rng.integers(-int(max_speed), int(max_speed) + 1, size=2)
            track = _track(box, vel, n_frames, width, height)
            if all(_track_separation(track, _track(b, u, n_frames, width, height)) <= 0.3
                   for b, u in zip(starts, vels)):
                starts.append(box)
                vels.append(vel)
        tracks = np.stack([_track(b, u, n_frames, width, height) for b, u in zip(starts, vels)])
        subsets = [rng.choice(channels, size=channels // 2, replace=False) for _ in starts]
        speed = np.array([float(np.abs(u).sum()) for u in vels])
        frames = [
            render_maps(f"vid{v:03d}_t{t:03d}", tracks[:, t], width, height, rng,
                        channels=channels, noise_level=noise_level, scales=scales,
                        cell_size=cell_size, subsets=subsets, motion=speed)
            for t in range(n_frames)
        ]
        out.append(SyntheticVideo(f"vid{v:03d}", frames, tracks))
    return out


def _track(box, vel, n_frames, width, height) -> np.ndarray:
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    rows = []
    cx, cy = x0, y0
    vx, vy = int(vel[0]), int(vel[1])
    for _ in range(n_frames):
        rows.append([cx, cy, cx + w, cy + h])
        if not 0 <= cx + vx <= width - w:
            vx = -vx
        if not 0 <= cy + vy <= height - h:
            vy = -vy
        cx, cy = cx + vx, cy + vy
    return np.array(rows, dtype=np.float64)


def _track_separation(a: np.ndarray, b: np.ndarray) -> float:
    return float(max(iou_matrix(a[t], b[t])[0, 0] for t in range(len(a))))
