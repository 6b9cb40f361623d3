"""Proposal recall metrics: recall curves, AUC, average recall, N@x% and tube recall.

A ground-truth object counts as recalled when any of the top-``k``
proposals of its image reaches the IoU threshold; one proposal may recall
several objects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import as_boxes, iou_matrix
from .tubes import tube_overlap

AR_GRID = np.round(np.arange(0.50, 1.0001, 0.01), 2)
AUC_GRID = np.round(np.arange(0.0, 1.0001, 0.01), 2)
CURVE_GRID = np.round(np.arange(0.50, 1.0001, 0.05), 2)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class RecallCurve:
    axis: np.ndarray
    recall: np.ndarray
    axis_name: str = "iou"

    def rows(self):
        return list(zip(self.axis.tolist(), self.recall.tolist()))


def _best_overlaps(proposals, gt, k: int) -> np.ndarray:
    """Best IoU of every gt box with its image's top-``k`` proposals, concatenated."""
    if len(proposals) != len(gt):
        raise ValueError("proposals and ground truth cover different image counts")
    out = []
    for props, boxes in zip(proposals, gt):
        boxes = as_boxes(boxes)
        if len(boxes) == 0:
            continue
        props = as_boxes(props)[:max(k, 0)]
        if len(props) == 0:
            out.append(np.full(len(boxes), -np.inf))
        else:
            out.append(iou_matrix(boxes, props).max(axis=1))
    if not out:
        raise ValueError("no ground-truth boxes to evaluate")
    return np.concatenate(out)


def recall_at(proposals, gt, k: int, iou_thr: float) -> float:
    """Fraction of gt boxes covered (IoU >= ``iou_thr``) by their image's top-``k`` proposals."""
    return float(np.mean(_best_overlaps(proposals, gt, k) >= iou_thr))


def recall_vs_iou(proposals, gt, k: int, thr_grid=CURVE_GRID) -> RecallCurve:
    best = _best_overlaps(proposals, gt, k)
    grid = np.asarray(thr_grid, dtype=np.float64)
    return RecallCurve(grid, (best[:, None] >= grid[None, :]).mean(axis=0), "iou")


def recall_vs_budget(proposals, gt, budgets, iou_thr: float) -> RecallCurve:
    budgets = np.asarray(list(budgets), dtype=np.int64)
    ranks = first_hit_ranks(proposals, gt, iou_thr)
    return RecallCurve(budgets, (ranks[:, None] < budgets[None, :]).mean(axis=0), "proposals")


def average_recall(proposals, gt, k: int) -> float:
    """Mean recall over IoU thresholds 0.50, 0.51, ..., 1.00."""
    return float(recall_vs_iou(proposals, gt, k, AR_GRID).recall.mean())


def first_hit_ranks(proposals, gt, iou_thr: float) -> np.ndarray:
    """For every gt, the 0-based rank of the first proposal reaching ``iou_thr`` (inf if none)."""
    out = []
    for props, boxes in zip(proposals, gt):
        boxes = as_boxes(boxes)
        if len(boxes) == 0:
            continue
        props = as_boxes(props)
        r = np.full(len(boxes), np.inf)
        if len(props):
            hit = iou_matrix(boxes, props) >= iou_thr
            any_hit = hit.any(axis=1)
            r[any_hit] = np.argmax(hit[any_hit], axis=1)
        out.append(r)
    if not out:
        raise ValueError("no ground-truth boxes to evaluate")
    return np.concatenate(out)


def budget_for_recall(proposals, gt, target: float, iou_thr: float) -> int | None:
    """Smallest per-image budget reaching ``target`` recall, or ``None`` if unreached."""
    ranks = np.sort(first_hit_ranks(proposals, gt, iou_thr))
    need = int(np.ceil(target * len(ranks) - 1e-9))
    if need == 0:
        return 0
    r = ranks[need - 1]
    return None if not np.isfinite(r) else int(r) + 1


def auc_and_budgets(proposals, gt, k: int = 1000, iou_thr: float = 0.7):
    """Area under recall-vs-IoU at budget ``k`` (trapezoid on [0, 1]) and N@25/50/75%."""
    curve = recall_vs_iou(proposals, gt, k, AUC_GRID)
    auc = float(_trapezoid(curve.recall, curve.axis))
    budgets = tuple(budget_for_recall(proposals, gt, x, iou_thr) for x in (0.25, 0.50, 0.75))
    return (auc,) + budgets


def action_recall(tubes, gt_tubes, k: int, ovr_thr: float = 0.5) -> float:
    """Fraction of gt tubes whose best overlap with the video's top-``k`` tubes reaches ``ovr_thr``."""
    if len(tubes) != len(gt_tubes):
        raise ValueError("tubes and ground truth cover different video counts")
    hit = total = 0
    for video_tubes, video_gt in zip(tubes, gt_tubes):
        top = list(video_tubes)[:max(k, 0)]
        for g in video_gt:
            total += 1
            if any(tube_overlap(p, g) >= ovr_thr for p in top):
                hit += 1
    if total == 0:
        raise ValueError("no ground-truth tubes to evaluate")
    return hit / total


def frame_recall(per_frame_boxes, per_frame_gt, k: int, iou_thr: float) -> float:
    """Recall of annotated actors when each frame is treated as an image."""
    props, gts = [], []
    for boxes, gt in zip(per_frame_boxes, per_frame_gt):
        gt = [g for g in gt if g is not None]
        props.append(boxes)
        gts.append(as_boxes(gt) if gt else np.zeros((0, 4)))
    return recall_at(props, gts, k, iou_thr)
