"""The three-stage inverse cascade: coarse dense scoring, mid-layer pyramid
re-scoring with multiplicative fusion, and fine-layer edge refinement."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import enum
import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .featmap import FeatureMap, PyramidSpec, build_integral, concat_maps, transfer_boxes
from .geometry import Box, as_boxes, nms
from .refine import EdgeMap, RefineConfig, edge_from_features, refine_all
from .scoring import (
    LinearModel, MiningConfig, TrainConfig, mine_samples, normalize_scores,
    score_batch, train_linear,
)
from .windowing import ShapeBank, assemble_descriptors, select_shapes, sliding_windows

STAGE1_PYRAMID = PyramidSpec((1,))
STAGE2_PYRAMID = PyramidSpec((1, 2))


class Stage(enum.IntEnum):
    S1 = 1
    S2 = 2
    S3 = 3


@dataclass(frozen=True)
class CascadeConfig:
    """Stage budgets and NMS targets.

    ``beta`` is the IoU the proposals are tuned for (0.5 or 0.7); NMS runs at
    ``beta + 0.05`` within a scale and at ``beta`` across scales unless the
    alphas are given explicitly. Budgets are global per image and split
    across scales in proportion to each scale's candidate count.
    """

    stage1_keep: int = 4000
    stage2_keep: int = 3000
    n_desired: int = 1000
    beta: float = 0.5
    alpha_within: float | None = None
    alpha_across: float | None = None
    layers: tuple[str, str, str] = ("L5", "L3", "L2")
    stride: int = 1
    use_stage2: bool = True
    use_stage3: bool = True

    def __post_init__(self):
        if not self.stage1_keep >= self.stage2_keep >= self.n_desired >= 1:
            raise ValueError("budgets must satisfy stage1_keep >= stage2_keep >= n_desired >= 1")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) != 3:
            raise ValueError("layers must name the coarse, mid and fine layers")

    @property
    def within(self) -> float:
        return self.alpha_within if self.alpha_within is not None else min(1.0, self.beta + 0.05)

    @property
    def across(self) -> float:
        return self.alpha_across if self.alpha_across is not None else self.beta


@dataclass(frozen=True)
class Proposal:
    box: Box                      # original-image pixels
    score: float
    scale_id: int
    stage: Stage
    cell_box: tuple[float, float, float, float] | None = None   # coarse-map cells
    origin: int = -1              # rank of the stage-1 survivor it derives from


@dataclass
class ImageMaps:
    """All feature layers of one image: ``layers[tag][scale_id]``."""

    image_id: str
    width: int
    height: int
    layers: dict[str, list[FeatureMap]]
    edges: list[EdgeMap] | None = None

    @property
    def n_scales(self) -> int:
        return len(next(iter(self.layers.values())))

    def layer(self, tag: str) -> list[FeatureMap]:
        if tag not in self.layers:
            raise KeyError(f"image {self.image_id!r} has no layer {tag!r}")
        return self.layers[tag]


@dataclass
class ScaleSurvivors:
    boxes: np.ndarray             # coarse cells, ranked
    scores: np.ndarray            # normalized stage-1 scores
    n_windows: int = 0


@dataclass
class CascadeResult:
    proposals: list[Proposal]
    stage1: list[ScaleSurvivors] = field(default_factory=list)
    stage2: list[Proposal] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def boxes(self) -> np.ndarray:
        return as_boxes([p.box for p in self.proposals])

    def scores(self) -> np.ndarray:
        return np.array([p.score for p in self.proposals], dtype=np.float64)


def apportion(total: int, counts) -> list[int]:
    """Split ``total`` across groups proportionally to ``counts``.

    Largest-remainder rounding; each non-empty group receives at least one
    slot and no group more than its count.
    """
    counts = np.asarray(counts, dtype=np.int64)
    out = np.zeros(len(counts), dtype=np.int64)
    if counts.sum() == 0:
        return out.tolist()
    quota = total * counts / counts.sum()
    out = np.floor(quota).astype(np.int64)
    rem = total - out.sum()
    order = np.argsort(-(quota - out), kind="stable")
    out[order[:rem]] += 1
    out = np.minimum(np.maximum(out, (counts > 0).astype(np.int64)), counts)
    # the one-slot floor may overshoot; take back from the most over-served groups
    excess = out.sum() - max(total, int((counts > 0).sum()))
    while excess > 0:
        over = np.where(out > 1, out - quota, -np.inf)
        out[int(np.argmax(over))] -= 1
        excess -= 1
    return out.tolist()


def _image_dims(image: ImageMaps | None, maps) -> tuple[int, int]:
    if image is not None:
        return image.width, image.height
    fm = maps[0]
    return round(fm.width / fm.scale_factor), round(fm.height / fm.scale_factor)


def run_stage1(maps: list[FeatureMap], bank: ShapeBank, models: list[LinearModel],
               cfg: CascadeConfig = CascadeConfig(),
               image_dims: tuple[int, int] | None = None) -> list[ScaleSurvivors]:
    """Dense sliding-window scoring on the coarse layer of every scale."""
    if len(models) < len(maps):
        raise ValueError(f"missing stage-1 model for scale {len(models)}")
    dims = image_dims or _image_dims(None, maps)
    windows = [sliding_windows(fm.height, fm.width, bank, cfg.stride)[0] for fm in maps]
    budgets = apportion(cfg.stage1_keep, [len(w) for w in windows])
    out = []
    for fm, model, boxes, budget in zip(maps, models, windows, budgets):
        if len(boxes) == 0:
            out.append(ScaleSurvivors(np.zeros((0, 4)), np.zeros(0), 0))
            continue
        desc = assemble_descriptors(build_integral(fm), boxes, model.pyramid, dims,
                                    size_bias=model.size_bias)
        scores = normalize_scores(score_batch(model, desc))
        keep = nms(boxes, scores, cfg.within, max_keep=budget)
        out.append(ScaleSurvivors(boxes[keep], scores[keep], len(boxes)))
    return out


def run_stage2(survivors: list[ScaleSurvivors], coarse_maps: list[FeatureMap],
               mid_maps: list[FeatureMap], models2: list[LinearModel],
               cfg: CascadeConfig = CascadeConfig(),
               image_dims: tuple[int, int] | None = None) -> tuple[list[Proposal], int]:
    """Pyramid re-scoring on the mid layer, fusion, per-scale and cross-scale NMS.

    Returns the cross-scale ranked proposals and the number of candidates
    that survived the per-scale stage-2 NMS.
    """
    if len(models2) < len(survivors):
        raise ValueError(f"missing stage-2 model for scale {len(models2)}")
    dims = image_dims or _image_dims(None, coarse_maps)
    budgets = apportion(cfg.stage2_keep, [len(s.boxes) for s in survivors])
    pooled_boxes, pooled_scores, pooled_meta = [], [], []
    n_stage2 = 0
    for sid, (surv, cm, mm, model, budget) in enumerate(
            zip(survivors, coarse_maps, mid_maps, models2, budgets)):
        if len(surv.boxes) == 0:
            continue
        mid_boxes = transfer_boxes(surv.boxes, (cm.height, cm.width), (mm.height, mm.width))
        if (np.any(mid_boxes[:, :2] < 0) or np.any(mid_boxes[:, 2] > mm.width)
                or np.any(mid_boxes[:, 3] > mm.height)):
            raise ValueError(f"scale {sid}: survivor box leaves the mid map after transfer")
        desc = assemble_descriptors(build_integral(mm), mid_boxes, model.pyramid, dims,
                                    size_bias=model.size_bias, strict=False)
        s2 = normalize_scores(score_batch(model, desc))
        fused = surv.scores * s2
        keep = nms(surv.boxes, fused, cfg.within, max_keep=budget)
        n_stage2 += len(keep)
        pooled_boxes.append(surv.boxes[keep] / cm.scale_factor)
        pooled_scores.append(fused[keep])
        pooled_meta.extend((sid, int(k), tuple(surv.boxes[k])) for k in keep)
    if not pooled_boxes:
        return [], 0
    img_boxes = np.concatenate(pooled_boxes)
    scores = np.concatenate(pooled_scores)
    final = nms(img_boxes, scores, cfg.across, max_keep=cfg.n_desired)
    props = [
        Proposal(Box.from_array(img_boxes[i]), float(scores[i]), pooled_meta[i][0], Stage.S2,
                 pooled_meta[i][2], pooled_meta[i][1])
        for i in final
    ]
    return props, n_stage2


def run_stage3(proposals: list[Proposal], coarse_maps: list[FeatureMap],
               edges: list[EdgeMap], refine_cfg: RefineConfig = RefineConfig()) -> list[Proposal]:
    """Refine every proposal on its scale's edge map; scores are kept."""
    out = list(proposals)
    by_scale: dict[int, list[int]] = {}
    for i, p in enumerate(proposals):
        by_scale.setdefault(p.scale_id, []).append(i)
    for sid, idx in by_scale.items():
        cm, em = coarse_maps[sid], edges[sid]
        cells = as_boxes([proposals[i].cell_box for i in idx])
        fine = transfer_boxes(cells, (cm.height, cm.width), (em.height, em.width))
        refined, _ = refine_all(em, fine, refine_cfg)
        back = transfer_boxes(refined, (em.height, em.width), (cm.height, cm.width), snap=False)
        for j, i in enumerate(idx):
            out[i] = replace(proposals[i], box=Box.from_array(back[j] / cm.scale_factor),
                             stage=Stage.S3)
    return out


def run_cascade(image: ImageMaps, bank: ShapeBank, models: dict[int, list[LinearModel]],
                edge_source: list[EdgeMap] | None = None,
                cfg: CascadeConfig = CascadeConfig(),
                refine_cfg: RefineConfig = RefineConfig()) -> CascadeResult:
    """Run all enabled stages on one image; final boxes are in image pixels."""
    coarse_tag, mid_tag, fine_tag = cfg.layers
    coarse = image.layer(coarse_tag)
    dims = (image.width, image.height)
    timings = {}

    t0 = time.perf_counter()
    s1 = run_stage1(coarse, bank, models[1], cfg, dims)
    timings["stage1"] = time.perf_counter() - t0
    counts = {"windows": sum(s.n_windows for s in s1), "S1": sum(len(s.boxes) for s in s1)}

    if not cfg.use_stage2:
        merged = []
        for sid, (s, cm) in enumerate(zip(s1, coarse)):
            merged.extend(
                Proposal(Box.from_array(b / cm.scale_factor), float(sc), sid, Stage.S1,
                         tuple(b), k)
                for k, (b, sc) in enumerate(zip(s.boxes, s.scores)))
        order = np.argsort(-np.array([p.score for p in merged]), kind="stable")
        props = [merged[i] for i in order]
        counts["final"] = len(props)
        return CascadeResult(props, s1, [], counts, timings)

    t0 = time.perf_counter()
    s2, n_s2 = run_stage2(s1, coarse, image.layer(mid_tag), models[2], cfg, dims)
    timings["stage2"] = time.perf_counter() - t0
    counts["S2"] = n_s2
    counts["S2_merged"] = len(s2)

    props = s2
    if cfg.use_stage3 and s2:
        t0 = time.perf_counter()
        edges = edge_source if edge_source is not None else image.edges
        if edges is None:
            edges = [edge_from_features(fm) for fm in image.layer(fine_tag)]
        props = run_stage3(s2, coarse, edges, refine_cfg)
        timings["stage3"] = time.perf_counter() - t0
    counts["S3"] = len(props) if cfg.use_stage3 else 0
    counts["final"] = len(props)
    return CascadeResult(props, s1, s2, counts, timings)


def early_fusion(image: ImageMaps, motion: dict[str, str]) -> ImageMaps:
    """Concatenate motion layers onto appearance layers, e.g. ``{"L5": "F5"}``.

    Layers not named in ``motion`` (the fine layer in particular) keep the
    appearance features only.
    """
    layers = dict(image.layers)
    for app, mot in motion.items():
        if mot in image.layers and app in image.layers:
            layers[app] = [concat_maps(a, m) for a, m in zip(image.layers[app], image.layers[mot])]
    return ImageMaps(image.image_id, image.width, image.height, layers, image.edges)


def _scale_rng(seed: int, image_index: int, scale_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, image_index, scale_id])


def collect_training_set(images: list[ImageMaps], gts: list[np.ndarray], bank: ShapeBank,
                         scale_id: int, stage: int, cfg: CascadeConfig = CascadeConfig(),
                         mining: MiningConfig = MiningConfig()):
    """Mine windows on the coarse grid of one scale and describe them for ``stage``.

    Both stages mine the same windows (same seeds); stage 2 describes them
    on the mid layer with the 1x1 + 2x2 pyramid.
    """
    coarse_tag, mid_tag, _ = cfg.layers
    pyramid = STAGE1_PYRAMID if stage == 1 else STAGE2_PYRAMID
    pos_all, neg_all = [], []
    for i, (image, gt) in enumerate(zip(images, gts)):
        cm = image.layer(coarse_tag)[scale_id]
        windows, _ = sliding_windows(cm.height, cm.width, bank, cfg.stride)
        gt_cells = as_boxes(gt) * cm.scale_factor
        pos, neg = mine_samples(windows, gt_cells, mining, _scale_rng(mining.seed, i, scale_id))
        dims = (image.width, image.height)
        if stage == 1:
            ii, bp, bn = build_integral(cm), pos, neg
        else:
            mm = image.layer(mid_tag)[scale_id]
            ii = build_integral(mm)
            bp = transfer_boxes(pos, (cm.height, cm.width), (mm.height, mm.width))
            bn = transfer_boxes(neg, (cm.height, cm.width), (mm.height, mm.width))
        if len(bp):
            pos_all.append(assemble_descriptors(ii, bp, pyramid, dims, strict=False))
        if len(bn):
            neg_all.append(assemble_descriptors(ii, bn, pyramid, dims, strict=False))
    width = None
    for block in pos_all + neg_all:
        width = block.shape[1]
    if width is None:
        return np.zeros((0, 0)), np.zeros((0, 0))
    pos = np.vstack(pos_all) if pos_all else np.zeros((0, width))
    neg = np.vstack(neg_all) if neg_all else np.zeros((0, width))
    return pos, neg


def gt_in_cells(images: list[ImageMaps], gts: list[np.ndarray], layer: str = "L5") -> np.ndarray:
    """Ground-truth boxes expressed in coarse-map cells at every scale."""
    out = []
    for image, gt in zip(images, gts):
        gt = as_boxes(gt)
        if len(gt) == 0:
            continue
        for fm in image.layer(layer):
            out.append(gt * fm.scale_factor)
    return np.concatenate(out) if out else np.zeros((0, 4))


class ProposalCascade(BaseEstimator):
    """Trainable inverse-cascade proposal generator.

    ``fit`` takes a list of :class:`ImageMaps` and, per image, the ground-truth
    boxes in image pixels. It learns the window-shape bank (unless one is
    given) and one linear model per scale for stages 1 and 2.

    ``predict`` returns, per image, the ranked list of :class:`Proposal`.
    """

    def __init__(self, bank=None, n_shapes=50, pool_bound=20, beta=0.5,
                 stage1_keep=4000, stage2_keep=3000, n_desired=1000,
                 layers=("L5", "L3", "L2"), stride=1, use_stage2=True, use_stage3=True,
                 C=1.0, epochs=30, learning_rate=0.01, decay=1e-4, solver="sgd",
                 pos_iou=0.7, neg_iou=0.3, pos_per_object=10, neg_per_image=50,
                 refine_config=None, random_state=0):
        self.bank = bank
        self.n_shapes = n_shapes
        self.pool_bound = pool_bound
        self.beta = beta
        self.stage1_keep = stage1_keep
        self.stage2_keep = stage2_keep
        self.n_desired = n_desired
        self.layers = layers
        self.stride = stride
        self.use_stage2 = use_stage2
        self.use_stage3 = use_stage3
        self.C = C
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.decay = decay
        self.solver = solver
        self.pos_iou = pos_iou
        self.neg_iou = neg_iou
        self.pos_per_object = pos_per_object
        self.neg_per_image = neg_per_image
        self.refine_config = refine_config
        self.random_state = random_state

    def cascade_config(self) -> CascadeConfig:
        return CascadeConfig(self.stage1_keep, self.stage2_keep, self.n_desired, self.beta,
                             layers=tuple(self.layers), stride=self.stride,
                             use_stage2=self.use_stage2, use_stage3=self.use_stage3)

    def mining_config(self) -> MiningConfig:
        return MiningConfig(self.pos_iou, self.neg_iou, self.pos_per_object,
                            self.neg_per_image, self.random_state)

    def train_config(self) -> TrainConfig:
        return TrainConfig(C=self.C, epochs=self.epochs, rate0=self.learning_rate,
                           decay=self.decay, seed=self.random_state, solver=self.solver)

    def fit(self, X, y):
        images = list(X)
        gts = [as_boxes(g) for g in y]
        if len(images) != len(gts) or not images:
            raise ValueError("need one ground-truth list per image and at least one image")
        cfg = self.cascade_config()
        if self.bank is None:
            cells = gt_in_cells(images, gts, cfg.layers[0])
            self.bank_ = select_shapes(cells, self.pool_bound, self.n_shapes)
        else:
            self.bank_ = self.bank
        self.models_ = {1: [], 2: []}
        for stage in (1, 2):
            for sid in range(images[0].n_scales):
                self.models_[stage].append(self._train_one(images, gts, sid, stage, cfg))
        return self

    def _train_one(self, images, gts, sid, stage, cfg):
        pos, neg = collect_training_set(images, gts, self.bank_, sid, stage, cfg,
                                        self.mining_config())
        if len(pos) == 0 or len(neg) == 0:
            raise ValueError(
                f"scale {sid}, stage {stage}: no {'positive' if len(pos) == 0 else 'negative'} "
                "training windows; check the shape bank against the annotations")
        return train_linear(pos, neg, self.train_config(), scale_id=sid,
                            pyramid=STAGE1_PYRAMID if stage == 1 else STAGE2_PYRAMID,
                            stage=stage)

    def propose(self, image: ImageMaps) -> CascadeResult:
        check_is_fitted(self, "models_")
        refine_cfg = self.refine_config or RefineConfig()
        return run_cascade(image, self.bank_, self.models_, None, self.cascade_config(), refine_cfg)

    def predict(self, X) -> list[list[Proposal]]:
        return [self.propose(image).proposals for image in X]
