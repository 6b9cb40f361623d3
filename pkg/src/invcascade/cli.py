"""Command-line entry point: ``invcascade <command> [options]``.

Every command reports malformed input with a single diagnostic line on
stderr and a non-zero exit status (2 for bad input, 3 for malformed
files).
"""

from __future__ import annotations

import argparse
from dataclasses import replace
import sys
from pathlib import Path

import numpy as np

from . import io as fio
from .cascade import (
    STAGE1_PYRAMID, STAGE2_PYRAMID, CascadeConfig, ImageMaps, collect_training_set,
    early_fusion, run_cascade,
)
from .geometry import as_boxes
from .metrics import (
    AUC_GRID, CURVE_GRID, average_recall, budget_for_recall, recall_vs_budget, recall_vs_iou,
    action_recall, _trapezoid,
)
from .scoring import train_linear
from .synth import SYNTH_SIZE, synth_generate, synth_videos
from .tubes import FrameProposals, TubeLinker
from .windowing import DEFAULT_SCALES, ScaleSet, select_shapes

MOTION = {"L5": "F5", "L3": "F3"}
UNREACHED = "unreached"


class InputError(Exception):
    """Bad arguments or inconsistent inputs."""


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _pair(text: str) -> tuple[int, int]:
    vals = _ints(text)
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected N or LO,HI, got {text!r}")
    return vals[0], vals[1]


# -- helpers -------------------------------------------------------------------

def _has_motion(image: ImageMaps) -> bool:
    return any(m in image.layers for m in MOTION.values())


def _fuse(image: ImageMaps, enabled: bool) -> ImageMaps:
    if enabled and _has_motion(image):
        return early_fusion(image, MOTION)
    return image


def _fuse_for(image: ImageMaps, models, layer: str, enabled: bool) -> ImageMaps:
    """Fuse motion only when the stage-1 models were trained on fused maps."""
    if not (enabled and _has_motion(image) and models.get(1)):
        return image
    fused = early_fusion(image, MOTION)
    if fused.layer(layer)[0].channels == models[1][0].channels:
        return fused
    return image


def _infer_dims(root: Path, image_id: str) -> tuple[int, int]:
    # map sides are floor(dim * factor), so the largest back-projection is the tightest
    w = h = 0
    for f in sorted((root / image_id).glob("*.fmap")):
        fm = fio.read_tensor(f)
        w = max(w, round(fm.width / fm.scale_factor))
        h = max(h, round(fm.height / fm.scale_factor))
    if not w:
        raise InputError(f"no tensors for image {image_id!r} under {root}")
    return w, h


def _image_list(tensors: Path, annotations: str | None) -> list[tuple[str, int, int]]:
    if annotations:
        return [(r["id"], r["width"], r["height"])
                for r in fio.read_annotations(annotations)["images"]]
    if not tensors.is_dir():
        raise InputError(f"tensor directory {tensors} does not exist")
    ids = sorted(p.name for p in tensors.iterdir() if p.is_dir())
    return [(i, *_infer_dims(tensors, i)) for i in ids]


def _check_channels(image: ImageMaps, models, layers) -> None:
    for stage, layer in ((1, layers[0]), (2, layers[1])):
        for fm, model in zip(image.layer(layer), models.get(stage, [])):
            if model.channels != fm.channels:
                raise InputError(
                    f"image {image.image_id}: stage-{stage} model expects {model.channels} "
                    f"channels, layer {layer} has {fm.channels}")


# -- commands ------------------------------------------------------------------

def cmd_select_windows(args) -> None:
    ann = fio.read_annotations(args.annotations)
    cells = []
    for rec in ann["images"]:
        gt = as_boxes(rec["boxes"])
        if not len(gt):
            continue
        if args.tensors:
            image = fio.read_image_maps(args.tensors, rec["id"], rec["width"], rec["height"])
            factors = [fm.scale_factor for fm in image.layer(args.layer)]
        else:
            factors = ScaleSet(tuple(args.scales)).factors(rec["width"], rec["height"],
                                                           args.cell_size)
        cells.extend(gt * f for f in factors)
    if not cells:
        raise InputError("annotations hold no boxes to select shapes from")
    bank = select_shapes(np.concatenate(cells), args.pool, args.count)
    fio.write_bank(bank, args.out)
    print(f"selected {len(bank)} window shapes -> {args.out}")


def cmd_train(args) -> None:
    conf = fio.read_config(args.config)
    mining = replace(conf["mining"], seed=args.seed)
    train_cfg = replace(conf["train"], seed=args.seed)
    cascade = conf["cascade"]
    bank = fio.read_bank(args.bank)
    ann = fio.read_annotations(args.annotations)
    if not ann["images"]:
        raise InputError("annotations list no images")
    images = [fio.read_image_maps(args.tensors, rec["id"], rec["width"], rec["height"])
              for rec in ann["images"]]
    gts = [as_boxes(rec["boxes"]) for rec in ann["images"]]
    # one model serves every image, so motion is used only if all images carry it
    motion = not args.no_motion and all(_has_motion(im) for im in images)
    images = [_fuse(im, motion) for im in images]
    n_scales = len(images[0].layer(cascade.layers[0]))
    pyramid = STAGE1_PYRAMID if args.stage == 1 else STAGE2_PYRAMID
    out = Path(args.out)
    for sid in range(n_scales):
        pos, neg = collect_training_set(images, gts, bank, sid, args.stage, cascade, mining)
        if not len(pos) or not len(neg):
            raise InputError(f"scale {sid}: no {'positive' if not len(pos) else 'negative'} "
                             "training windows; check the bank against the annotations")
        model = train_linear(pos, neg, train_cfg, scale_id=sid, pyramid=pyramid,
                             stage=args.stage)
        fio.write_model(model, out / fio.model_name(args.stage, sid))
        print(f"stage {args.stage} scale {sid}: {len(pos)} positives, {len(neg)} negatives")


def cmd_propose(args) -> None:
    conf = fio.read_config(args.config)
    cfg: CascadeConfig = conf["cascade"]
    bank = fio.read_bank(args.bank)
    models = fio.read_models(args.models)
    if 1 not in models:
        raise InputError(f"{args.models}: no stage-1 models")
    if cfg.use_stage2 and 2 not in models:
        raise InputError(f"{args.models}: no stage-2 models (or disable stage 2 in the config)")
    tensors = Path(args.tensors)
    results = {}
    for image_id, w, h in _image_list(tensors, args.annotations):
        image = _fuse_for(fio.read_image_maps(tensors, image_id, w, h), models, cfg.layers[0],
                          not args.no_motion)
        _check_channels(image, models, cfg.layers)
        res = run_cascade(image, bank, models, None, cfg, conf["refine"])
        results[image_id] = res.proposals[:args.limit] if args.limit else res.proposals
    fio.write_proposals_csv(results, args.out)
    print(f"{sum(len(v) for v in results.values())} proposals for {len(results)} images "
          f"-> {args.out}")


def _videos_from_proposals(args) -> dict[str, list[FrameProposals]]:
    src = Path(args.proposals)
    if src.is_dir():
        files = sorted(src.glob("*.csv"))
        if not files:
            raise InputError(f"{src}: no proposal CSV files")
        return {f.stem: fio.frames_from_csv(f) for f in files}
    if not args.annotations:
        raise InputError("a single proposal CSV needs --annotations to group frames into videos")
    data = fio.read_proposals_csv(src)
    out = {}
    for video in fio.read_annotations(args.annotations)["videos"]:
        frames = []
        for t, fid in enumerate(video["frames"]):
            boxes, scores = data.get(fid, (np.zeros((0, 4)), np.zeros(0)))
            frames.append(FrameProposals(t, boxes, scores))
        if not frames:
            raise InputError(f"video {video['id']} lists no frames")
        out[video["id"]] = frames
    if not out:
        raise InputError("annotations list no videos")
    return out


def cmd_link_tubes(args) -> None:
    linker = TubeLinker(args.per_frame, args.max_tubes, args.gate)
    videos = _videos_from_proposals(args)
    tubes = {vid: linker.link(frames) for vid, frames in videos.items()}
    fio.write_tubes(tubes, args.out)
    print(f"{sum(len(t) for t in tubes.values())} tubes for {len(tubes)} videos -> {args.out}")


def _n_at(v):
    return UNREACHED if v is None else v


def cmd_eval_recall(args) -> None:
    data = fio.read_proposals_csv(args.proposals)
    ann = fio.read_annotations(args.annotations)
    props, gts = [], []
    for rec in ann["images"]:
        props.append(data.get(rec["id"], (np.zeros((0, 4)), None))[0])
        gts.append(as_boxes(rec["boxes"]))
    if not any(len(g) for g in gts):
        raise InputError("annotations hold no ground-truth boxes")
    budgets = args.budgets
    curve = recall_vs_budget(props, gts, budgets, args.iou)
    fio.write_curve_csv([(int(b), float(r)) for b, r in curve.rows()], args.out,
                        ("proposals", "recall"))
    k = args.k if args.k is not None else max(budgets)
    auc_curve = recall_vs_iou(props, gts, k, AUC_GRID)
    summary = {
        "iou": args.iou,
        "budgets": [int(b) for b in budgets],
        "recall": [float(r) for r in curve.recall],
        "k": k,
        "auc": float(_trapezoid(auc_curve.recall, auc_curve.axis)),
        "average_recall": average_recall(props, gts, k),
        "recall_vs_iou": [[float(a), float(r)]
                          for a, r in recall_vs_iou(props, gts, k, CURVE_GRID).rows()],
        "n_at": {f"{int(x * 100)}%": _n_at(budget_for_recall(props, gts, x, args.iou))
                 for x in (0.25, 0.50, 0.75)},
        "n_images": len(gts),
        "n_objects": int(sum(len(g) for g in gts)),
    }
    summary_path = Path(args.summary) if args.summary else Path(args.out).with_suffix(".json")
    fio.write_json(summary, summary_path)
    for b, r in curve.rows():
        print(f"recall@{int(b)} (IoU {args.iou:g}) = {r:.4f}")


def _full_length(tube, n_frames: int) -> list:
    boxes = [None] * n_frames
    for t, b in zip(tube.frames, tube.boxes):
        if not 0 <= t < n_frames:
            raise InputError(f"tube frame {t} outside a {n_frames}-frame video")
        boxes[t] = b
    return boxes


def cmd_eval_tubes(args) -> None:
    tubes = fio.read_tubes(args.tubes)
    videos = [v for v in fio.read_annotations(args.annotations)["videos"] if v["tubes"]]
    if not videos:
        raise InputError("annotations hold no ground-truth tubes")
    preds, gts = [], []
    for v in videos:
        gt = fio.gt_tubes_of(v)
        n = len(gt[0])
        if any(len(g) != n for g in gt):
            raise InputError(f"video {v['id']}: ground-truth tubes differ in length")
        preds.append([_full_length(t, n) for t in tubes.get(v["id"], [])])
        gts.append(gt)
    ks = args.k or [args.max_k]
    summary = {
        "ovr": args.ovr,
        "n_videos": len(videos),
        "n_gt_tubes": int(sum(len(g) for g in gts)),
        "recall": {str(k): action_recall(preds, gts, k, args.ovr) for k in ks},
    }
    fio.write_json(summary, args.out)
    for k, r in summary["recall"].items():
        print(f"action recall@{k} tubes (Ovr {args.ovr:g}) = {r:.4f}")


def cmd_synth(args) -> None:
    out = Path(args.out)
    tensors = out / "tensors"
    width, height = SYNTH_SIZE
    images, videos = [], []
    for item in synth_generate(args.seed, args.images, args.objects, args.noise,
                               channels=args.channels):
        fio.write_image_maps(item.maps, tensors)
        images.append({"id": item.maps.image_id, "width": width, "height": height,
                       "boxes": item.boxes.tolist()})
    if args.videos:
        for video in synth_videos(args.seed + 1, args.videos, args.frames, args.actors,
                                  args.noise, channels=args.channels):
            ids = []
            for t, frame in enumerate(video.frames):
                fio.write_image_maps(frame, tensors)
                ids.append(frame.image_id)
                images.append({"id": frame.image_id, "width": width, "height": height,
                               "boxes": video.tracks[:, t].tolist()})
            videos.append({"id": video.video_id, "width": width, "height": height,
                           "frames": ids, "tubes": video.tracks.tolist()})
    fio.write_annotations(images, videos, out / "annotations.json")
    print(f"{args.images} images, {args.videos} videos -> {out}")


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invcascade",
                                description="Inverse-cascade object proposals on stored CNN feature maps.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("select-windows", help="learn the window-shape bank from annotations")
    s.add_argument("--annotations", required=True, help="annotation JSON")
    s.add_argument("--pool", type=int, default=20, help="shape pool bound Z, shapes in [1..Z]^2 (default 20)")
    s.add_argument("--count", type=int, default=50, help="number of shapes to keep (default 50)")
    s.add_argument("--tensors", help="tensor directory; scale factors are read from the coarse layer")
    s.add_argument("--layer", default="L5", help="coarse layer tag used with --tensors (default L5)")
    s.add_argument("--scales", type=_ints, default=list(DEFAULT_SCALES),
                   help="short-side scales used without --tensors (default 227,300,400,600)")
    s.add_argument("--cell-size", type=float, default=16.0,
                   help="resized pixels per coarse cell used without --tensors (default 16)")
    s.add_argument("--out", required=True, help="output bank JSON")
    s.set_defaults(func=cmd_select_windows)

    s = sub.add_parser("train", help="train the linear models of one stage, one per scale")
    s.add_argument("--tensors", required=True, help="tensor directory")
    s.add_argument("--annotations", required=True, help="annotation JSON")
    s.add_argument("--bank", required=True, help="window-shape bank JSON")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True, help="cascade stage")
    s.add_argument("--out", required=True,
                   help="model directory; receives stage<S>_scale<K>.json per scale")
    s.add_argument("--seed", type=int, default=0, help="seed for mining and SGD (default 0)")
    s.add_argument("--config", help="JSON config with mining/train/cascade sections")
    s.add_argument("--no-motion", action="store_true",
                   help="do not concatenate F5/F3 motion layers onto L5/L3 (they are used "
                        "only when every image carries them)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("propose", help="run the cascade and write ranked proposals")
    s.add_argument("--tensors", required=True, help="tensor directory")
    s.add_argument("--bank", required=True, help="window-shape bank JSON")
    s.add_argument("--models", required=True, help="model directory")
    s.add_argument("--config", help="JSON config with cascade/refine sections")
    s.add_argument("--annotations",
                   help="annotation JSON giving the image list and sizes (default: every "
                        "tensor subdirectory, sizes inferred)")
    s.add_argument("--limit", type=int, default=0, help="keep at most this many per image (0: all)")
    s.add_argument("--no-motion", action="store_true",
                   help="do not concatenate F5/F3 motion layers onto L5/L3 (they are used "
                        "only when the models were trained with them)")
    s.add_argument("--out", required=True, help="output CSV")
    s.set_defaults(func=cmd_propose)

    s = sub.add_parser("link-tubes", help="link per-frame proposals into action tubes")
    s.add_argument("--proposals", required=True,
                   help="directory of per-video CSVs (image_id = frame index), or one CSV "
                        "together with --annotations")
    s.add_argument("--annotations", help="annotation JSON listing the frames of every video")
    s.add_argument("--per-frame", type=int, default=100, help="proposals kept per frame (default 100)")
    s.add_argument("--max-tubes", type=int, default=20, help="tubes per video (default 20)")
    s.add_argument("--gate", type=float, default=0.5,
                   help="minimum IoU between linked boxes (default 0.5)")
    s.add_argument("--out", required=True, help="output tube JSON")
    s.set_defaults(func=cmd_link_tubes)

    s = sub.add_parser("eval-recall", help="proposal recall curve and summary")
    s.add_argument("--proposals", required=True, help="proposal CSV")
    s.add_argument("--annotations", required=True, help="annotation JSON")
    s.add_argument("--iou", type=float, default=0.7, help="IoU threshold (default 0.7)")
    s.add_argument("--budgets", type=_ints, default=[10, 100, 1000],
                   help="comma-separated proposal budgets (default 10,100,1000)")
    s.add_argument("--k", type=int, help="budget for AUC and AR (default: largest budget)")
    s.add_argument("--out", required=True, help="output CSV (proposals,recall)")
    s.add_argument("--summary", help="summary JSON (default: --out with .json suffix)")
    s.set_defaults(func=cmd_eval_recall)

    s = sub.add_parser("eval-tubes", help="action recall of linked tubes")
    s.add_argument("--tubes", required=True, help="tube JSON")
    s.add_argument("--annotations", required=True, help="annotation JSON with video tubes")
    s.add_argument("--ovr", type=float, default=0.5, help="tube overlap threshold (default 0.5)")
    s.add_argument("--k", type=_ints, help="comma-separated tube budgets (default: --max-k)")
    s.add_argument("--max-k", type=int, default=20, help="tube budget when --k is absent (default 20)")
    s.add_argument("--out", required=True, help="output summary JSON")
    s.set_defaults(func=cmd_eval_tubes)

    s = sub.add_parser("synth", help="generate synthetic feature maps and annotations")
    s.add_argument("--seed", type=int, required=True, help="generator seed")
    s.add_argument("--images", type=int, default=50, help="number of still images (default 50)")
    s.add_argument("--objects", type=_pair, default=(1, 3),
                   help="objects per image, N or LO,HI (default 1,3)")
    s.add_argument("--noise", type=float, default=0.1, help="background noise level (default 0.1)")
    s.add_argument("--channels", type=int, default=8, help="feature channels (default 8)")
    s.add_argument("--videos", type=int, default=0, help="number of videos (default 0)")
    s.add_argument("--frames", type=int, default=20, help="frames per video (default 20)")
    s.add_argument("--actors", type=int, default=2, help="actors per video (default 2)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except fio.FormatError as exc:
        print(f"invcascade {args.command}: error [{exc.code}]: {_one_line(exc)}", file=sys.stderr)
        return 3
    except (InputError, ValueError, KeyError, OSError) as exc:
        print(f"invcascade {args.command}: error: {_one_line(exc)}", file=sys.stderr)
        return 2
    return 0


def _one_line(exc: BaseException) -> str:
    text = str(exc) or exc.__class__.__name__
    if isinstance(exc, KeyError) and exc.args:
        text = f"missing key {exc.args[0]!r}"
    return " ".join(text.split())


if __name__ == "__main__":
    sys.exit(main())
