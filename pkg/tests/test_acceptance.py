"""Exit criteria of the build. Each test prints one PASS/FAIL line, also
collected in the terminal summary under "acceptance criteria"."""

import csv
import filecmp
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from invcascade.cascade import ProposalCascade, early_fusion
from invcascade.cli import main
from invcascade.featmap import FeatureMap, PyramidSpec, avg_pool, build_integral, pyramid_pool
from invcascade.geometry import Box, iou_matrix, nms
from invcascade.metrics import AUC_GRID, auc_and_budgets, frame_recall, recall_at, recall_vs_iou
from invcascade.refine import EdgeMap, edge_from_features, edge_score, refine_all, refine_box
from invcascade.synth import synth_videos
from invcascade.tubes import FrameProposals, GroundTruthTube, best_path, extract_tubes, tube_overlap
from invcascade.windowing import DEFAULT_ALPHA_GRID, select_shapes
from oracles import exhaustive_best_path, greedy_shapes, loop_mean, loop_pyramid, quadratic_nms

pytestmark = pytest.mark.acceptance


def report(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d} [{name}]: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_c01_pooling_oracle():
    rng = np.random.default_rng(101)
    worst, elapsed = 0.0, 0.0
    for _ in range(1000):
        c, h, w = int(rng.integers(1, 9)), int(rng.integers(1, 65)), int(rng.integers(1, 65))
        data = rng.normal(size=(c, h, w))
        x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))
        x1, y1 = int(rng.integers(x0 + 1, w + 1)), int(rng.integers(y0 + 1, h + 1))
        levels = tuple(g for g in (1, 2, 4) if g <= min(x1 - x0, y1 - y0))
        t0 = time.perf_counter()
        ii = build_integral(FeatureMap(data))
        mean = avg_pool(ii, Box(x0, y0, x1, y1))
        pyr = pyramid_pool(ii, Box(x0, y0, x1, y1), PyramidSpec(levels))
        elapsed += time.perf_counter() - t0
        for got, ref in ((mean, loop_mean(data, (x0, y0, x1, y1))),
                         (pyr, loop_pyramid(data, (x0, y0, x1, y1), levels))):
            err = np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12)
            worst = max(worst, float(np.max(np.where(np.abs(ref) > 1e-9, err, np.abs(got - ref)))))
    report(1, "pooling oracle", worst <= 1e-5 and elapsed < 5,
           f"max rel err {worst:.2e}, {elapsed:.2f} s")


def test_c02_nms_oracle():
    rng = np.random.default_rng(102)
    mismatches, elapsed = 0, 0.0
    for _ in range(100):
        xy = rng.uniform(0, 200, (500, 2))
        boxes = np.hstack([xy, xy + rng.uniform(5, 60, (500, 2))])
        scores = np.round(rng.random(500), 2)          # coarse scores force ties
        alpha = float(rng.uniform(0.2, 0.8))
        t0 = time.perf_counter()
        keep = nms(boxes, scores, alpha)
        elapsed += time.perf_counter() - t0
        mismatches += set(keep) != set(quadratic_nms(boxes, scores, alpha))
    report(2, "NMS oracle", mismatches == 0 and elapsed < 5,
           f"{mismatches} mismatches on 100 x 500 boxes, {elapsed:.2f} s")


def test_c03_greedy_shape_selection():
    mismatches, elapsed = 0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x0, y0 = rng.uniform(0, 30, (2, 30))
        w, h = rng.uniform(0.5, 6, (2, 30))
        gt = np.stack([x0, y0, x0 + w, y0 + h], axis=1)
        t0 = time.perf_counter()
        bank = select_shapes(gt, pool_bound=5, k=3)
        elapsed += time.perf_counter() - t0
        mismatches += [(s.w, s.h) for s in bank.shapes] != greedy_shapes(gt, 5, 3,
                                                                         DEFAULT_ALPHA_GRID)
    report(3, "greedy shape selection", mismatches == 0 and elapsed < 10,
           f"{mismatches}/20 seeds differ, {elapsed:.2f} s")


def test_c04_viterbi_oracle():
    rng = np.random.default_rng(104)
    bad = infeasible = 0
    elapsed = 0.0
    for _ in range(200):
        T = int(rng.integers(1, 7))
        frames = []
        for t in range(T):
            n = int(rng.integers(1, 6))
            xy = rng.integers(0, 6, (n, 2)).astype(float)
            frames.append(FrameProposals(t, np.hstack([xy, xy + rng.integers(4, 10, (n, 2))]),
                                         rng.random(n)))
        ref = exhaustive_best_path([(f.boxes, f.confidences) for f in frames])
        t0 = time.perf_counter()
        tube = best_path(frames)
        elapsed += time.perf_counter() - t0
        if ref is None:
            infeasible += 1
            bad += tube is not None
        else:
            bad += tube is None or abs(tube.path_score - ref) > 1e-9
    report(4, "Viterbi oracle", bad == 0 and infeasible > 0 and elapsed < 10,
           f"{bad} mismatches, {infeasible} infeasible instances, {elapsed:.2f} s")


def test_c05_cascade_budgets(fitted_cascade, small_synth):
    violations = 0
    for s in small_synth:
        res = fitted_cascade.propose(s.maps)
        c = res.counts
        violations += not (c["S1"] <= 4000 and c["S2"] <= 3000 and c["final"] <= 1000)
        for p in res.stage2:
            violations += not np.array_equal(res.stage1[p.scale_id].boxes[p.origin], p.cell_box)
    report(5, "cascade budgets and provenance", violations == 0,
           f"{len(small_synth)} images, {violations} violations")


def test_c06_refinement():
    rng = np.random.default_rng(106)
    t0 = time.perf_counter()
    drops = 0
    for _ in range(1000):
        em = EdgeMap(rng.random((24, 24)) ** 3)
        x0, y0 = (int(v) for v in rng.integers(0, 12, 2))
        start = Box(x0, y0, int(rng.integers(x0 + 2, 25)), int(rng.integers(y0 + 2, 25)))
        _, s = refine_box(em, start)
        drops += s < edge_score(em, start)
    before, after = [], []
    for _ in range(100):
        w, h = (int(v) for v in rng.integers(12, 36, 2))
        x0, y0 = int(rng.integers(2, 62 - w)), int(rng.integers(2, 62 - h))
        d = np.zeros((1, 64, 64))
        d[0, y0:y0 + h, x0:x0 + w] = 1.0
        em = edge_from_features(FeatureMap(d + rng.normal(0, 0.05, d.shape)))
        gt = np.array([[x0, y0, x0 + w, y0 + h]], float)
        start = np.clip(np.rint(gt + rng.uniform(-0.25, 0.25, 4) * [w, h, w, h]), 0, 64)
        refined, _ = refine_all(em, start)
        before.append(iou_matrix(start, gt)[0, 0])
        after.append(iou_matrix(refined, gt)[0, 0])
    elapsed = time.perf_counter() - t0
    ok = drops == 0 and np.mean(after) > np.mean(before) and elapsed < 30
    report(6, "refinement", ok, f"{drops} score drops, mean IoU {np.mean(before):.3f} -> "
                                f"{np.mean(after):.3f}, {elapsed:.1f} s")


def _cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, argv


def test_c07_end_to_end_recall(tmp_path):
    t0 = time.perf_counter()
    d = tmp_path
    ann, ten = d / "data" / "annotations.json", d / "data" / "tensors"
    _cli("synth", "--seed", 1, "--images", 50, "--out", d / "data")
    _cli("select-windows", "--annotations", ann, "--tensors", ten, "--out", d / "bank.json")
    for stage in (1, 2):
        _cli("train", "--tensors", ten, "--annotations", ann, "--bank", d / "bank.json",
             "--stage", stage, "--out", d / "models")
    _cli("propose", "--tensors", ten, "--bank", d / "bank.json", "--models", d / "models",
         "--annotations", ann, "--out", d / "p.csv")
    recall = {}
    for iou in (0.5, 0.7):
        out = d / f"r{iou}.csv"
        _cli("eval-recall", "--proposals", d / "p.csv", "--annotations", ann, "--iou", iou,
             "--budgets", 100, "--out", out)
        rows = list(csv.reader(open(out)))
        recall[iou] = float(rows[1][1])
    elapsed = time.perf_counter() - t0
    ok = recall[0.5] >= 0.90 and recall[0.7] >= 0.75 and elapsed < 120
    report(7, "end-to-end synthetic recall", ok,
           f"recall@100 {recall[0.5]:.3f} at IoU 0.5, {recall[0.7]:.3f} at IoU 0.7, "
           f"{elapsed:.1f} s")


def test_c08_tube_pipeline():
    t0 = time.perf_counter()
    rng = np.random.default_rng(108)
    # constructed two-track videos: planted tracks plus jitter and roaming distractors
    overlaps, counts = [], []
    for video in synth_videos(21, 3, n_frames=20, actors=2):
        frames = []
        for t in range(20):
            tracks = video.tracks[:, t] + rng.uniform(-1, 1, (2, 4))
            xy = rng.uniform(0, 140, (3, 2))
            distract = np.hstack([xy, xy + rng.uniform(4, 12, (3, 2))])
            frames.append(FrameProposals(t, np.vstack([tracks, distract]),
                                         np.r_[0.9, 0.8, rng.random(3) * 0.5]))
        tubes = extract_tubes(frames, max_tubes=10)
        counts.append(len(tubes))
        for track in video.tracks:
            g = GroundTruthTube([Box(*b) for b in track])
            overlaps.append(max(tube_overlap(tb, g) for tb in tubes))
    # frame recall of the cascade on synthetic videos, tuned for IoU 0.7
    videos = synth_videos(22, 3, n_frames=20, actors=2)
    frames = [early_fusion(f, {"L5": "F5", "L3": "F3"}) for v in videos for f in v.frames]
    gts = [v.tracks[:, t] for v in videos for t in range(len(v.frames))]
    est = ProposalCascade(beta=0.7, n_shapes=20).fit(frames, gts)
    boxes = [est.propose(f).boxes() for f in frames]
    rec = frame_recall(boxes, [list(g) for g in gts], 100, 0.7)
    elapsed = time.perf_counter() - t0
    ok = all(c == 2 for c in counts) and min(overlaps) >= 0.9 and rec >= 0.95 and elapsed < 60
    report(8, "tube pipeline", ok,
           f"tubes per video {counts}, min Ovr {min(overlaps):.3f}, frame recall@100 "
           f"IoU 0.7 {rec:.3f}, {elapsed:.1f} s")


def _run_all(root):
    ann, ten = root / "data" / "annotations.json", root / "data" / "tensors"
    _cli("synth", "--seed", 9, "--images", 6, "--videos", 1, "--frames", 6, "--out", root / "data")
    _cli("select-windows", "--annotations", ann, "--tensors", ten, "--count", 20,
         "--out", root / "bank.json")
    for stage in (1, 2):
        _cli("train", "--tensors", ten, "--annotations", ann, "--bank", root / "bank.json",
             "--stage", stage, "--seed", 4, "--out", root / "models")
    _cli("propose", "--tensors", ten, "--bank", root / "bank.json", "--models", root / "models",
         "--annotations", ann, "--out", root / "p.csv")
    _cli("link-tubes", "--proposals", root / "p.csv", "--annotations", ann,
         "--out", root / "tubes.json")


def test_c09_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _run_all(a)
    _run_all(b)
    models = sorted(p.name for p in (a / "models").iterdir())
    same_models = all(filecmp.cmp(a / "models" / m, b / "models" / m, shallow=False)
                      for m in models)
    same_csv = filecmp.cmp(a / "p.csv", b / "p.csv", shallow=False)
    same_tubes = filecmp.cmp(a / "tubes.json", b / "tubes.json", shallow=False)
    n_tubes = len(json.loads((a / "tubes.json").read_text())["videos"][0]["tubes"])
    report(9, "determinism", same_models and same_csv and same_tubes and n_tubes > 0,
           f"{len(models)} model files, proposals and {n_tubes} tubes bitwise equal: "
           f"{same_models and same_csv and same_tubes}")


def test_c10_metric_self_consistency():
    worst, monotone = 0.0, True
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        props, gts = [], []
        for _ in range(5):
            g = rng.integers(0, 40, (int(rng.integers(1, 4)), 2)).astype(float)
            gts.append(np.hstack([g, g + rng.integers(5, 20, g.shape)]))
            p = rng.integers(0, 40, (int(rng.integers(0, 30)), 2)).astype(float)
            props.append(np.hstack([p, p + rng.integers(5, 20, p.shape)]))
        auc = auc_and_budgets(props, gts, k=20)[0]
        worst = max(worst, abs(auc - recall_vs_iou(props, gts, 20, AUC_GRID).recall.mean()))
        by_k = [recall_at(props, gts, k, 0.5) for k in range(0, 31)]
        by_t = [recall_at(props, gts, 20, t) for t in np.linspace(0, 1, 21)]
        monotone &= all(x <= y for x, y in zip(by_k, by_k[1:]))
        monotone &= all(x >= y for x, y in zip(by_t, by_t[1:]))
    report(10, "metric self-consistency", worst <= 0.005 and monotone,
           f"max |AUC - grid mean| {worst:.4f}, monotone on 50 fixtures: {monotone}")
