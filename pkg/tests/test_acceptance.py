"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a single PASS/FAIL line; the lines are printed together
at the end of the pytest run (see conftest.pytest_terminal_summary).
"""
import json
import math
import time

import numpy as np
import pytest

from panoptrack.cli import CliConfig, cmd_track
from panoptrack.core import (
    PanopticMap,
    RleMask,
    Sequence,
    kitti_step_classes,
    rle_decode,
    rle_encode,
    sequence_tracks,
)
from panoptrack.io import (
    DetectionsFile,
    detections_from_doc,
    detections_to_doc,
    read_detections,
    read_panoptic_png,
    read_sequence_dir,
    write_class_table,
    write_detections,
    write_panoptic_png,
    write_sequence_dir,
)
from panoptrack.metrics import (
    compute_aq,
    compute_pat,
    compute_stq,
    compute_tq,
    evaluate_sequence,
    ignore_masks_of,
)
from panoptrack.sim import (
    SimConfig,
    drop_detections,
    generate_sequence,
    make_rng,
    perturb_ids,
    perturb_masks,
    sim_detections,
)
from panoptrack.tracker import Detection, TrackerConfig, fuse_logits

from conftest import ACCEPTANCE_LOG
from oracles import oracle_tracks

pytestmark = pytest.mark.acceptance

HEADLINE = ("pq", "sq", "aq", "stq", "tq", "pat")


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LOG.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------------ 1

def test_table_arithmetic():
    cases = [
        ("pat", compute_pat(0.5904, 0.7033), 0.6420),
        ("pat", compute_pat(0.5666, 0.6674), 0.6129),
        ("stq", compute_stq(0.6947, 0.8180), 0.7538),
        ("stq", compute_stq(0.7195, 0.7474), 0.7333),
    ]
    worst = max(abs(got - want) for _, got, want in cases)
    detail = ", ".join(f"{k}={got:.6f} (want {want})" for k, got, want in cases)
    record("table-arithmetic", worst <= 1e-4, f"{detail}; max error {worst:.2e} <= 1e-4")


# ------------------------------------------------------------------ 2

def test_perfect_identity():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(1, 26):
        gt = generate_sequence(SimConfig(seed=seed, frames=10, max_objects=6, width=128, height=64)).gt
        h = evaluate_sequence(gt, gt).headline()
        worst = max(worst, max(abs(h[k] - 1.0) for k in HEADLINE))
    elapsed = time.perf_counter() - start
    record("perfect-identity", worst <= 1e-9 and elapsed < 5.0,
           f"25 seeds, max |metric - 1| = {worst:.1e} (<= 1e-9), {elapsed:.2f}s (< 5s)")


# ------------------------------------------------------------------ 3

def _oracle_case(case):
    """Deterministic (gt, pred, same_class) for fixture number ``case``."""
    rng = make_rng(case, 99)
    cfg = SimConfig(
        width=int(rng.integers(8, 33)), height=int(rng.integers(8, 33)),
        frames=int(rng.integers(1, 6)), min_objects=0, max_objects=4,
        min_size=3, max_size=8, max_speed=3, min_visible_area=int(rng.integers(1, 10)),
        occlusion_prob=float(rng.choice([0.0, 0.2, 0.5])), seed=case,
    )
    out = generate_sequence(cfg)
    gt = out.gt
    if rng.random() < 0.3:  # paint an ignore patch over the ground truth
        frames = []
        for f in gt.frames:
            c, i = f.class_of.copy(), f.instance_of.astype(np.int64)
            y, x = int(rng.integers(0, cfg.height)), int(rng.integers(0, cfg.width))
            c[y:y + 5, x:x + 5] = 255
            i[y:y + 5, x:x + 5] = 0
            frames.append(PanopticMap(c, i))
        gt = Sequence(frames, gt.class_table)
    kind = case % 6
    if kind == 0:
        pred = gt
    elif kind == 1:
        n_cuts = sum(len(tr.frames) - 1 for tr in out.gt_tracks)
        pred = perturb_ids(out.gt, int(rng.integers(0, n_cuts + 1)), seed=case)
    elif kind == 2:
        pred = perturb_masks(out.gt, int(rng.integers(1, 3)))
    elif kind == 3:
        pred = drop_detections(out.gt, 0.4, seed=case)
    elif kind == 4:  # an unrelated sequence of the same size
        pred = generate_sequence(SimConfig(**{**cfg.__dict__, "seed": case + 100_000})).gt
    else:
        eroded = perturb_masks(out.gt, 1)
        n_cuts = sum(len(tr.frames) - 1 for tr in sequence_tracks(eroded))
        pred = drop_detections(perturb_ids(eroded, min(2, n_cuts), seed=case), 0.2, case)
    return gt, pred, bool(rng.random() < 0.3)


def test_oracle_equivalence():
    start = time.perf_counter()
    n_cases, worst, bad = 0, 0.0, []
    for case in range(600):
        gt, pred, same_class = _oracle_case(case)
        tracks = sequence_tracks(gt)
        ignore = ignore_masks_of(gt)
        aq = compute_aq(tracks, pred, same_class, ignore)
        tq, scores = compute_tq(tracks, pred, same_class, ignore)
        rep = evaluate_sequence(gt, pred, same_class=same_class)
        per, o_aq, o_tq = oracle_tracks(gt, pred, same_class=same_class)
        errs = [abs(aq - o_aq), abs(tq - o_tq), abs(rep.aq - o_aq), abs(rep.tq - o_tq)]
        for s in scores:
            o_as, o_ids, o_n, o_tqg = per[s.track_id]
            errs += [abs(s.as_score - o_as), abs(s.tq_g - o_tqg), abs(s.ids - o_ids), abs(s.n_ids - o_n)]
        err = max(errs)
        worst = max(worst, err)
        if err > 1e-9:
            bad.append(case)
        n_cases += 1
    elapsed = time.perf_counter() - start
    ok = not bad and n_cases >= 500 and elapsed < 30.0
    record("oracle-equivalence", ok,
           f"{n_cases} cases, max error {worst:.1e} (<= 1e-9), failing {bad[:5]}, {elapsed:.1f}s (< 30s)")


# ------------------------------------------------------------------ 4

def test_perturbation_monotonicity():
    problems = []
    for seed in (1, 2, 3, 4, 5):
        gt = generate_sequence(SimConfig(seed=seed, min_objects=3)).gt
        reps = [evaluate_sequence(gt, perturb_ids(gt, k, seed=seed)) for k in range(6)]
        tqs, aqs = [r.tq for r in reps], [r.aq for r in reps]
        if any(b > a for a, b in zip(tqs, tqs[1:])) or not tqs[1] < tqs[0]:
            problems.append(f"seed {seed} tq {tqs}")
        if any(b > a for a, b in zip(aqs, aqs[1:])) or not aqs[1] < aqs[0]:
            problems.append(f"seed {seed} aq {aqs}")
        if len({r.pq for r in reps}) != 1 or len({r.sq for r in reps}) != 1:
            problems.append(f"seed {seed} pq/sq changed")

        eroded = [evaluate_sequence(gt, perturb_masks(gt, e)) for e in range(3)]
        sq = [r.sq for r in eroded]
        pq = [r.pq for r in eroded]
        mean_as = [np.mean([s.as_score for s in r.track_scores]) for r in eroded]
        for name, vals in (("sq", sq), ("pq", pq), ("mean AS", mean_as)):
            if not vals[0] > vals[1] > vals[2]:
                problems.append(f"seed {seed} erosion {name} {vals}")
    record("perturbation-monotonicity", not problems,
           "seeds 1-5: k=0..5 switches and erosion 0..2" + (f"; {problems}" if problems else ""))


# ------------------------------------------------------------------ 5

def _run_track(tmp, name, out, det_kw, tracker_cfg):
    table = out.gt.class_table
    gt_dir = tmp / "gt" / name
    write_sequence_dir(out.gt, gt_dir)
    write_class_table(table, tmp / "gt" / "class_table.json")
    det_path = tmp / f"{name}.json"
    cfg = out.config
    write_detections(DetectionsFile(cfg.width, cfg.height, sim_detections(out, **det_kw), cfg.embedding_dim), det_path)
    pred_dir = tmp / "pred" / name
    cmd_track(str(det_path), str(gt_dir), CliConfig(tracker=tracker_cfg), str(pred_dir))
    pred, _ = read_sequence_dir(pred_dir, table)
    return evaluate_sequence(out.gt, pred)


def test_tracker_end_to_end(tmp_path):
    tcfg = TrackerConfig()
    scenarios = {
        "clean": {},
        "identical-embeddings": {"shared_embedding": True},
        "zero-offsets": {"offsets": "zero", "propagated": False},
    }
    start = time.perf_counter()
    worst = {}
    for seed in range(1, 11):
        # base embeddings pairwise cosine <= sim_min - 0.3
        out = generate_sequence(SimConfig(seed=seed, max_embedding_similarity=tcfg.sim_min - 0.3))
        for label, kw in scenarios.items():
            rep = _run_track(tmp_path / label, f"seq_{seed:03d}", out, kw, tcfg)
            keys = ("tq", "pat") if label == "clean" else ("tq",)
            err = max(abs(getattr(rep, k) - 1.0) for k in keys)
            worst[label] = max(worst.get(label, 0.0), err)
    elapsed = time.perf_counter() - start
    ok = all(v <= 1e-9 for v in worst.values()) and elapsed < 10.0
    detail = ", ".join(f"{k} max|1-x|={v:.1e}" for k, v in worst.items())
    record("tracker-end-to-end", ok, f"seeds 1-10 via cmd_track: {detail}; {elapsed:.2f}s (< 10s)")


# ------------------------------------------------------------------ 6

def test_fusion_formula():
    rng = np.random.default_rng(0)
    a = rng.uniform(-6, 6, 1000)
    b = rng.uniform(-6, 6, 1000)
    a[:4], b[:4] = [-6, 6, 0, -6], [-6, 6, 0, 6]
    fused = fuse_logits(a, b)

    def sig(x):
        return 1.0 / (1.0 + math.exp(-x))

    scalar = np.array([(sig(x) + sig(y)) * (x + y) for x, y in zip(a, b)])
    err = float(np.max(np.abs(fused - scalar)))
    symmetric = np.array_equal(fused, fuse_logits(b, a))
    record("fusion-formula", err <= 1e-9 and symmetric,
           f"1000 points in [-6,6]^2, max error {err:.1e} (<= 1e-9), exactly symmetric: {symmetric}")


# ------------------------------------------------------------------ 7

def _random_detections(rng, table):
    w, h = int(rng.integers(1, 20)), int(rng.integers(1, 20))
    dim = int(rng.integers(1, 6)) if rng.random() < 0.7 else None
    frames = []
    for t in range(int(rng.integers(0, 4))):
        dets = []
        for _ in range(int(rng.integers(0, 4))):
            mask = rng.random((h, w)) < 0.4
            mask.flat[int(rng.integers(0, mask.size))] = True
            kw = {}
            if dim is not None:
                kw["embedding"] = rng.standard_normal(dim) * 10 ** rng.uniform(-5, 5)
            if rng.random() < 0.5:
                kw["offset"] = tuple(int(v) for v in rng.integers(-50, 51, 2))
            if t > 0 and frames[-1] and rng.random() < 0.5:
                kw["propagated_mask"] = rng.random((h, w)) < 0.5
                kw["propagated_from"] = int(rng.integers(0, len(frames[-1])))
            dets.append(Detection(mask, int(rng.choice(table.thing_ids)), float(rng.random()), **kw))
        frames.append(dets)
    return DetectionsFile(w, h, frames, dim)


def _same_detections(a, b):
    if (a.width, a.height, a.embedding_dim, len(a.frames)) != (b.width, b.height, b.embedding_dim, len(b.frames)):
        return False
    for fa, fb in zip(a.frames, b.frames):
        if len(fa) != len(fb):
            return False
        for x, y in zip(fa, fb):
            if not np.array_equal(x.mask, y.mask) or (x.class_id, x.score, x.offset, x.propagated_from) != (
                    y.class_id, y.score, y.offset, y.propagated_from):
                return False
            if (x.embedding is None) != (y.embedding is None):
                return False
            if x.embedding is not None and not np.array_equal(x.embedding, y.embedding):
                return False
            if (x.propagated_mask is None) != (y.propagated_mask is None):
                return False
            if x.propagated_mask is not None and not np.array_equal(x.propagated_mask, y.propagated_mask):
                return False
    return True


def test_format_roundtrips(tmp_path):
    rng = np.random.default_rng(2024)
    table = kitti_step_classes()
    failures = {"png": 0, "detections": 0, "rle": 0}
    for n in range(1000):
        h, w = int(rng.integers(1, 24)), int(rng.integers(1, 24))
        pm = PanopticMap(rng.integers(0, 256, (h, w)), rng.integers(0, 65536, (h, w)))
        p = tmp_path / "f.png"
        write_panoptic_png(pm, p)
        failures["png"] += read_panoptic_png(p) != pm

        d = _random_detections(rng, table)
        dp = tmp_path / "d.json"
        write_detections(d, dp)
        back = read_detections(dp)
        in_memory = detections_from_doc(json.loads(json.dumps(detections_to_doc(d))))
        failures["detections"] += not (_same_detections(d, back) and _same_detections(d, in_memory))

        mask = rng.random((h, w)) < rng.uniform(0, 1)
        rle = rle_encode(mask)
        again = RleMask(rle.width, rle.height, list(rle.runs))
        failures["rle"] += not (np.array_equal(rle_decode(again), mask) and rle_encode(rle_decode(rle)) == rle)
    record("format-roundtrips", not any(failures.values()),
           f"1000 fixtures each, failures {failures}")


# ------------------------------------------------------------------ 8

def test_performance():
    cfg = SimConfig(width=1242, height=375, frames=100, min_objects=20, max_objects=20,
                    min_size=20, max_size=120, max_speed=8, seed=7)
    out = generate_sequence(cfg)
    pred = perturb_ids(out.gt, 10, seed=7)
    n_classes = len(out.gt.class_table.evaluated_ids)
    start = time.perf_counter()
    rep = evaluate_sequence(out.gt, pred)
    elapsed = time.perf_counter() - start
    max_inst = max(len(np.unique(f.instance_of)) - 1 for f in out.gt.frames)
    record("performance", elapsed < 10.0 and max_inst <= 20 and n_classes == 19,
           f"100 frames 1242x375, {n_classes} classes, <= {max_inst} instances/frame: "
           f"{elapsed:.2f}s (< 10s), pat={rep.pat:.4f}")
