"""Panoptic tracking metrics: PQ, SQ, AQ, STQ, AS, TQ and PAT.

Two routes are provided.  The track-level functions (``compute_as``,
``compute_aq``, ``count_id_switches``, ``compute_tq``) take explicit
:class:`~panoptrack.core.Track` objects and are easy to audit.
:func:`evaluate_sequence` computes everything from one contingency table per
frame and never materialises per-track masks, which is what makes full-size
sequences cheap.

Conventions
-----------
* Pixels whose ground-truth class is the table's ``ignore_id`` take part in
  no intersection or union.
* IoU of two empty masks is 0.
* Predicted ID-tubes are keyed by ``(class_id, instance_id)``.
"""
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .core import (
    Track,
    check_compatible,
    compact_keys,
    label_keys,
)
from .exceptions import InvariantViolation, MalformedInputError
from .validation import check_unit_interval

MATCH_IOU = 0.5


# ----------------------------------------------------------------- combiners

def compute_pat(pq, tq):
    """Harmonic mean of PQ and TQ (0 when both are 0)."""
    pq = check_unit_interval(pq, "pq")
    tq = check_unit_interval(tq, "tq")
    if pq + tq == 0.0:
        return 0.0
    if pq == tq:
        return pq
    return 2.0 * pq * tq / (pq + tq)


def compute_stq(aq, sq):
    """Geometric mean of AQ and SQ."""
    aq = check_unit_interval(aq, "aq")
    sq = check_unit_interval(sq, "sq")
    if aq == sq:
        return aq
    return math.sqrt(aq * sq)


def track_quality(ids, n_ids, as_score):
    """Per-track TQ: sqrt((1 - IDS/N_IDS) * AS), with a factor of 1 when N_IDS is 0.

    This is the single place to change if another reading of the TQ formula
    is wanted.
    """
    if ids < 0 or ids > n_ids:
        raise InvariantViolation(f"ID switches {ids} outside [0, {n_ids}]")
    factor = 1.0 if n_ids == 0 else 1.0 - ids / n_ids
    return math.sqrt(factor * as_score)


# --------------------------------------------------------------- data types

@dataclass
class ClassPq:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ious: List[float] = field(default_factory=list)

    @property
    def iou_sum(self):
        return math.fsum(self.ious)

    @property
    def pq(self):
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou_sum / denom if denom else 0.0

    @property
    def sq(self):
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self):
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom else 0.0

    def merge(self, other):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.ious.extend(other.ious)


@dataclass
class PqStats:
    """Per-class PQ counts.  Averages run over classes with tp+fp+fn > 0."""

    per_class: Dict[int, ClassPq] = field(default_factory=dict)

    def __getitem__(self, class_id):
        return self.per_class.setdefault(class_id, ClassPq())

    def _active(self):
        return [s for _, s in sorted(self.per_class.items()) if s.tp + s.fp + s.fn > 0]

    @property
    def pq(self):
        active = self._active()
        return math.fsum(s.pq for s in active) / len(active) if active else 0.0

    @property
    def sq(self):
        active = self._active()
        return math.fsum(s.sq for s in active) / len(active) if active else 0.0

    @property
    def rq(self):
        active = self._active()
        return math.fsum(s.rq for s in active) / len(active) if active else 0.0

    def merge(self, other):
        for cid, s in other.per_class.items():
            self[cid].merge(s)
        return self


@dataclass
class SqStats:
    """Per-class pixel intersection and union accumulated over frames."""

    inter: Dict[int, int] = field(default_factory=dict)
    union: Dict[int, int] = field(default_factory=dict)
    gt_pixels: Dict[int, int] = field(default_factory=dict)

    @property
    def per_class(self):
        return {
            c: (self.inter.get(c, 0) / self.union[c] if self.union[c] else 0.0)
            for c in sorted(self.gt_pixels)
            if self.gt_pixels[c] > 0
        }

    @property
    def mean(self):
        ious = list(self.per_class.values())
        return math.fsum(ious) / len(ious) if ious else 0.0

    def merge(self, other):
        for name in ("inter", "union", "gt_pixels"):
            mine, theirs = getattr(self, name), getattr(other, name)
            for c, v in theirs.items():
                mine[c] = mine.get(c, 0) + v
        return self


@dataclass
class TrackScore:
    track_id: int
    class_id: int
    as_score: float
    ids: int
    n_ids: int
    tq_g: float
    pixels: int = 0


@dataclass
class MetricReport:
    pq_stats: PqStats
    sq_stats: SqStats
    aq: float
    track_scores: List[TrackScore]
    frames: int
    gt_tracks: int
    pred_tracks: int
    aq_vacuous: bool = False
    tq_vacuous: bool = False

    @property
    def pq(self):
        return self.pq_stats.pq

    @property
    def sq(self):
        return self.sq_stats.mean

    @property
    def stq(self):
        return compute_stq(self.aq, self.sq)

    @property
    def tq(self):
        if not self.track_scores:
            return 1.0
        return math.fsum(s.tq_g for s in self.track_scores) / len(self.track_scores)

    @property
    def pat(self):
        return compute_pat(self.pq, self.tq)

    def headline(self):
        return {
            "pq": self.pq, "sq": self.sq, "aq": self.aq,
            "stq": self.stq, "tq": self.tq, "pat": self.pat,
        }

    def check(self):
        """Assert the internal consistency relations hold exactly."""
        h = self.headline()
        for name, v in h.items():
            if not 0.0 <= v <= 1.0:
                raise InvariantViolation(f"{name}={v} outside [0, 1]")
        if not math.isclose(h["stq"], math.sqrt(h["aq"] * h["sq"]), rel_tol=1e-15, abs_tol=1e-300):
            raise InvariantViolation("stq != sqrt(aq * sq)")
        pat = 0.0 if h["pq"] + h["tq"] == 0 else 2 * h["pq"] * h["tq"] / (h["pq"] + h["tq"])
        if not math.isclose(h["pat"], pat, rel_tol=1e-15, abs_tol=1e-300):
            raise InvariantViolation("pat is not the harmonic mean of pq and tq")
        for s in self.track_scores:
            if not 0 <= s.ids <= s.n_ids:
                raise InvariantViolation(f"track {s.track_id}: ids outside [0, n_ids]")
        return self

    def to_dict(self):
        return {
            "headline": self.headline(),
            "counts": {
                "frames": self.frames,
                "gt_tracks": self.gt_tracks,
                "pred_tracks": self.pred_tracks,
            },
            "flags": {"aq_vacuous": self.aq_vacuous, "tq_vacuous": self.tq_vacuous},
            "pq_per_class": {
                str(c): {
                    "pq": s.pq, "sq": s.sq, "rq": s.rq,
                    "tp": s.tp, "fp": s.fp, "fn": s.fn, "iou_sum": s.iou_sum,
                }
                for c, s in sorted(self.pq_stats.per_class.items())
            },
            "sq_per_class": {
                str(c): {
                    "iou": iou,
                    "intersection": self.sq_stats.inter.get(c, 0),
                    "union": self.sq_stats.union[c],
                }
                for c, iou in self.sq_stats.per_class.items()
            },
            "tracks": [
                {
                    "track_id": s.track_id, "class_id": s.class_id, "as": s.as_score,
                    "ids": s.ids, "n_ids": s.n_ids, "tq": s.tq_g, "pixels": s.pixels,
                }
                for s in self.track_scores
            ],
        }


# ------------------------------------------------------- per-frame tables

class FrameTable:
    """Contingency table between the segments of a GT and a predicted frame.

    Rows are GT labels, columns predicted labels, each label a
    (class_id, instance_id) pair; ``inter[i, j]`` counts shared pixels.
    ``void[j]`` counts pixels of predicted label j lying on GT ignore pixels.
    """

    def __init__(self, gt_frame, pred_frame, class_table):
        gk, gs = compact_keys(gt_frame)
        pk, ps = compact_keys(pred_frame)
        gu, ginv, gcnt = label_keys(gk)
        pu, pinv, pcnt = label_keys(pk)
        n_g, n_p = len(gu), len(pu)
        joint = np.bincount(ginv * n_p + pinv, minlength=n_g * n_p)
        self.inter = joint.reshape(n_g, n_p)
        self.gt_class, self.gt_inst = np.divmod(gu, gs)
        self.pred_class, self.pred_inst = np.divmod(pu, ps)
        self.gt_area = gcnt
        ignore = class_table.ignore_id
        gt_ignore = self.gt_class == ignore if ignore is not None else np.zeros(n_g, bool)
        self.void = self.inter[gt_ignore].sum(axis=0)
        self.gt_ignore = gt_ignore
        self.pred_ignore = self.pred_class == ignore if ignore is not None else np.zeros(n_p, bool)
        # predicted area on evaluated (non-ignore) GT pixels
        self.pred_area = pcnt - self.void
        thing = class_table.thing_lut()
        self.gt_tube = thing[self.gt_class] & (self.gt_inst > 0)
        self.pred_tube = thing[self.pred_class] & (self.pred_inst > 0)

    def pair_iou(self):
        """IoU for every (gt, pred) label pair, ignore pixels excluded."""
        union = self.gt_area[:, None] + self.pred_area[None, :] - self.inter
        with np.errstate(divide="ignore", invalid="ignore"):
            iou = np.where(union > 0, self.inter / np.maximum(union, 1), 0.0)
        return iou


def _frame_pq(table, stats):
    iou = table.pair_iou()
    gt_rows = np.flatnonzero(~table.gt_ignore)
    pred_cols = np.flatnonzero(~table.pred_ignore)
    same = table.gt_class[:, None] == table.pred_class[None, :]
    matched = (iou > MATCH_IOU) & same
    matched[table.gt_ignore] = False
    matched[:, table.pred_ignore] = False
    gt_hit = matched.any(axis=1)
    pred_hit = matched.any(axis=0)
    for i, j in zip(*np.nonzero(matched)):
        s = stats[int(table.gt_class[i])]
        s.tp += 1
        s.ious.append(float(iou[i, j]))
    for i in gt_rows:
        if not gt_hit[i]:
            stats[int(table.gt_class[i])].fn += 1
    pred_total = table.pred_area + table.void
    for j in pred_cols:
        if pred_hit[j]:
            continue
        # predictions lying mostly on ignore pixels are not false positives
        if table.void[j] > 0.5 * pred_total[j]:
            continue
        stats[int(table.pred_class[j])].fp += 1


def _frame_sq(table, stats):
    keep = ~table.gt_ignore
    gt_area = defaultdict(int)
    for c, a in zip(table.gt_class[keep], table.gt_area[keep]):
        gt_area[int(c)] += int(a)
    pred_area = defaultdict(int)
    for c, a in zip(table.pred_class, table.pred_area):
        pred_area[int(c)] += int(a)
    inter = defaultdict(int)
    rows, cols = np.nonzero(table.inter * keep[:, None])
    for i, j in zip(rows, cols):
        if table.gt_class[i] == table.pred_class[j]:
            inter[int(table.gt_class[i])] += int(table.inter[i, j])
    for c in set(gt_area) | set(pred_area):
        stats.gt_pixels[c] = stats.gt_pixels.get(c, 0) + gt_area.get(c, 0)
        stats.inter[c] = stats.inter.get(c, 0) + inter.get(c, 0)
        stats.union[c] = stats.union.get(c, 0) + gt_area.get(c, 0) + pred_area.get(c, 0) - inter.get(c, 0)


def _valid_pair(gt_class, pred_class, same_class):
    return (not same_class) or gt_class == pred_class


# --------------------------------------------------------- sequence level

def compute_pq(gt, pred):
    """Panoptic quality accumulated over all frames of a sequence."""
    check_compatible(gt, pred)
    stats = PqStats()
    for g, p in zip(gt.frames, pred.frames):
        _frame_pq(FrameTable(g, p, gt.class_table), stats)
    return stats


def compute_sq(gt, pred):
    """Per-class IoU of pixel sets over the whole sequence and its mean.

    The mean runs over classes with ground-truth pixels.
    """
    check_compatible(gt, pred)
    stats = SqStats()
    ignore = gt.class_table.ignore_id
    for g, p in zip(gt.frames, pred.frames):
        _frame_sq(FrameTable(g, p, gt.class_table), stats)
    for d in (stats.inter, stats.union, stats.gt_pixels):
        d.pop(ignore, None)
    return stats


def prediction_tubes(pred, ignore_masks=None):
    """Predicted ID-tubes of ``pred`` as Track objects keyed by (class, id).

    ``ignore_masks`` (one boolean mask per frame) removes GT-ignore pixels.
    The returned tracks have ``track_id`` equal to the instance id; the class
    lives in ``class_id``.
    """
    thing = pred.class_table.thing_lut()
    tubes = {}
    for t, frame in enumerate(pred.frames):
        keys, stride = compact_keys(frame)
        uniq, inverse, _ = label_keys(keys)
        inverse = inverse.reshape(frame.shape)
        for idx, key in enumerate(uniq):
            class_id, inst = divmod(int(key), stride)
            if inst == 0 or not thing[class_id]:
                continue
            mask = inverse == idx
            if ignore_masks is not None:
                mask &= ~ignore_masks[t]
            tube = tubes.setdefault((class_id, inst), Track(inst, class_id))
            tube.masks[t] = mask
    return [tubes[k] for k in sorted(tubes)]


def ignore_masks_of(seq):
    ignore = seq.class_table.ignore_id
    if ignore is None:
        return None
    return [f.class_of == ignore for f in seq.frames]


def compute_as(g, pred_tubes, same_class=False):
    """Association score of one GT track against predicted ID-tubes."""
    size = g.area
    if size == 0:
        raise MalformedInputError(f"track {g.track_id} is empty")
    terms = []
    for p in pred_tubes:
        if not _valid_pair(g.class_id, p.class_id, same_class):
            continue
        inter = 0
        for t, gm in g.masks.items():
            pm = p.masks.get(t)
            if pm is not None:
                inter += int(np.count_nonzero(gm & pm))
        if inter == 0:
            continue
        union = size + p.area - inter
        terms.append(inter * (inter / union))
    return math.fsum(terms) / size


def compute_aq(gt_tracks, pred, same_class=False, ignore_masks=None):
    """Mean association score over GT tracks (1.0 when there are none)."""
    if not gt_tracks:
        return 1.0
    tubes = prediction_tubes(pred, ignore_masks)
    return math.fsum(compute_as(g, tubes, same_class) for g in gt_tracks) / len(gt_tracks)


def _frame_matches(g, pred, same_class, ignore_masks):
    """Matched predicted (class, id) per frame of ``g`` at IoU > 0.5, or None."""
    thing = pred.class_table.thing_lut()
    out = {}
    for t, gm in g.masks.items():
        frame = pred.frames[t]
        keys, stride = compact_keys(frame)
        valid = np.ones(frame.shape, bool) if ignore_masks is None else ~ignore_masks[t]
        uniq, inverse, counts = label_keys(keys[valid])
        overlap = np.bincount(inverse[gm[valid].ravel()], minlength=len(uniq))
        g_area = int(np.count_nonzero(gm))
        out[t] = None
        for idx, key in enumerate(uniq):
            class_id, inst = divmod(int(key), stride)
            if inst == 0 or not thing[class_id] or not _valid_pair(g.class_id, class_id, same_class):
                continue
            inter = int(overlap[idx])
            union = g_area + int(counts[idx]) - inter
            if union and inter / union > MATCH_IOU:
                out[t] = (class_id, inst)
                break
    return out


def _switches(matched):
    frames = sorted(matched)
    ids = 0
    for a, b in zip(frames, frames[1:]):
        ma, mb = matched[a], matched[b]
        if ma is None or mb is None or ma != mb:
            ids += 1
    return ids, max(len(frames) - 1, 0)


def count_id_switches(g, pred, same_class=False, ignore_masks=None):
    """Return ``(ids, n_ids)`` for GT track ``g`` against a predicted sequence."""
    if not g.masks:
        raise MalformedInputError(f"track {g.track_id} has no frames")
    return _switches(_frame_matches(g, pred, same_class, ignore_masks))


def compute_tq(gt_tracks, pred, same_class=False, ignore_masks=None):
    """Return ``(tq, track_scores)``; tq is 1.0 (vacuous) with no GT tracks."""
    tubes = prediction_tubes(pred, ignore_masks)
    scores = []
    for g in gt_tracks:
        as_score = compute_as(g, tubes, same_class)
        ids, n_ids = count_id_switches(g, pred, same_class, ignore_masks)
        scores.append(TrackScore(g.track_id, g.class_id, as_score, ids, n_ids,
                                 track_quality(ids, n_ids, as_score), g.area))
    if not scores:
        return 1.0, scores
    return math.fsum(s.tq_g for s in scores) / len(scores), scores


def evaluate_sequence(gt, pred, same_class=False):
    """Compute the full :class:`MetricReport` of ``pred`` against ``gt``."""
    check_compatible(gt, pred)
    table_cls = gt.class_table
    pq_stats = PqStats()
    sq_stats = SqStats()
    gt_size = defaultdict(int)
    gt_class = {}
    pred_size = defaultdict(int)
    tube_inter = defaultdict(int)
    matches = defaultdict(dict)

    for t, (g, p) in enumerate(zip(gt.frames, pred.frames)):
        table = FrameTable(g, p, table_cls)
        _frame_pq(table, pq_stats)
        _frame_sq(table, sq_stats)
        iou = table.pair_iou()
        pred_keys = [(int(c), int(i)) for c, i in zip(table.pred_class, table.pred_inst)]
        for j in np.flatnonzero(table.pred_tube):
            pred_size[pred_keys[j]] += int(table.pred_area[j])
        for i in np.flatnonzero(table.gt_tube):
            gid = int(table.gt_inst[i])
            cls = int(table.gt_class[i])
            if gt_class.setdefault(gid, cls) != cls:
                raise MalformedInputError(
                    f"instance id {gid} appears under classes {gt_class[gid]} and {cls}", f"frame {t}"
                )
            gt_size[gid] += int(table.gt_area[i])
            match = None
            for j in np.flatnonzero(table.pred_tube & (table.inter[i] > 0)):
                if not _valid_pair(cls, pred_keys[j][0], same_class):
                    continue
                tube_inter[gid, pred_keys[j]] += int(table.inter[i, j])
                if iou[i, j] > MATCH_IOU:
                    match = pred_keys[j]
            matches[gid][t] = match

    for d in (sq_stats.inter, sq_stats.union, sq_stats.gt_pixels):
        d.pop(table_cls.ignore_id, None)

    per_gt = defaultdict(list)
    for (gid, pkey), inter in tube_inter.items():
        union = gt_size[gid] + pred_size[pkey] - inter
        per_gt[gid].append(inter * (inter / union))
    scores = []
    for gid in sorted(gt_size):
        as_score = math.fsum(per_gt[gid]) / gt_size[gid]
        ids, n_ids = _switches(matches[gid])
        scores.append(TrackScore(gid, gt_class[gid], as_score, ids, n_ids,
                                 track_quality(ids, n_ids, as_score), gt_size[gid]))
    aq = math.fsum(s.as_score for s in scores) / len(scores) if scores else 1.0
    report = MetricReport(
        pq_stats=pq_stats,
        sq_stats=sq_stats,
        aq=aq,
        track_scores=scores,
        frames=len(gt),
        gt_tracks=len(scores),
        pred_tracks=len(pred_size),
        aq_vacuous=not scores,
        tq_vacuous=not scores,
    )
    return report.check()


@dataclass
class DatasetReport:
    """Cross-sequence aggregate.

    PQ pools segment counts, SQ pools class pixels, AQ is weighted by GT
    thing pixels per sequence and TQ averages over all GT tracks.
    """

    sequences: Dict[str, MetricReport]
    weights = {"pq": "segments", "sq": "pixels", "aq": "gt-thing-pixels", "tq": "tracks"}

    @property
    def pq_stats(self):
        stats = PqStats()
        for r in self.sequences.values():
            stats.merge(r.pq_stats)
        return stats

    @property
    def sq_stats(self):
        stats = SqStats()
        for r in self.sequences.values():
            stats.merge(r.sq_stats)
        return stats

    @property
    def aq(self):
        weighted, total = [], 0
        for r in self.sequences.values():
            pixels = sum(s.pixels for s in r.track_scores)
            weighted.append(r.aq * pixels)
            total += pixels
        if total == 0:
            return 1.0
        return math.fsum(weighted) / total

    @property
    def track_scores(self):
        return [s for r in self.sequences.values() for s in r.track_scores]

    def headline(self):
        pq = self.pq_stats.pq
        sq = self.sq_stats.mean
        aq = self.aq
        scores = self.track_scores
        tq = math.fsum(s.tq_g for s in scores) / len(scores) if scores else 1.0
        return {
            "pq": pq, "sq": sq, "aq": aq, "stq": compute_stq(aq, sq),
            "tq": tq, "pat": compute_pat(pq, tq),
        }
