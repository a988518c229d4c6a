"""Panoptic fusion and two-stage (motion, then appearance) ID association.

Typical online use::

    tracker = PanopticTracker(class_table=kitti_step_classes())
    for detections, logits in frames:
        panoptic = tracker.step(detections, logits)

The functional core is :func:`step_tracker`, which maps an immutable
:class:`TrackerState` to a new one.
"""
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator

from .assignment import assignment_solve
from .core import MAX_INSTANCE_ID, PanopticMap, kitti_step_classes, mask_iou, translate_mask
from .exceptions import DimensionMismatchError, MalformedInputError
from .losses import cosine_similarity
from .validation import check_mask, check_offset, check_same_shape, check_vector


def fuse_logits(ml_a, ml_b):
    """Fused logits ``(sigmoid(a) + sigmoid(b)) * (a + b)``, element-wise."""
    a = np.asarray(ml_a, dtype=np.float64)
    b = np.asarray(ml_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"logit maps differ in shape: {a.shape} vs {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise MalformedInputError("logits must be finite")
    return (expit(a) + expit(b)) * (a + b)


def combine_features(f_a, f_p, w_a, w_p):
    """Motion-enhanced appearance feature ``w_a * f_a + w_p * f_p``."""
    f_a = check_vector(f_a, "f_a")
    f_p = check_vector(f_p, "f_p", length=f_a.shape[0])
    return w_a * f_a + w_p * f_p


def mask_to_logits(mask, scale):
    """Binary mask as logits: +scale inside, -scale outside."""
    return np.where(check_mask(mask), scale, -scale).astype(np.float64)


def semantic_logits_from_classes(class_of, class_table, scale=5.0):
    """One-hot logits (C, H, W) over ``class_table.class_ids`` from a class raster."""
    class_of = np.asarray(class_of)
    ids = np.asarray(class_table.class_ids)
    onehot = class_of[None, :, :] == ids[:, None, None]
    return np.where(onehot, scale, -scale).astype(np.float64)


@dataclass
class Detection:
    """One instance candidate in the current frame.

    ``propagated_mask`` is a previous-frame instance's mask carried forward to
    this frame by the motion head; ``propagated_from`` is that instance's
    index in the previous frame's detection list.  ``offset`` is the
    detection's displacement (dx, dy) since its object was last seen.
    """

    mask: np.ndarray
    class_id: int
    score: float = 1.0
    embedding: Optional[np.ndarray] = None
    propagated_mask: Optional[np.ndarray] = None
    propagated_from: Optional[int] = None
    offset: Optional[Tuple[int, int]] = None
    mask_logits: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mask = check_mask(self.mask)
        if not self.mask.any():
            raise MalformedInputError("detection mask is empty")
        if not 0.0 <= self.score <= 1.0:
            raise MalformedInputError(f"detection score {self.score} outside [0, 1]")
        if self.embedding is not None:
            self.embedding = check_vector(self.embedding, "embedding")
        if (self.propagated_mask is None) != (self.propagated_from is None):
            raise MalformedInputError("propagated_mask and propagated_from must be given together")
        if self.propagated_mask is not None:
            self.propagated_mask = check_mask(self.propagated_mask, "propagated_mask")
            check_same_shape(self.mask, self.propagated_mask, ("mask", "propagated_mask"))
        self.offset = check_offset(self.offset)


@dataclass(frozen=True)
class TrackerConfig:
    iou_min: float = 0.3
    sim_min: float = 0.7
    max_age: int = 12
    history: int = 8
    min_area: int = 32
    embedding_dim: int = 128
    mask_logit: float = 10.0
    semantic_logit: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.iou_min <= 1.0:
            raise MalformedInputError(f"iou_min must lie in (0, 1], got {self.iou_min}")
        if not -1.0 < self.sim_min < 1.0:
            raise MalformedInputError(f"sim_min must lie in (-1, 1), got {self.sim_min}")
        if self.max_age < 0 or self.history < 1 or self.min_area < 0 or self.embedding_dim < 1:
            raise MalformedInputError("max_age, min_area must be >= 0; history, embedding_dim >= 1")


# ---------------------------------------------------------------- fusion

def _resolve(semantic_logits, detections, class_table, min_area, mask_logit):
    logits = np.asarray(semantic_logits, dtype=np.float64)
    ids = class_table.class_ids
    if logits.ndim != 3 or logits.shape[0] != len(ids):
        raise DimensionMismatchError(
            f"semantic logits must have shape ({len(ids)}, H, W), got {logits.shape}"
        )
    shape = logits.shape[1:]
    channel = {c: k for k, c in enumerate(ids)}
    claimed = np.zeros(shape, bool)
    kept = {}
    order = sorted(range(len(detections)), key=lambda k: (-detections[k].score, k))
    for k in order:
        det = detections[k]
        if det.mask.shape != shape:
            raise DimensionMismatchError(f"detection {k} mask shape {det.mask.shape} != {shape}")
        if det.class_id not in channel or not class_table.is_thing(det.class_id):
            raise MalformedInputError(f"detection {k} has non-thing class {det.class_id}")
        ml_b = det.mask_logits if det.mask_logits is not None else mask_to_logits(det.mask, mask_logit)
        fused = fuse_logits(logits[channel[det.class_id]], ml_b)
        region = (fused > 0) & ~claimed
        if np.count_nonzero(region) < max(min_area, 1):
            continue
        claimed |= region
        kept[k] = region

    # unclaimed pixels: semantic argmax, but never a thing class without an instance
    fallback = logits.copy()
    for c in class_table.thing_ids:
        fallback[channel[c]] = -np.inf
    stuff_arg = np.asarray(ids)[np.argmax(fallback, axis=0)]
    class_of = stuff_arg.astype(np.uint8)
    for k, region in kept.items():
        class_of[region] = detections[k].class_id
    return class_of, kept


def resolve_panoptic(semantic_logits, detections, class_table=None, min_area=32, mask_logit=10.0):
    """Combine semantic logits (C, H, W) and thing detections into a PanopticMap.

    Detections claim the pixels where their fused logits are positive, in
    descending score order (ties by list index); a detection left with fewer
    than ``min_area`` pixels is dropped.  Remaining pixels take the best
    non-thing class.  Instance ids are ``detection index + 1``.
    """
    class_table = class_table or kitti_step_classes()
    class_of, kept = _resolve(semantic_logits, detections, class_table, min_area, mask_logit)
    instance_of = np.zeros(class_of.shape, np.int64)
    for k, region in kept.items():
        instance_of[region] = k + 1
    return PanopticMap(class_of, instance_of)


# ------------------------------------------------------------ association

def _solve_max(score, allowed):
    pairs = assignment_solve(-score, forbidden=~allowed, maximize_matches=False)
    return pairs


def match_by_motion(propagated, current, iou_min):
    """Stage one: link propagated track masks to current detections by IoU.

    ``propagated`` is a list of ``(track_id, mask)``; a track may appear more
    than once, in which case its best IoU per detection counts.  Returns
    ``{detection index: track_id}``.
    """
    track_ids = sorted({tid for tid, _ in propagated})
    col = {tid: k for k, tid in enumerate(track_ids)}
    iou = np.zeros((len(current), len(track_ids)))
    for tid, pmask in propagated:
        for d, det in enumerate(current):
            iou[d, col[tid]] = max(iou[d, col[tid]], mask_iou(pmask, det.mask))
    return {d: track_ids[k] for d, k in _solve_max(iou, iou >= iou_min)}


@dataclass
class TrackEntry:
    class_id: int
    last_mask: np.ndarray
    last_frame: int
    embeddings: deque
    age: int = 0

    def mean_embedding(self):
        if not self.embeddings:
            return None
        return np.mean(np.stack(list(self.embeddings)), axis=0)


@dataclass
class TrackerState:
    tracks: Dict[int, TrackEntry] = field(default_factory=dict)
    next_id: int = 1
    last_frame: Optional[int] = None
    previous: Dict[int, int] = field(default_factory=dict)
    config: TrackerConfig = field(default_factory=TrackerConfig)

    def copy(self):
        tracks = {
            tid: replace(e, embeddings=deque(e.embeddings, maxlen=e.embeddings.maxlen))
            for tid, e in self.tracks.items()
        }
        return replace(self, tracks=tracks, previous=dict(self.previous))


def _similarity(det, entry):
    ref = entry.mean_embedding()
    if det.embedding is None or ref is None:
        return None
    if not np.any(det.embedding) or not np.any(ref):
        return None
    return cosine_similarity(det.embedding, ref)


def match_by_appearance(unmatched, bank, sim_min, exclude=()):
    """Stage two: link detections to live tracks of the same class by
    cosine similarity against each track's mean stored embedding.

    ``bank`` is a :class:`TrackerState`; tracks in ``exclude`` are skipped.
    Returns ``{index into unmatched: track_id}``.
    """
    exclude = set(exclude)
    track_ids = [tid for tid in sorted(bank.tracks) if tid not in exclude]
    sim = np.full((len(unmatched), len(track_ids)), -np.inf)
    for d, det in enumerate(unmatched):
        for k, tid in enumerate(track_ids):
            entry = bank.tracks[tid]
            if entry.class_id != det.class_id:
                continue
            s = _similarity(det, entry)
            if s is not None:
                sim[d, k] = s
    allowed = sim >= sim_min
    score = np.where(allowed, sim, 0.0)
    return {d: track_ids[k] for d, k in _solve_max(score, allowed)}


def _motion_matrix(state, detections, masks, live):
    """IoU between each live track's propagated mask and each kept detection."""
    iou = np.zeros((len(detections), len(live)))
    col = {tid: k for k, tid in enumerate(live)}
    covered = set()
    for det in detections:
        if det.propagated_mask is None:
            continue
        tid = state.previous.get(det.propagated_from)
        if tid is None or tid not in col:
            continue
        covered.add(tid)
        for d, m in enumerate(masks):
            iou[d, col[tid]] = max(iou[d, col[tid]], mask_iou(det.propagated_mask, m))
    for d, det in enumerate(detections):
        if det.propagated_mask is not None:
            continue
        dx, dy = det.offset or (0, 0)
        for tid in live:
            if tid in covered:
                continue
            moved = translate_mask(state.tracks[tid].last_mask, dx, dy)
            iou[d, col[tid]] = max(iou[d, col[tid]], mask_iou(moved, masks[d]))
    return iou


def step_tracker(state, frame_index, detections, semantic_logits, class_table=None):
    """Advance the tracker by one frame.

    Returns ``(new_state, panoptic_map)`` where instance ids in the map are
    track ids.  ``state`` itself is not modified.
    """
    cfg = state.config
    class_table = class_table or kitti_step_classes()
    if state.last_frame is not None and frame_index <= state.last_frame:
        raise MalformedInputError(
            f"frame index {frame_index} does not follow previous frame {state.last_frame}"
        )
    state = state.copy()

    class_of, kept = _resolve(semantic_logits, detections, class_table, cfg.min_area, cfg.mask_logit)
    kept_idx = sorted(kept)
    kept_dets = [detections[k] for k in kept_idx]
    kept_masks = [kept[k] for k in kept_idx]

    # retire tracks unseen for more than max_age frames
    for tid in list(state.tracks):
        unseen = frame_index - state.tracks[tid].last_frame - 1
        if unseen > cfg.max_age:
            del state.tracks[tid]
    live = sorted(state.tracks)

    assigned = {}
    iou = _motion_matrix(state, kept_dets, kept_masks, live)
    same_class = np.array(
        [[state.tracks[t].class_id == det.class_id for t in live] for det in kept_dets], bool
    ).reshape(len(kept_dets), len(live))
    for d, k in _solve_max(iou, (iou >= cfg.iou_min) & same_class):
        assigned[d] = live[k]

    rest = [d for d in range(len(kept_dets)) if d not in assigned]
    by_app = match_by_appearance(
        [kept_dets[d] for d in rest], state, cfg.sim_min, exclude=assigned.values()
    )
    for r, tid in by_app.items():
        assigned[rest[r]] = tid

    for d in range(len(kept_dets)):
        if d not in assigned:
            if state.next_id > MAX_INSTANCE_ID:
                raise MalformedInputError("track id space exhausted")
            assigned[d] = state.next_id
            state.next_id += 1

    instance_of = np.zeros(class_of.shape, np.int64)
    previous = {}
    for d, tid in sorted(assigned.items()):
        det, region = kept_dets[d], kept_masks[d]
        instance_of[region] = tid
        entry = state.tracks.get(tid)
        if entry is None:
            entry = TrackEntry(det.class_id, region, frame_index, deque(maxlen=cfg.history))
            state.tracks[tid] = entry
        entry.last_mask = region
        entry.last_frame = frame_index
        entry.age = 0
        if det.embedding is not None:
            entry.embeddings.append(det.embedding)
        previous[kept_idx[d]] = tid
    for tid, entry in state.tracks.items():
        entry.age = frame_index - entry.last_frame
    state.previous = previous
    state.last_frame = frame_index
    return state, PanopticMap(class_of, instance_of)


class PanopticTracker(BaseEstimator):
    """Estimator wrapper around :func:`step_tracker`.

    Like a clustering estimator, ``fit`` consumes a whole sequence and stores
    the tracked maps in ``labels_``; ``step`` is the online interface.  Each
    element of the sequence is a ``(detections, semantic_logits)`` pair.
    """

    def __init__(self, class_table=None, iou_min=0.3, sim_min=0.7, max_age=12, history=8,
                 min_area=32, embedding_dim=128, mask_logit=10.0, semantic_logit=5.0):
        self.class_table = class_table
        self.iou_min = iou_min
        self.sim_min = sim_min
        self.max_age = max_age
        self.history = history
        self.min_area = min_area
        self.embedding_dim = embedding_dim
        self.mask_logit = mask_logit
        self.semantic_logit = semantic_logit

    def _config(self):
        return TrackerConfig(
            iou_min=self.iou_min, sim_min=self.sim_min, max_age=self.max_age,
            history=self.history, min_area=self.min_area, embedding_dim=self.embedding_dim,
            mask_logit=self.mask_logit, semantic_logit=self.semantic_logit,
        )

    def reset(self):
        self.state_ = TrackerState(config=self._config())
        self.labels_ = []
        return self

    def step(self, detections, semantic_logits, frame_index=None):
        if not hasattr(self, "state_"):
            self.reset()
        if frame_index is None:
            frame_index = 0 if self.state_.last_frame is None else self.state_.last_frame + 1
        for det in detections:
            if det.embedding is not None and det.embedding.shape[0] != self.embedding_dim:
                raise DimensionMismatchError(
                    f"embedding length {det.embedding.shape[0]} != {self.embedding_dim}"
                )
        self.state_, pmap = step_tracker(
            self.state_, frame_index, detections, semantic_logits,
            self.class_table or kitti_step_classes(),
        )
        self.labels_.append(pmap)
        return pmap

    def fit(self, X, y=None):
        self.reset()
        for detections, logits in X:
            self.step(detections, logits)
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_
