"""Raster and mask primitives: class tables, panoptic maps, RLE, IoU, tracks.

Binary masks are plain ``numpy`` boolean arrays of shape ``(height, width)``;
row-major pixel order is numpy's C order.  Everything here is immutable or
returns fresh arrays, so it is safe to share between threads.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .exceptions import DimensionMismatchError, MalformedInputError
from .validation import check_mask, check_prob_mask, check_same_shape

MAX_CLASS_ID = 255
MAX_INSTANCE_ID = 65535


@dataclass(frozen=True)
class ClassEntry:
    class_id: int
    name: str
    is_thing: bool


@dataclass(frozen=True)
class ClassTable:
    """Thing/stuff partition of the label space plus an optional ignore class."""

    entries: Tuple[ClassEntry, ...]
    ignore_id: Optional[int] = None

    def __post_init__(self):
        entries = tuple(
            e if isinstance(e, ClassEntry) else ClassEntry(int(e[0]), str(e[1]), bool(e[2]))
            for e in self.entries
        )
        object.__setattr__(self, "entries", entries)
        ids = [e.class_id for e in entries]
        if len(set(ids)) != len(ids):
            raise MalformedInputError("class ids must be unique")
        for cid in ids:
            if not 0 <= cid <= MAX_CLASS_ID:
                raise MalformedInputError(f"class id {cid} outside [0, {MAX_CLASS_ID}]")
        if self.ignore_id is not None:
            if self.ignore_id not in ids:
                raise MalformedInputError(f"ignore_id {self.ignore_id} is not a table entry")
            if self[self.ignore_id].is_thing:
                raise MalformedInputError("the ignore class cannot be a thing class")

    def __getitem__(self, class_id):
        for e in self.entries:
            if e.class_id == class_id:
                return e
        raise KeyError(class_id)

    def __contains__(self, class_id):
        return any(e.class_id == class_id for e in self.entries)

    @property
    def class_ids(self):
        return [e.class_id for e in self.entries]

    @property
    def thing_ids(self):
        return [e.class_id for e in self.entries if e.is_thing]

    @property
    def stuff_ids(self):
        """Non-thing classes, excluding the ignore class."""
        return [e.class_id for e in self.entries if not e.is_thing and e.class_id != self.ignore_id]

    @property
    def evaluated_ids(self):
        return [c for c in self.class_ids if c != self.ignore_id]

    def is_thing(self, class_id):
        return self[class_id].is_thing

    def thing_lut(self):
        """Boolean lookup table indexed by class id (length 256)."""
        lut = np.zeros(MAX_CLASS_ID + 1, dtype=bool)
        lut[self.thing_ids] = True
        return lut

    def known_lut(self):
        lut = np.zeros(MAX_CLASS_ID + 1, dtype=bool)
        lut[self.class_ids] = True
        return lut

    def to_dict(self):
        return {
            "classes": [
                {"id": e.class_id, "name": e.name, "is_thing": e.is_thing} for e in self.entries
            ],
            "ignore_id": self.ignore_id,
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            entries = [ClassEntry(int(c["id"]), str(c["name"]), bool(c["is_thing"])) for c in doc["classes"]]
            return cls(tuple(entries), doc.get("ignore_id"))
        except (KeyError, TypeError) as exc:
            raise MalformedInputError(f"bad class table document: {exc!r}") from exc


_CITYSCAPES_NAMES = [
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bicycle",
]


def kitti_step_classes():
    """19 Cityscapes-style classes; ``person`` and ``car`` carry instances."""
    entries = [ClassEntry(i, n, n in ("person", "car")) for i, n in enumerate(_CITYSCAPES_NAMES)]
    entries.append(ClassEntry(255, "void", False))
    return ClassTable(tuple(entries), ignore_id=255)


def motchallenge_step_classes():
    """7 classes with ``person`` as the single thing class."""
    names = ["sidewalk", "building", "vegetation", "sky", "person", "rider", "bicycle"]
    entries = [ClassEntry(i, n, n == "person") for i, n in enumerate(names)]
    entries.append(ClassEntry(255, "void", False))
    return ClassTable(tuple(entries), ignore_id=255)


PRESETS = {"kitti-step": kitti_step_classes, "motchallenge-step": motchallenge_step_classes}


# --------------------------------------------------------------------- RLE

@dataclass(frozen=True)
class RleMask:
    """Row-major run lengths, background first.  A leading 0 means the mask
    starts with foreground."""

    width: int
    height: int
    runs: Tuple[int, ...]

    def __post_init__(self):
        runs = tuple(int(r) for r in self.runs)
        object.__setattr__(self, "runs", runs)
        if self.width < 1 or self.height < 1:
            raise MalformedInputError(f"RLE dimensions must be positive, got {self.width}x{self.height}")
        if any(r < 0 for r in runs):
            raise MalformedInputError("RLE runs must be non-negative")
        if sum(runs) != self.width * self.height:
            raise MalformedInputError(
                f"RLE runs sum to {sum(runs)}, expected {self.width * self.height}"
            )
        if any(r == 0 for r in runs[1:]):
            raise MalformedInputError("RLE has an interior zero-length run")


def rle_encode(mask):
    mask = check_mask(mask)
    flat = mask.ravel()
    height, width = mask.shape
    # indices where the value changes, plus both ends
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return RleMask(width, height, tuple(runs))


def rle_decode(rle):
    if sum(rle.runs) != rle.width * rle.height:
        raise MalformedInputError("RLE run sum does not match its dimensions")
    values = np.zeros(len(rle.runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, rle.runs)
    return flat.reshape(rle.height, rle.width)


# --------------------------------------------------------------------- IoU

def mask_iou(a, b):
    """Intersection over union of two binary masks; 0.0 when both are empty."""
    a = check_mask(a, "a")
    b = check_mask(b, "b")
    check_same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def soft_iou(a, b):
    """IoU generalised to real-valued masks: sum(min) / sum(max)."""
    a = check_prob_mask(a, "a")
    b = check_prob_mask(b, "b")
    check_same_shape(a, b)
    denom = np.maximum(a, b).sum()
    if denom == 0:
        return 0.0
    return float(np.minimum(a, b).sum() / denom)


@dataclass
class Track:
    """One object's masks over time under a single ID."""

    track_id: int
    class_id: int
    masks: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.masks = dict(sorted(self.masks.items()))
        shapes = {m.shape for m in self.masks.values()}
        if len(shapes) > 1:
            raise DimensionMismatchError(f"track {self.track_id} masks have differing shapes {shapes}")

    @property
    def frames(self):
        return list(self.masks)

    @property
    def area(self):
        return sum(int(np.count_nonzero(m)) for m in self.masks.values())

    @property
    def shape(self):
        for m in self.masks.values():
            return m.shape
        return None


def tube_iou(a, b):
    """Spatio-temporal IoU of two tracks; frames missing from a track count as empty."""
    if a.shape is not None and b.shape is not None and a.shape != b.shape:
        raise DimensionMismatchError(f"track shapes differ: {a.shape} vs {b.shape}")
    inter = union = 0
    for t in set(a.masks) | set(b.masks):
        ma, mb = a.masks.get(t), b.masks.get(t)
        if ma is None:
            union += np.count_nonzero(mb)
        elif mb is None:
            union += np.count_nonzero(ma)
        else:
            inter += np.count_nonzero(ma & mb)
            union += np.count_nonzero(ma | mb)
    return inter / union if union else 0.0


def translate_mask(mask, dx, dy):
    """Shift foreground by (dx, dy) pixels; whatever leaves the frame is dropped."""
    mask = check_mask(mask)
    h, w = mask.shape
    out = np.zeros_like(mask)
    dx, dy = int(dx), int(dy)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = mask[src_y, src_x]
    return out


# ---------------------------------------------------------------- panoptic

def _readonly(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PanopticMap:
    """Per-pixel class id and instance id (0 = no instance)."""

    class_of: np.ndarray
    instance_of: np.ndarray

    def __post_init__(self):
        cls = np.asarray(self.class_of)
        inst = np.asarray(self.instance_of)
        if cls.ndim != 2 or cls.shape != inst.shape:
            raise DimensionMismatchError(
                f"class and instance rasters must be equal 2-D arrays, got {cls.shape} and {inst.shape}"
            )
        if cls.size and (cls.min() < 0 or cls.max() > MAX_CLASS_ID):
            raise MalformedInputError(f"class ids must lie in [0, {MAX_CLASS_ID}]")
        if inst.size and (inst.min() < 0 or inst.max() > MAX_INSTANCE_ID):
            raise MalformedInputError(f"instance ids must lie in [0, {MAX_INSTANCE_ID}]")
        object.__setattr__(self, "class_of", _readonly(cls, np.uint8))
        object.__setattr__(self, "instance_of", _readonly(inst, np.uint16))

    @property
    def height(self):
        return self.class_of.shape[0]

    @property
    def width(self):
        return self.class_of.shape[1]

    @property
    def shape(self):
        return self.class_of.shape

    def __eq__(self, other):
        if not isinstance(other, PanopticMap):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.class_of, other.class_of)
            and np.array_equal(self.instance_of, other.instance_of)
        )

    def validate(self, class_table, location=None):
        """Raise MalformedInputError if the map disagrees with ``class_table``."""
        known = class_table.known_lut()
        bad = ~known[self.class_of]
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise MalformedInputError(
                f"class id {self.class_of[y, x]} at pixel ({x},{y}) is not in the class table",
                location,
            )
        stuff_inst = (~class_table.thing_lut()[self.class_of]) & (self.instance_of > 0)
        if stuff_inst.any():
            y, x = np.argwhere(stuff_inst)[0]
            raise MalformedInputError(
                f"non-thing class {self.class_of[y, x]} carries instance id "
                f"{self.instance_of[y, x]} at pixel ({x},{y})",
                location,
            )
        return self

    def segment_keys(self):
        """Combined int64 key class*65536 + instance per pixel."""
        return self.class_of.astype(np.int64) * (MAX_INSTANCE_ID + 1) + self.instance_of


def label_keys(keys):
    """Compact relabelling of a non-negative integer array.

    Returns ``(unique_keys, inverse, counts)`` like ``np.unique`` but uses a
    bincount lookup table when the key range is small, which is much faster
    for the few-dozen-segment rasters seen here.
    """
    keys = np.asarray(keys).ravel()
    if keys.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64)
    top = int(keys.max()) + 1
    if top <= (1 << 22):
        counts = np.bincount(keys, minlength=top)
        present = np.flatnonzero(counts)
        lut = np.zeros(top, dtype=np.int64)
        lut[present] = np.arange(present.size)
        return present, lut[keys], counts[present]
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    return uniq, inverse.ravel(), counts


def compact_keys(pmap):
    """Per-pixel segment key with a dense encoding class*(max_inst+1)+instance.

    Returns ``(keys, stride)``; decode with ``divmod(key, stride)``.
    """
    stride = int(pmap.instance_of.max(initial=0)) + 1
    keys = pmap.class_of.astype(np.int64) * stride + pmap.instance_of
    return keys, stride


def extract_segments(pmap, class_table):
    """List ``(class_id, instance_id, mask)`` for every segment in ``pmap``.

    Thing pixels with instance id > 0 form one segment per (class, instance);
    every other non-ignore class present forms a single class-level segment
    (instance id 0).  Ignore pixels belong to no segment.
    """
    keys, stride = compact_keys(pmap)
    uniq, inverse, _ = label_keys(keys)
    inverse = inverse.reshape(pmap.shape)
    out = []
    for idx, key in enumerate(uniq):
        class_id, instance_id = divmod(int(key), stride)
        if class_id == class_table.ignore_id:
            continue
        out.append((class_id, instance_id, inverse == idx))
    return out


@dataclass(eq=False)
class Sequence:
    """Ordered frames sharing one grid and one class table."""

    frames: List[PanopticMap]
    class_table: ClassTable

    def __post_init__(self):
        self.frames = list(self.frames)
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise DimensionMismatchError(f"frames have differing shapes {sorted(shapes)}")

    def __len__(self):
        return len(self.frames)

    def __eq__(self, other):
        if not isinstance(other, Sequence):
            return NotImplemented
        return self.class_table == other.class_table and self.frames == other.frames

    @property
    def shape(self):
        return self.frames[0].shape if self.frames else None

    def validate(self):
        for t, frame in enumerate(self.frames):
            frame.validate(self.class_table, location=f"frame {t}")
        return self


def check_compatible(gt, pred):
    """Raise unless ``gt`` and ``pred`` can be evaluated against each other."""
    if gt.class_table != pred.class_table:
        raise MalformedInputError("ground truth and prediction use different class tables")
    if len(gt) != len(pred):
        raise DimensionMismatchError(f"frame counts differ: {len(gt)} vs {len(pred)}")
    if len(gt) and gt.shape != pred.shape:
        raise DimensionMismatchError(f"frame shapes differ: {gt.shape} vs {pred.shape}")


def sequence_tracks(seq):
    """Assemble thing tracks keyed by instance id across the frames of ``seq``.

    An instance id may belong to only one class over the whole sequence.
    """
    thing = seq.class_table.thing_lut()
    tracks = {}
    for t, frame in enumerate(seq.frames):
        keys, stride = compact_keys(frame)
        uniq, inverse, _ = label_keys(keys)
        inverse = inverse.reshape(frame.shape)
        for idx, key in enumerate(uniq):
            class_id, instance_id = divmod(int(key), stride)
            if instance_id == 0 or not thing[class_id]:
                continue
            track = tracks.get(instance_id)
            if track is None:
                track = tracks[instance_id] = Track(instance_id, class_id)
            elif track.class_id != class_id:
                raise MalformedInputError(
                    f"instance id {instance_id} appears under classes {track.class_id} and {class_id}",
                    f"frame {t}",
                )
            track.masks[t] = inverse == idx
    return [tracks[k] for k in sorted(tracks)]
