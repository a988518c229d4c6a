"""Deterministic synthetic panoptic-tracking sequences and perturbations.

Every function is a pure function of its inputs and an integer seed.  Random
streams come from numpy's PCG64 bit generator seeded through
``numpy.random.SeedSequence``; the algorithm name is recorded in
``SimOutput.metadata`` so fixtures can be regenerated exactly.
"""
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from scipy import ndimage

from .core import PRESETS, PanopticMap, Sequence, Track, sequence_tracks, translate_mask
from .exceptions import MalformedInputError
from .tracker import Detection

RNG_ALGORITHM = "numpy.PCG64/SeedSequence"
SHAPES = ("rectangle", "ellipse")


def make_rng(seed, *stream):
    """Generator for ``seed`` and an optional sub-stream path."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *stream])))


@dataclass(frozen=True)
class SimConfig:
    width: int = 128
    height: int = 64
    frames: int = 10
    min_objects: int = 1
    max_objects: int = 6
    shapes: Tuple[str, ...] = SHAPES
    min_size: int = 8
    max_size: int = 20
    max_speed: int = 3
    velocity_change_prob: float = 0.1
    bands: int = 3
    occlusion_prob: float = 0.0
    min_visible_area: int = 32
    classes: str = "kitti-step"
    embedding_dim: int = 128
    max_embedding_similarity: float = 0.4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if self.frames < 1:
            raise MalformedInputError("frames must be at least 1")
        if self.width < 1 or self.height < 1:
            raise MalformedInputError("frame dimensions must be positive")
        if not 1 <= self.min_size <= self.max_size:
            raise MalformedInputError("need 1 <= min_size <= max_size")
        if self.max_size > min(self.width, self.height):
            raise MalformedInputError(
                f"objects up to {self.max_size}px do not fit a {self.width}x{self.height} frame"
            )
        if not 0 <= self.min_objects <= self.max_objects:
            raise MalformedInputError("need 0 <= min_objects <= max_objects")
        if self.max_objects > 65535:
            raise MalformedInputError("too many objects for 16-bit instance ids")
        if self.max_speed < 0 or self.bands < 1:
            raise MalformedInputError("max_speed must be >= 0 and bands >= 1")
        if not set(self.shapes) <= set(SHAPES) or not self.shapes:
            raise MalformedInputError(f"shapes must be a non-empty subset of {SHAPES}")
        for name in ("velocity_change_prob", "occlusion_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise MalformedInputError(f"{name} must lie in [0, 1]")
        if self.classes not in PRESETS:
            raise MalformedInputError(f"unknown class preset {self.classes!r}")
        if not -1.0 <= self.max_embedding_similarity < 1.0:
            raise MalformedInputError("max_embedding_similarity must lie in [-1, 1)")

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise MalformedInputError(f"unknown simulator options: {sorted(unknown)}")
        return cls(**doc)


@dataclass(eq=False)
class SimOutput:
    gt: Sequence
    gt_tracks: List[Track]
    offsets: Dict[Tuple[int, int], Tuple[int, int]]
    embeddings: Dict[int, np.ndarray]
    amodal: Dict[Tuple[int, int], np.ndarray]
    config: SimConfig
    metadata: Dict[str, object] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, SimOutput):
            return NotImplemented
        return (
            self.gt == other.gt
            and self.offsets == other.offsets
            and self.embeddings.keys() == other.embeddings.keys()
            and all(np.array_equal(v, other.embeddings[k]) for k, v in self.embeddings.items())
            and self.amodal.keys() == other.amodal.keys()
            and all(np.array_equal(v, other.amodal[k]) for k, v in self.amodal.items())
            and self.metadata == other.metadata
        )


def _template(kind, w, h):
    if kind == "rectangle":
        return np.ones((h, w), bool)
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ry, rx = max(h / 2.0, 0.5), max(w / 2.0, 0.5)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _place(template, x, y, width, height):
    mask = np.zeros((height, width), bool)
    h, w = template.shape
    mask[y:y + h, x:x + w] = template
    return mask


def _step_axis(pos, vel, limit):
    nxt = pos + vel
    if nxt < 0 or nxt > limit:
        vel = -vel
        nxt = pos + vel
    return int(np.clip(nxt, 0, limit)), vel


def _base_embeddings(n, dim, max_sim, rng):
    out = []
    for i in range(n):
        for _ in range(10000):
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            if all(float(v @ u) <= max_sim for u in out):
                out.append(v)
                break
        else:
            raise MalformedInputError(
                f"cannot draw {n} embeddings of length {dim} with cosine <= {max_sim}"
            )
    return out


def generate_sequence(cfg):
    """Generate a synthetic sequence; see :class:`SimOutput`."""
    table = PRESETS[cfg.classes]()
    rng_layout = make_rng(cfg.seed, 0)
    rng_obj = make_rng(cfg.seed, 1)
    rng_occ = make_rng(cfg.seed, 2)
    rng_emb = make_rng(cfg.seed, 3)
    W, H = cfg.width, cfg.height

    stuff = table.stuff_ids
    n_bands = min(cfg.bands, H)
    band_classes = rng_layout.choice(stuff, size=n_bands, replace=len(stuff) < n_bands)
    cuts = np.sort(rng_layout.choice(np.arange(1, H), size=n_bands - 1, replace=False)) if n_bands > 1 else []
    background = np.empty((H, W), np.uint8)
    edges = [0, *[int(c) for c in cuts], H]
    for k in range(n_bands):
        background[edges[k]:edges[k + 1]] = band_classes[k]

    n_obj = int(rng_obj.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = []
    for _ in range(n_obj):
        cls = int(rng_obj.choice(table.thing_ids))
        kind = str(rng_obj.choice(list(cfg.shapes)))
        w = int(rng_obj.integers(cfg.min_size, cfg.max_size + 1))
        h = int(rng_obj.integers(cfg.min_size, cfg.max_size + 1))
        x = int(rng_obj.integers(0, W - w + 1))
        y = int(rng_obj.integers(0, H - h + 1))
        v = [int(a) for a in rng_obj.integers(-cfg.max_speed, cfg.max_speed + 1, size=2)]
        objects.append({"class": cls, "template": _template(kind, w, h), "pos": [x, y], "vel": v})

    positions = []
    for t in range(cfg.frames):
        if t > 0:
            for ob in objects:
                if rng_obj.random() < cfg.velocity_change_prob:
                    ob["vel"] = [int(a) for a in rng_obj.integers(-cfg.max_speed, cfg.max_speed + 1, size=2)]
                h, w = ob["template"].shape
                ob["pos"][0], ob["vel"][0] = _step_axis(ob["pos"][0], ob["vel"][0], W - w)
                ob["pos"][1], ob["vel"][1] = _step_axis(ob["pos"][1], ob["vel"][1], H - h)
        positions.append([tuple(ob["pos"]) for ob in objects])

    frames = []
    amodal = {}
    visible_at = {}
    for t in range(cfg.frames):
        masks = []
        hidden = set()
        for i, ob in enumerate(objects):
            x, y = positions[t][i]
            m = _place(ob["template"], x, y, W, H)
            masks.append(m)
            amodal[i + 1, t] = m
            if rng_occ.random() < cfg.occlusion_prob:
                hidden.add(i)
        # painter's order; objects left with a sliver are treated as occluded
        while True:
            owner = np.full((H, W), -1, np.int64)
            for i, m in enumerate(masks):
                if i not in hidden:
                    owner[m] = i
            areas = np.bincount(owner[owner >= 0], minlength=len(masks))
            small = {i for i in range(len(masks)) if i not in hidden and areas[i] < cfg.min_visible_area}
            if not small:
                break
            hidden |= small
        class_of = background.copy()
        instance_of = np.zeros((H, W), np.int64)
        fg = owner >= 0
        class_of[fg] = np.asarray([ob["class"] for ob in objects], np.uint8)[owner[fg]] if objects else 0
        instance_of[fg] = owner[fg] + 1
        for i in range(len(objects)):
            if i not in hidden:
                visible_at.setdefault(i + 1, []).append(t)
        frames.append(PanopticMap(class_of, instance_of))

    gt = Sequence(frames, table).validate()
    offsets = {}
    for inst, ts in visible_at.items():
        for prev, cur in zip(ts, ts[1:]):
            (x0, y0), (x1, y1) = positions[prev][inst - 1], positions[cur][inst - 1]
            offsets[inst, cur] = (x1 - x0, y1 - y0)
    bases = _base_embeddings(n_obj, cfg.embedding_dim, cfg.max_embedding_similarity, rng_emb)
    return SimOutput(
        gt=gt,
        gt_tracks=sequence_tracks(gt),
        offsets=offsets,
        embeddings={i + 1: bases[i] for i in range(n_obj)},
        amodal=amodal,
        config=cfg,
        metadata={"rng": RNG_ALGORITHM, "seed": int(cfg.seed), "config": asdict(cfg)},
    )


# ------------------------------------------------------------ perturbations

def _fill_from_stuff(class_of, vacated, table):
    """Give vacated pixels the class of the nearest non-thing, non-ignore pixel."""
    if not vacated.any():
        return class_of
    source = ~table.thing_lut()[class_of] & ~vacated
    if table.ignore_id is not None:
        source &= class_of != table.ignore_id
    out = class_of.copy()
    if not source.any():
        out[vacated] = table.ignore_id if table.ignore_id is not None else table.stuff_ids[0]
        return out
    _, (iy, ix) = ndimage.distance_transform_edt(~source, return_indices=True)
    out[vacated] = class_of[iy[vacated], ix[vacated]]
    return out


def perturb_ids(gt, k, seed):
    """Inject exactly ``k`` ID switches by relabelling tracks from cut frames on.

    Eligible cut points are (track, frame) pairs other than a track's first
    frame.  The chosen cuts for ``k`` are a prefix of those for ``k + 1``
    under the same seed.
    """
    thing = gt.class_table.thing_lut()
    track_frames = {}
    for t, frame in enumerate(gt.frames):
        for iid in np.unique(frame.instance_of[(frame.instance_of > 0) & thing[frame.class_of]]):
            track_frames.setdefault(int(iid), []).append(t)
    eligible = [(tid, t) for tid in sorted(track_frames) for t in track_frames[tid][1:]]
    if k < 0 or k > len(eligible):
        raise MalformedInputError(f"cannot inject {k} ID switches, only {len(eligible)} cut points")
    if k == 0:
        return Sequence(gt.frames, gt.class_table)
    order = make_rng(seed, 10).permutation(len(eligible))
    cuts = sorted(eligible[i] for i in order[:k])
    next_id = max(track_frames) + 1
    if next_id + k - 1 > 65535:
        raise MalformedInputError("not enough free instance ids for relabelling")
    relabel = {}  # (track, frame) -> new id
    by_track = {}
    for tid, t in cuts:
        by_track.setdefault(tid, []).append(t)
    for tid in sorted(by_track):
        current = tid
        cut_set = set(by_track[tid])
        for t in track_frames[tid]:
            if t in cut_set:
                current = next_id
                next_id += 1
            relabel[tid, t] = current
    out = []
    for t, frame in enumerate(gt.frames):
        inst = frame.instance_of.astype(np.int64)
        new = inst.copy()
        for tid in by_track:
            nid = relabel.get((tid, t), tid)
            if nid != tid:
                new[inst == tid] = nid
        out.append(PanopticMap(frame.class_of, new))
    return Sequence(out, gt.class_table)


def perturb_masks(gt, erosion, seed=0):
    """Erode every instance mask by ``erosion`` pixels (3x3 structuring element).

    Vacated pixels take the nearest stuff class; instances that vanish are
    removed.  ``seed`` is accepted for interface symmetry; erosion is
    deterministic.
    """
    if erosion < 0:
        raise MalformedInputError("erosion must be >= 0")
    if erosion == 0:
        return Sequence(gt.frames, gt.class_table)
    table = gt.class_table
    thing = table.thing_lut()
    structure = np.ones((3, 3), bool)
    out = []
    for frame in gt.frames:
        inst = frame.instance_of
        vacated = np.zeros(frame.shape, bool)
        labels = np.where(thing[frame.class_of], inst, 0)
        for iid, box in enumerate(ndimage.find_objects(labels), start=1):
            if box is None:
                continue
            # pixels outside the bounding box are background, so cropping is exact
            m = labels[box] == iid
            eroded = ndimage.binary_erosion(m, structure=structure, iterations=int(erosion), border_value=0)
            vacated[box] |= m & ~eroded
        class_of = _fill_from_stuff(frame.class_of, vacated, table)
        instance_of = np.where(vacated, 0, inst)
        out.append(PanopticMap(class_of, instance_of))
    return Sequence(out, table)


def drop_detections(gt, rate, seed):
    """Independently delete each (instance, frame) mask with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise MalformedInputError("rate must lie in [0, 1]")
    rng = make_rng(seed, 11)
    table = gt.class_table
    thing = table.thing_lut()
    out = []
    for frame in gt.frames:
        inst = frame.instance_of
        vacated = np.zeros(frame.shape, bool)
        for iid in np.unique(inst[(inst > 0) & thing[frame.class_of]]):
            if rng.random() < rate:
                vacated |= inst == iid
        out.append(PanopticMap(_fill_from_stuff(frame.class_of, vacated, table), np.where(vacated, 0, inst)))
    return Sequence(out, table)


def synth_embeddings(out, noise_sigma, seed):
    """Per-(instance, frame) unit embeddings: base plus isotropic noise."""
    if noise_sigma < 0:
        raise MalformedInputError("noise_sigma must be >= 0")
    rng = make_rng(seed, 12)
    result = {}
    for tr in out.gt_tracks:
        base = out.embeddings[tr.track_id]
        for t in tr.frames:
            if noise_sigma == 0:
                result[tr.track_id, t] = base.copy()
                continue
            v = base + noise_sigma * rng.standard_normal(base.shape[0])
            result[tr.track_id, t] = v / np.linalg.norm(v)
    return result


def sim_detections(out, noise_sigma=0.0, seed=0, offsets=True, propagated=True,
                   shared_embedding=False):
    """Clean per-frame :class:`Detection` lists standing in for network output.

    Detections in each frame are ordered by GT instance id.  ``offsets`` may
    be True (GT offsets), False (none) or ``"zero"`` ((0, 0) everywhere).
    ``propagated`` attaches the previous frame's mask shifted by the GT offset
    when the object was visible in the immediately preceding frame.
    ``shared_embedding`` gives every detection the same embedding.
    """
    emb = synth_embeddings(out, noise_sigma, seed)
    if shared_embedding:
        common = np.zeros(out.config.embedding_dim)
        common[0] = 1.0
        emb = {k: common.copy() for k in emb}
    per_frame = []
    index = {}
    for t, frame in enumerate(out.gt.frames):
        dets = []
        for tr in out.gt_tracks:
            if t not in tr.masks:
                continue
            iid = tr.track_id
            off = out.offsets.get((iid, t))
            kw = {}
            if offsets == "zero":
                kw["offset"] = (0, 0)
            elif offsets and off is not None:
                kw["offset"] = off
            if propagated and t - 1 in tr.masks:
                kw["propagated_mask"] = translate_mask(tr.masks[t - 1], *off)
                kw["propagated_from"] = index[iid, t - 1]
            index[iid, t] = len(dets)
            dets.append(Detection(tr.masks[t], tr.class_id, 1.0, emb[iid, t], **kw))
        per_frame.append(dets)
    return per_frame
