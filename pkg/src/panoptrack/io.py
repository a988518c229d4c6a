"""On-disk formats: panoptic PNG sequences, detections JSON, metric reports.

Panoptic PNG: 8-bit RGB, ``R`` = class id, ``G * 256 + B`` = instance id.
A dataset root holds one sub-directory per sequence with frames named
``000000.png``, ``000001.png``, ... and an optional ``class_table.json``.

Readers reject rather than repair; every error names the file and, where it
applies, the frame or JSON field at fault.
"""
import json
import os
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import List, Optional

import jsonschema
import numpy as np
from PIL import Image

from . import __version__
from .core import (
    MAX_CLASS_ID,
    MAX_INSTANCE_ID,
    ClassTable,
    PanopticMap,
    RleMask,
    Sequence,
    rle_decode,
    rle_encode,
    sequence_tracks,
)
from .exceptions import DimensionMismatchError, MalformedInputError
from .tracker import Detection

FRAME_RE = re.compile(r"^(\d{6})\.png$")
CLASS_TABLE_FILE = "class_table.json"


# ---------------------------------------------------------------- PNG codec

def read_panoptic_png(path, class_table=None):
    path = os.fspath(path)
    try:
        with Image.open(path) as img:
            if img.mode != "RGB":
                raise MalformedInputError(f"expected an 8-bit RGB PNG, got mode {img.mode}", path)
            rgb = np.asarray(img, dtype=np.uint8)
    except OSError as exc:
        raise MalformedInputError(f"cannot read PNG: {exc}", path) from exc
    class_of = rgb[:, :, 0]
    instance_of = rgb[:, :, 1].astype(np.int64) * 256 + rgb[:, :, 2]
    pmap = PanopticMap(class_of, instance_of)
    if class_table is not None:
        pmap.validate(class_table, location=path)
    return pmap


def encode_panoptic_rgb(pmap):
    rgb = np.empty(pmap.shape + (3,), np.uint8)
    rgb[:, :, 0] = pmap.class_of
    rgb[:, :, 1] = pmap.instance_of >> 8
    rgb[:, :, 2] = pmap.instance_of & 0xFF
    return rgb


def write_panoptic_png(pmap, path):
    if int(pmap.class_of.max(initial=0)) > MAX_CLASS_ID:
        raise MalformedInputError("class id overflows 8 bits", os.fspath(path))
    if int(pmap.instance_of.max(initial=0)) > MAX_INSTANCE_ID:
        raise MalformedInputError("instance id overflows 16 bits", os.fspath(path))
    Image.fromarray(encode_panoptic_rgb(pmap), mode="RGB").save(path, format="PNG")


def frame_name(t):
    return f"{t:06d}.png"


# ------------------------------------------------------------ class tables

def read_class_table(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedInputError(f"cannot read class table: {exc}", os.fspath(path)) from exc
    return ClassTable.from_dict(doc)


def write_class_table(table, path):
    _write_json(table.to_dict(), path)


# --------------------------------------------------------------- sequences

def list_frames(path):
    """Sorted frame files of a sequence directory, checked for gaps."""
    path = os.fspath(path)
    if not os.path.isdir(path):
        raise MalformedInputError("not a directory", path)
    indices = []
    for name in os.listdir(path):
        m = FRAME_RE.match(name)
        if m:
            indices.append(int(m.group(1)))
    indices.sort()
    if indices != list(range(len(indices))):
        missing = sorted(set(range(indices[-1] + 1)) - set(indices)) if indices else []
        raise MalformedInputError(f"missing frames {missing[:5]}", path)
    return [os.path.join(path, frame_name(t)) for t in indices]


def read_sequence_dir(path, class_table):
    """Read one sequence directory; returns ``(Sequence, gt_tracks)``."""
    frames = []
    shape = None
    for fp in list_frames(path):
        pmap = read_panoptic_png(fp, class_table)
        if shape is not None and pmap.shape != shape:
            raise DimensionMismatchError(f"frame shape {pmap.shape} differs from {shape}", fp)
        shape = pmap.shape
        frames.append(pmap)
    seq = Sequence(frames, class_table)
    try:
        tracks = sequence_tracks(seq)
    except MalformedInputError as exc:
        raise MalformedInputError(str(exc), os.fspath(path)) from exc
    return seq, tracks


def write_sequence_dir(seq, path):
    os.makedirs(path, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        write_panoptic_png(frame, os.path.join(path, frame_name(t)))


def list_sequences(root):
    root = os.fspath(root)
    if not os.path.isdir(root):
        raise MalformedInputError("dataset root is not a directory", root)
    return sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))


# -------------------------------------------------------------- detections

@dataclass
class DetectionsFile:
    width: int
    height: int
    frames: List[List[Detection]] = field(default_factory=list)
    embedding_dim: Optional[int] = None


@lru_cache(maxsize=None)
def load_schema(name):
    text = resources.files("panoptrack").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _json_path(parts):
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def _rle_doc(mask):
    rle = rle_encode(mask)
    return {"width": rle.width, "height": rle.height, "runs": list(rle.runs)}


def _rle_mask(doc, width, height, where):
    if doc["width"] != width or doc["height"] != height:
        raise DimensionMismatchError(
            f"RLE is {doc['width']}x{doc['height']}, file declares {width}x{height}", where
        )
    try:
        return rle_decode(RleMask(doc["width"], doc["height"], doc["runs"]))
    except MalformedInputError as exc:
        raise MalformedInputError(str(exc), where) from exc


def detections_to_doc(dfile):
    frames = []
    for t, dets in enumerate(dfile.frames):
        records = []
        for det in dets:
            rec = {"class_id": int(det.class_id), "score": float(det.score), "rle": _rle_doc(det.mask)}
            if det.embedding is not None:
                rec["embedding"] = [float(v) for v in det.embedding]
            if det.offset is not None:
                rec["offset"] = [int(det.offset[0]), int(det.offset[1])]
            if det.propagated_mask is not None:
                rec["propagated_rle"] = _rle_doc(det.propagated_mask)
                rec["propagated_from"] = int(det.propagated_from)
            records.append(rec)
        frames.append({"frame": t, "detections": records})
    return {
        "format": "panoptrack-detections",
        "version": 1,
        "width": dfile.width,
        "height": dfile.height,
        "embedding_dim": dfile.embedding_dim,
        "frames": frames,
    }


def detections_from_doc(doc, source="<detections>"):
    validator = jsonschema.Draft202012Validator(load_schema("detections"))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise MalformedInputError(err.message, f"{source} {_json_path(err.absolute_path)}")
    width, height, dim = doc["width"], doc["height"], doc["embedding_dim"]
    frames = []
    for fi, fdoc in enumerate(doc["frames"]):
        if fdoc["frame"] != fi:
            raise MalformedInputError(
                f"frame index {fdoc['frame']} out of order, expected {fi}", f"{source} $.frames[{fi}]"
            )
        dets = []
        for di, rec in enumerate(fdoc["detections"]):
            where = f"{source} $.frames[{fi}].detections[{di}]"
            emb = rec.get("embedding")
            if emb is not None:
                if dim is None:
                    dim = len(emb)
                if len(emb) != dim:
                    raise DimensionMismatchError(
                        f"frame {fi}: embedding length {len(emb)} != {dim}", where
                    )
            prop = None
            if "propagated_rle" in rec:
                prop = _rle_mask(rec["propagated_rle"], width, height, where + ".propagated_rle")
                n_prev = len(doc["frames"][fi - 1]["detections"]) if fi > 0 else 0
                if rec["propagated_from"] >= n_prev:
                    raise MalformedInputError(
                        f"propagated_from {rec['propagated_from']} has no record in the previous frame",
                        where,
                    )
            try:
                dets.append(Detection(
                    mask=_rle_mask(rec["rle"], width, height, where + ".rle"),
                    class_id=rec["class_id"],
                    score=rec["score"],
                    embedding=None if emb is None else np.asarray(emb, dtype=np.float64),
                    propagated_mask=prop,
                    propagated_from=rec.get("propagated_from"),
                    offset=tuple(rec["offset"]) if "offset" in rec else None,
                ))
            except MalformedInputError as exc:
                if exc.location is not None:
                    raise
                raise MalformedInputError(str(exc), where) from exc
        frames.append(dets)
    return DetectionsFile(width, height, frames, doc["embedding_dim"])


def read_detections(path):
    path = os.fspath(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedInputError(f"cannot read detections: {exc}", path) from exc
    return detections_from_doc(doc, path)


def write_detections(dfile, path):
    doc = detections_to_doc(dfile)
    # validate on the way out too, so nothing unreadable is ever written
    detections_from_doc(doc, os.fspath(path))
    _write_json(doc, path)


# ----------------------------------------------------------------- reports

def report_to_doc(report, sequence="", config=None):
    doc = report.to_dict()
    doc.update({
        "format": "panoptrack-report",
        "version": 1,
        "tool_version": __version__,
        "sequence": sequence,
        "config": config,
    })
    return doc


def write_report(report, path, sequence="", config=None):
    report.check()
    doc = report_to_doc(report, sequence, config)
    jsonschema.validate(doc, load_schema("report"))
    _write_json(doc, path)
    return doc


def write_dataset_report(dataset, path, config=None):
    headline = dataset.headline()
    pq_stats, sq_stats = dataset.pq_stats, dataset.sq_stats
    scores = dataset.track_scores
    doc = {
        "format": "panoptrack-report",
        "version": 1,
        "tool_version": __version__,
        "sequence": "*",
        "headline": headline,
        "weights": dict(dataset.weights),
        "counts": {
            "sequences": len(dataset.sequences),
            "frames": sum(r.frames for r in dataset.sequences.values()),
            "gt_tracks": len(scores),
            "pred_tracks": sum(r.pred_tracks for r in dataset.sequences.values()),
        },
        "flags": {"tq_vacuous": not scores},
        "pq_per_class": {
            str(c): {"pq": s.pq, "sq": s.sq, "rq": s.rq, "tp": s.tp, "fp": s.fp, "fn": s.fn}
            for c, s in sorted(pq_stats.per_class.items())
        },
        "sq_per_class": {str(c): {"iou": v} for c, v in sq_stats.per_class.items()},
        "tracks": [],
        "per_sequence": {name: r.headline() for name, r in sorted(dataset.sequences.items())},
        "config": config,
    }
    jsonschema.validate(doc, load_schema("report"))
    _write_json(doc, path)
    return doc


def _write_json(doc, path):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
