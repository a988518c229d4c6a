"""Command line entry points: ``eval``, ``track`` and ``simulate``.

Exit codes: 0 success, 1 input or format error, 2 internal invariant
violation.  With ``--json`` errors are also printed to stderr as one JSON
object.
"""
import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from . import __version__
from .core import PRESETS
from .exceptions import InvariantViolation, MalformedInputError, PanoptrackError
from .io import (
    CLASS_TABLE_FILE,
    DetectionsFile,
    frame_name,
    list_frames,
    list_sequences,
    read_class_table,
    read_detections,
    read_panoptic_png,
    read_sequence_dir,
    write_class_table,
    write_dataset_report,
    write_detections,
    write_panoptic_png,
    write_report,
    write_sequence_dir,
)
from .metrics import DatasetReport, evaluate_sequence
from .sim import RNG_ALGORITHM, SimConfig, generate_sequence, sim_detections
from .tracker import PanopticTracker, TrackerConfig, semantic_logits_from_classes

log = logging.getLogger("panoptrack")


@dataclass
class CliConfig:
    """Contents of the YAML config file (every key optional)."""

    class_table: str = None
    same_class: bool = False
    jobs: int = 1
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    sequences: int = 1
    noise_sigma: float = 0.0

    def echo(self):
        doc = asdict(self)
        doc["sim"]["shapes"] = list(doc["sim"]["shapes"])
        return doc


def load_config(path=None):
    if path is None:
        return CliConfig()
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise MalformedInputError(f"cannot read config: {exc}", os.fspath(path)) from exc
    if not isinstance(doc, dict):
        raise MalformedInputError("config must be a mapping", os.fspath(path))
    known = {f.name for f in fields(CliConfig)}
    unknown = set(doc) - known
    if unknown:
        raise MalformedInputError(f"unknown config keys {sorted(unknown)}", os.fspath(path))
    try:
        tracker = TrackerConfig(**(doc.pop("tracker", None) or {}))
        sim = SimConfig.from_dict(doc.pop("sim", None) or {})
    except TypeError as exc:
        raise MalformedInputError(str(exc), os.fspath(path)) from exc
    cfg = CliConfig(tracker=tracker, sim=sim, **doc)
    if cfg.jobs < 1 or cfg.sequences < 1 or cfg.noise_sigma < 0:
        raise MalformedInputError("jobs and sequences must be >= 1, noise_sigma >= 0", os.fspath(path))
    if cfg.class_table and cfg.class_table not in PRESETS and not os.path.isfile(cfg.class_table):
        raise MalformedInputError(f"class table {cfg.class_table!r} is neither a preset nor a file")
    return cfg


def resolve_class_table(cfg, *dirs):
    """Class table from the config, else the first ``class_table.json`` found
    in ``dirs``, else the KITTI-STEP preset."""
    if cfg.class_table:
        if cfg.class_table in PRESETS:
            return PRESETS[cfg.class_table]()
        return read_class_table(cfg.class_table)
    for d in dirs:
        candidate = os.path.join(d, CLASS_TABLE_FILE)
        if os.path.isfile(candidate):
            return read_class_table(candidate)
    return PRESETS["kitti-step"]()


# -------------------------------------------------------------------- eval

def _eval_one(args):
    name, gt_dir, pred_dir, table, same_class = args
    gt, _ = read_sequence_dir(gt_dir, table)
    pred, _ = read_sequence_dir(pred_dir, table)
    if len(gt) != len(pred):
        raise MalformedInputError(f"{len(gt)} GT frames but {len(pred)} predicted frames", name)
    return name, evaluate_sequence(gt, pred, same_class=same_class)


def cmd_eval(gt_root, pred_root, cfg, out_dir, jobs=None):
    table = resolve_class_table(cfg, gt_root)
    names = list_sequences(gt_root)
    if not names:
        raise MalformedInputError("no sequences found", os.fspath(gt_root))
    pred_names = set(list_sequences(pred_root))
    missing = [n for n in names if n not in pred_names]
    if missing:
        raise MalformedInputError(f"prediction is missing sequences {missing}", os.fspath(pred_root))
    work = [(n, os.path.join(gt_root, n), os.path.join(pred_root, n), table, cfg.same_class) for n in names]
    jobs = jobs or cfg.jobs
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(_eval_one, work))
    else:
        results = dict(map(_eval_one, work))
    os.makedirs(out_dir, exist_ok=True)
    echo = cfg.echo()
    for name in names:
        write_report(results[name], os.path.join(out_dir, f"{name}.json"), sequence=name, config=echo)
    dataset = DatasetReport(results)
    doc = write_dataset_report(dataset, os.path.join(out_dir, "aggregate.json"), config=echo)
    log.info("aggregate %s", json.dumps(doc["headline"], sort_keys=True))
    return 0


# ------------------------------------------------------------------- track

def read_semantic_logits(semantic_dir, n_frames, table, scale):
    """Per-frame (C, H, W) logits from ``NNNNNN.npy`` files or panoptic PNGs."""
    npys = sorted(f for f in os.listdir(semantic_dir) if f.endswith(".npy"))
    if npys:
        paths = [os.path.join(semantic_dir, f"{t:06d}.npy") for t in range(len(npys))]
        if [os.path.basename(p) for p in paths] != npys:
            raise MalformedInputError("semantic .npy files must be numbered 000000.npy upward", semantic_dir)
        loader = np.load
    else:
        paths = list_frames(semantic_dir)

        def loader(p):
            return semantic_logits_from_classes(read_panoptic_png(p, table).class_of, table, scale)
    if len(paths) != n_frames:
        raise MalformedInputError(
            f"{len(paths)} semantic frames but {n_frames} detection frames", semantic_dir
        )
    for p in paths:
        yield loader(p)


def cmd_track(detections_path, semantic_dir, cfg, out_dir):
    dfile = read_detections(detections_path)
    table = resolve_class_table(cfg, semantic_dir, os.path.dirname(os.path.abspath(semantic_dir)))
    tc = cfg.tracker
    if dfile.embedding_dim is not None and dfile.embedding_dim != tc.embedding_dim:
        raise MalformedInputError(
            f"detections carry {dfile.embedding_dim}-d embeddings, config expects {tc.embedding_dim}",
            detections_path,
        )
    tracker = PanopticTracker(class_table=table, **asdict(tc))
    tracker.reset()
    os.makedirs(out_dir, exist_ok=True)
    logits_iter = read_semantic_logits(semantic_dir, len(dfile.frames), table, tc.semantic_logit)
    for t, (dets, logits) in enumerate(zip(dfile.frames, logits_iter)):
        if logits.shape[1:] != (dfile.height, dfile.width):
            raise MalformedInputError(
                f"semantic frame {t} is {logits.shape[1:]}, detections are {(dfile.height, dfile.width)}",
                semantic_dir,
            )
        pmap = tracker.step(dets, logits, frame_index=t)
        write_panoptic_png(pmap, os.path.join(out_dir, frame_name(t)))
    write_class_table(table, os.path.join(out_dir, CLASS_TABLE_FILE))
    return 0


# ---------------------------------------------------------------- simulate

def cmd_simulate(cfg, out_dir, seed=None):
    base_seed = cfg.sim.seed if seed is None else int(seed)
    gt_root = os.path.join(out_dir, "gt")
    det_root = os.path.join(out_dir, "detections")
    os.makedirs(gt_root, exist_ok=True)
    os.makedirs(det_root, exist_ok=True)
    manifest = {
        "tool_version": __version__,
        "rng": RNG_ALGORITHM,
        "seed": base_seed,
        "config": cfg.echo(),
        "sequences": {},
    }
    table = None
    for i in range(cfg.sequences):
        name = f"seq_{i:03d}"
        sim_cfg = SimConfig.from_dict({**asdict(cfg.sim), "seed": base_seed + i})
        out = generate_sequence(sim_cfg)
        table = out.gt.class_table
        write_sequence_dir(out.gt, os.path.join(gt_root, name))
        dets = sim_detections(out, noise_sigma=cfg.noise_sigma, seed=base_seed + i)
        write_detections(
            DetectionsFile(sim_cfg.width, sim_cfg.height, dets, sim_cfg.embedding_dim),
            os.path.join(det_root, f"{name}.json"),
        )
        manifest["sequences"][name] = {"seed": base_seed + i, "frames": sim_cfg.frames,
                                       "objects": len(out.embeddings)}
    write_class_table(table, os.path.join(gt_root, CLASS_TABLE_FILE))
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


# -------------------------------------------------------------------- main

class _Parser(argparse.ArgumentParser):
    # usage errors are input errors; argparse would exit with 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="panoptrack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--json", action="store_true", help="emit errors as JSON on stderr")
    common.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="evaluate predictions against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth dataset root")
    p.add_argument("--pred", required=True, help="prediction dataset root")
    p.add_argument("--jobs", type=int, default=None, help="parallel sequences")

    p = sub.add_parser("track", parents=[common], help="fuse and track detections")
    p.add_argument("--detections", required=True, help="detections JSON file")
    p.add_argument("--semantic", required=True, help="semantic frames (PNG or .npy logits)")

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "eval":
            if args.jobs is not None and args.jobs < 1:
                raise MalformedInputError("--jobs must be >= 1")
            return cmd_eval(args.gt, args.pred, cfg, args.out, args.jobs)
        if args.command == "track":
            return cmd_track(args.detections, args.semantic, cfg, args.out)
        return cmd_simulate(cfg, args.out, args.seed)
    except (MalformedInputError, OSError) as exc:
        return _fail(args, exc, 1)
    except (InvariantViolation, PanoptrackError) as exc:
        return _fail(args, exc, 2)


def _fail(args, exc, code):
    if args.json:
        err = {"error": type(exc).__name__, "message": str(exc),
               "location": getattr(exc, "location", None), "exit_code": code}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
    else:
        print(f"panoptrack: error: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
