"""Panoptic tracking evaluation, fusion and ID association toolkit."""
__version__ = "0.1.0"

from .core import (  # noqa: E402
    ClassTable,
    PanopticMap,
    RleMask,
    Sequence,
    Track,
    extract_segments,
    kitti_step_classes,
    mask_iou,
    motchallenge_step_classes,
    rle_decode,
    rle_encode,
    soft_iou,
    translate_mask,
    tube_iou,
)
from .metrics import (  # noqa: E402
    compute_aq,
    compute_as,
    compute_pat,
    compute_pq,
    compute_sq,
    compute_stq,
    compute_tq,
    count_id_switches,
    evaluate_sequence,
)
from .tracker import Detection, PanopticTracker, fuse_logits  # noqa: E402

__all__ = [
    "__version__",
    "ClassTable",
    "PanopticMap",
    "RleMask",
    "Sequence",
    "Track",
    "extract_segments",
    "kitti_step_classes",
    "mask_iou",
    "motchallenge_step_classes",
    "rle_decode",
    "rle_encode",
    "soft_iou",
    "translate_mask",
    "tube_iou",
    "compute_aq",
    "compute_as",
    "compute_pat",
    "compute_pq",
    "compute_sq",
    "compute_stq",
    "compute_tq",
    "count_id_switches",
    "evaluate_sequence",
    "Detection",
    "PanopticTracker",
    "fuse_logits",
]
