"""Loss and similarity functions used to train and score the tracking heads.

These are plain numpy evaluations of the formulas, useful as references and
for scoring simulator output; nothing here is differentiable.
"""
import math

import numpy as np

from .core import soft_iou
from .exceptions import MalformedInputError
from .validation import check_vector

EPS = 1e-12
WORST_FRACTION = 0.25


def semantic_bootstrap_loss(prob, gt):
    """Per-pixel log-loss over the worst 25% of pixels, weighted 4/(W*H).

    ``prob`` has shape (C, H, W) or (N, C, H, W); ``gt`` holds channel
    indices with shape (H, W) or (N, H, W).  The result is averaged over the
    batch.  Exactly ``floor(0.25*W*H)`` pixels are selected per image, ties
    broken by pixel index.
    """
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt)
    if prob.ndim == 3:
        prob, gt = prob[None], gt[None]
    if prob.ndim != 4 or gt.shape != (prob.shape[0],) + prob.shape[2:]:
        raise MalformedInputError(f"shape mismatch: prob {prob.shape}, gt {gt.shape}")
    n, c, h, w = prob.shape
    if gt.size and (gt.min() < 0 or gt.max() >= c):
        raise MalformedInputError(f"gt channel indices must lie in [0, {c})")
    if not np.isfinite(prob).all() or (prob < 0).any():
        raise MalformedInputError("probabilities must be finite and non-negative")
    k = int(math.floor(WORST_FRACTION * w * h))
    weight = 4.0 / (w * h)
    total = []
    for b in range(n):
        p_true = np.take_along_axis(prob[b], gt[b][None].astype(np.int64), axis=0)[0]
        nll = -np.log(np.maximum(p_true.ravel(), EPS))
        worst = np.argsort(-nll, kind="stable")[:k]
        total.append(weight * math.fsum(nll[worst]))
    return math.fsum(total) / n


def motion_loss(propagated, gt):
    """Sum of (1 - soft IoU) over aligned (instance, frame) mask pairs.

    Both arguments are mappings keyed by (instance, frame).
    """
    if set(propagated) != set(gt):
        missing = sorted(set(propagated) ^ set(gt))
        raise MalformedInputError(f"propagated and gt keys differ, e.g. {missing[:3]}")
    return math.fsum(1.0 - soft_iou(propagated[k], gt[k]) for k in sorted(gt))


def cosine_similarity(a, b):
    a = check_vector(a, "a")
    b = check_vector(b, "b", length=a.shape[0])
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise MalformedInputError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def appearance_matching_loss(pairs, same_track, track_count, temperature=0.1):
    """Binary cross-entropy on temperature-scaled cosine similarity logits.

    Each pair's similarity ``d`` becomes the logit ``d / temperature`` of
    "same track"; losses are summed over pairs.
    """
    same_track = list(same_track)
    if len(pairs) != len(same_track):
        raise MalformedInputError(f"{len(pairs)} pairs but {len(same_track)} labels")
    if track_count < 1:
        raise MalformedInputError("track_count must be at least 1")
    if temperature <= 0:
        raise MalformedInputError("temperature must be positive")
    terms = []
    for (a, b), y in zip(pairs, same_track):
        if y not in (0, 1):
            raise MalformedInputError(f"labels must be 0 or 1, got {y}")
        z = cosine_similarity(a, b) / temperature
        # -log(sigmoid(z)) and -log(1 - sigmoid(z)) in overflow-safe form
        terms.append(float(np.logaddexp(0.0, -z)) if y == 1 else float(np.logaddexp(0.0, z)))
    return math.fsum(terms)
