"""Shared domain types, heatmap encoding/decoding and the PCK metric.

Conventions used everywhere in this package:

* keypoint coordinates live in output-heatmap pixels, x = column, y = row
* heatmap stacks are float32 arrays of shape (K, h, w), channels first
* images are float32 arrays of shape (H, W, 3) with values in [0, 1]
* bounding boxes are (x0, y0, x1, y1) in original-image pixels
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class DataError(Exception):
    """Invalid dataset, annotation, store or checkpoint content."""


class ConfigError(Exception):
    """Invalid or unknown configuration."""


class CheckpointError(DataError):
    """Checkpoint missing, truncated, or config-hash mismatch."""


class NumericalAbortError(Exception):
    """Training hit a non-finite loss and aborted."""


class TargetLabelLeakError(Exception):
    """Target ground-truth keypoints were read while training guards them."""


# --------------------------------------------------------------------------
# target-label access guard
#
# Training must never look at ground-truth keypoints of target-domain
# samples.  The trainer wraps its loops in `hide_target_labels()`; while the
# guard is active, reading `PoseSample.keypoints` of a target sample raises.

_TARGET_LABELS_HIDDEN = False


@contextmanager
def hide_target_labels():
    global _TARGET_LABELS_HIDDEN
    prev = _TARGET_LABELS_HIDDEN
    _TARGET_LABELS_HIDDEN = True
    try:
        yield
    finally:
        _TARGET_LABELS_HIDDEN = prev


def target_labels_hidden() -> bool:
    return _TARGET_LABELS_HIDDEN


@dataclass(frozen=True)
class Keypoint:
    """One joint location in output-heatmap pixels."""

    x: float
    y: float
    visible: bool = True


class PoseSample:
    """One image with optional keypoint annotations.

    `keypoints` is a guarded property: while `hide_target_labels()` is
    active, reading it on a target-domain sample raises
    `TargetLabelLeakError`.
    """

    def __init__(self, image, keypoints, domain, bbox, id):
        assert domain in ("source", "target"), domain
        self.image = image
        self.domain = domain
        self.bbox = tuple(float(v) for v in bbox)
        self.id = str(id)
        self._keypoints = keypoints

    @property
    def keypoints(self):
        if self.domain == "target" and _TARGET_LABELS_HIDDEN:
            raise TargetLabelLeakError(
                f"read of target ground-truth keypoints (sample {self.id!r}) "
                "during training"
            )
        return self._keypoints

    def __repr__(self):
        return f"PoseSample(id={self.id!r}, domain={self.domain!r})"


@dataclass
class PckReport:
    """PCK accuracies for one prediction/ground-truth pair or a dataset."""

    per_joint: np.ndarray          # (K,) accuracy, NaN where no visible gt
    mean: float                    # visible-count-weighted mean, NaN if no data
    alpha: float
    per_group: dict = field(default_factory=dict)
    no_data: bool = False


def encode_heatmap(keypoints, h_o: int, w_o: int, sigma: float) -> np.ndarray:
    """Render keypoints as a stack of unit-peak Gaussians.

    Channel c is exp(-((i - y_c)^2 + (j - x_c)^2) / (2 sigma^2)) for a
    visible joint c and all zeros for an invisible one.  Visible keypoints
    must lie inside [0, w_o) x [0, h_o).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    k = len(keypoints)
    out = np.zeros((k, h_o, w_o), dtype=np.float32)
    ys = np.arange(h_o, dtype=np.float64)[:, None]
    xs = np.arange(w_o, dtype=np.float64)[None, :]
    inv = 1.0 / (2.0 * sigma * sigma)
    for c, kp in enumerate(keypoints):
        if not kp.visible:
            continue
        if not (0 <= kp.x < w_o and 0 <= kp.y < h_o):
            raise ValueError(
                f"visible keypoint {c} at ({kp.x}, {kp.y}) outside "
                f"[0, {w_o}) x [0, {h_o})"
            )
        d2 = (ys - kp.y) ** 2 + (xs - kp.x) ** 2
        out[c] = np.exp(-d2 * inv)
    return out


def decode_heatmap(heatmaps: np.ndarray):
    """Argmax-decode a (K, h, w) stack into keypoints and confidences.

    The peak of each channel is taken row-major-first (deterministic
    tie-break); the confidence is the peak value.  An all-zero channel
    decodes to (0, 0) with confidence 0.
    """
    hm = np.asarray(heatmaps)
    if hm.ndim != 3:
        raise ValueError(f"expected (K, h, w) stack, got shape {hm.shape}")
    if not np.isfinite(hm).all():
        raise ValueError("heatmap stack contains non-finite values")
    k, h, w = hm.shape
    flat = hm.reshape(k, -1)
    idx = np.argmax(flat, axis=1)
    conf = flat[np.arange(k), idx].astype(np.float64)
    kps = [Keypoint(x=float(i % w), y=float(i // w)) for i in idx]
    return kps, conf


def pck(pred, gt, bbox, alpha: float, group_map=None) -> PckReport:
    """PCK for one prediction/ground-truth keypoint pair.

    A joint counts as correct iff its ground truth is visible and the
    euclidean distance is <= alpha * max(bbox width, bbox height);
    invisible ground-truth joints are excluded from both numerator and
    denominator.  `bbox` must be in the same coordinate system as the
    keypoints.  `group_map` optionally maps joint index -> group name.
    """
    if len(pred) != len(gt):
        raise ValueError(f"pred/gt length mismatch: {len(pred)} vs {len(gt)}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    correct, counted = pck_counts(pred, gt, bbox, alpha)
    return _report_from_counts(correct, counted, alpha, group_map)


def pck_counts(pred, gt, bbox, alpha: float):
    """Per-joint (correct, counted) 0/1 arrays for one sample pair."""
    k = len(gt)
    thr = alpha * max(bbox[2] - bbox[0], bbox[3] - bbox[1])
    correct = np.zeros(k, dtype=np.int64)
    counted = np.zeros(k, dtype=np.int64)
    for c in range(k):
        if not gt[c].visible:
            continue
        counted[c] = 1
        d = math.hypot(pred[c].x - gt[c].x, pred[c].y - gt[c].y)
        if d <= thr:
            correct[c] = 1
    return correct, counted


def _report_from_counts(correct, counted, alpha, group_map=None) -> PckReport:
    correct = np.asarray(correct, dtype=np.float64)
    counted = np.asarray(counted, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        per_joint = np.where(counted > 0, correct / np.maximum(counted, 1), np.nan)
    total = counted.sum()
    mean = float(correct.sum() / total) if total > 0 else float("nan")
    groups = {}
    if group_map:
        for name in dict.fromkeys(group_map.values()):
            idx = [j for j, g in group_map.items() if g == name]
            n = counted[idx].sum()
            groups[name] = float(correct[idx].sum() / n) if n > 0 else float("nan")
    return PckReport(
        per_joint=per_joint,
        mean=mean,
        alpha=alpha,
        per_group=groups,
        no_data=bool(total == 0),
    )
