"""Grid detection tensors, box geometry, decoding and non-maximum suppression.

A detection tensor is an (s, s, 5 + c) float array of per-cell logits:
channel 0 is objectness, channels 1..4 are box offsets (tx, ty, tw, th),
channels 5.. are class logits.  All activations (sigmoid / softmax) are
applied at decode time; tensors always store pre-activation values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOGIT_CLIP = 1e-6


@dataclass(frozen=True)
class GridShape:
    """Grid geometry: s cells per side, c object classes."""

    s: int
    c: int

    def __post_init__(self):
        if self.s < 1:
            raise ValueError(f"cells per side must be >= 1, got {self.s}")
        if self.c < 1:
            raise ValueError(f"class count must be >= 1, got {self.c}")

    @property
    def channels(self) -> int:
        return 5 + self.c

    @property
    def n_values(self) -> int:
        return self.s * self.s * self.channels

    def zeros(self) -> np.ndarray:
        return np.zeros((self.s, self.s, self.channels))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, center + extent, in normalized image coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    confidence: float


@dataclass(frozen=True)
class GroundTruthObject:
    """Labeled object: box, class, and a persistent identity within a stream."""

    box: Box
    class_id: int
    object_id: int = 0


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    """Inverse sigmoid, clipped away from 0/1 so encoding stays finite."""
    p = np.clip(p, LOGIT_CLIP, 1.0 - LOGIT_CLIP)
    return np.log(p / (1.0 - p))


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; symmetric, in [0, 1]."""
    ax0, ax1 = a.cx - a.w / 2, a.cx + a.w / 2
    ay0, ay1 = a.cy - a.h / 2, a.cy + a.h / 2
    bx0, bx1 = b.cx - b.w / 2, b.cx + b.w / 2
    by0, by1 = b.cy - b.h / 2, b.cy + b.h / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def decode_tensor(tensor: np.ndarray, shape: GridShape, conf_threshold: float) -> list[Detection]:
    """Decode a logit tensor into detections, one candidate per cell.

    Box center is (col + sigmoid(tx)) / s, (row + sigmoid(ty)) / s; box size
    is sigmoid(tw), sigmoid(th).  Confidence is objectness times the best
    class probability; candidates below conf_threshold are dropped and the
    survivors are returned sorted by descending confidence.
    """
    s = shape.s
    obj = sigmoid(tensor[:, :, 0])
    cls_prob = softmax(tensor[:, :, 5:], axis=-1)
    best_cls = np.argmax(cls_prob, axis=-1)
    best_prob = np.max(cls_prob, axis=-1)
    conf = obj * best_prob

    dets = []
    rows, cols = np.nonzero(conf >= conf_threshold)
    for r, col in zip(rows, cols):
        tx, ty, tw, th = tensor[r, col, 1:5]
        box = Box(
            cx=(col + float(sigmoid(tx))) / s,
            cy=(r + float(sigmoid(ty))) / s,
            w=float(sigmoid(tw)),
            h=float(sigmoid(th)),
        )
        dets.append(Detection(box=box, class_id=int(best_cls[r, col]), confidence=float(conf[r, col])))
    dets.sort(key=lambda d: -d.confidence)
    return dets


def encode_object(tensor: np.ndarray, shape: GridShape, box: Box, class_id: int,
                  obj_logit: float, class_margin: float = 4.0) -> tuple[int, int]:
    """Write one object into the cell containing its center; returns (row, col).

    Inverse of decode_tensor's box mapping, so decode(encode(x)) round-trips
    box coordinates up to the logit clip.
    """
    s = shape.s
    col = min(int(box.cx * s), s - 1)
    row = min(int(box.cy * s), s - 1)
    tensor[row, col, 0] = obj_logit
    tensor[row, col, 1] = logit(box.cx * s - col)
    tensor[row, col, 2] = logit(box.cy * s - row)
    tensor[row, col, 3] = logit(box.w)
    tensor[row, col, 4] = logit(box.h)
    cls = np.full(shape.c, -class_margin)
    cls[class_id] = class_margin
    tensor[row, col, 5:] = cls
    return row, col


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy class-aware non-maximum suppression.

    Keeps the highest-confidence detection, removes same-class detections
    overlapping it above iou_threshold, repeats.  Output is sorted by
    descending confidence.
    """
    pending = sorted(dets, key=lambda d: -d.confidence)
    keep = []
    while pending:
        best = pending.pop(0)
        keep.append(best)
        pending = [
            d for d in pending
            if d.class_id != best.class_id or iou(d.box, best.box) <= iou_threshold
        ]
    return keep


def partition_cells(oracle: np.ndarray, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Split grid cells by activated oracle objectness.

    Returns (high, low) boolean masks: high where sigmoid(objectness) >= theta,
    low is the complement.  The masks are disjoint and cover the grid.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must be in (0, 1), got {theta}")
    high = sigmoid(oracle[:, :, 0]) >= theta
    return high, ~high
