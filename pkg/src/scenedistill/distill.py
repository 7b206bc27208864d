"""Distillation losses and the online decoder update step.

The core loss is an objectness-gated MSE between student and oracle logit
tensors: cells where the oracle is confident are matched exactly, the rest
are pulled toward a blend of the student's own output and the oracle, which
keeps the student from chasing oracle noise in empty regions.  Two slower
reference losses (a ground-truth/teacher weighted loss and a decode+NMS
based loss) exist as accuracy and compute-cost baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detection import (
    Detection,
    GridShape,
    GroundTruthObject,
    decode_tensor,
    iou,
    nms,
    partition_cells,
)
from .models import DecoderParams, FeatureFrame


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 0.4          # blend factor for low-confidence cells
    gate: float = 0.5         # activated-objectness split threshold
    beta: float = 0.5         # ground-truth weight in the reference loss
    lr: float = 0.01
    steps_per_event: int = 5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")
        if not 0.0 < self.gate < 1.0:
            raise ValueError(f"gate must be in (0, 1), got {self.gate}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.steps_per_event < 1:
            raise ValueError(f"steps_per_event must be >= 1, got {self.steps_per_event}")


@dataclass(frozen=True)
class FeedbackRecord:
    """Outcome of one distillation event, fed back to the selector."""

    frame_id: int
    loss_before: float
    loss_after: float
    decision_source: str  # "lstm" | "random" | "both"
    error: str | None = None

    @property
    def delta_l(self) -> float:
        return self.loss_after - self.loss_before


def compose_target(student: np.ndarray, oracle: np.ndarray, cfg: DistillConfig) -> np.ndarray:
    """Build the training target: oracle on confident cells, blend elsewhere.

    The student values entering the blend are constants (a copy), so no
    gradient flows into the target.
    """
    if student.shape != oracle.shape:
        raise ValueError(f"shape mismatch: {student.shape} vs {oracle.shape}")
    high, low = partition_cells(oracle, cfg.gate)
    target = oracle.copy()
    target[low] = cfg.lam * student[low] + (1.0 - cfg.lam) * oracle[low]
    return target


def cell_weights(oracle: np.ndarray, cfg: DistillConfig) -> np.ndarray:
    """Per-cell quadratic weights equivalent to the two partition means.

    Confident cells weigh 1/(confident scalars), the rest (1 - lam)^2 /
    (background scalars); contracting these with the squared student-oracle
    difference reproduces the gated loss with plain elementwise arithmetic,
    which keeps the training worker cheap.
    """
    high, low = partition_cells(oracle, cfg.gate)
    channels = oracle.shape[-1]
    n_high = int(high.sum()) * channels
    n_low = int(low.sum()) * channels
    w_high = 1.0 / n_high if n_high else 0.0
    w_low = (1.0 - cfg.lam) ** 2 / n_low if n_low else 0.0
    return np.where(high, w_high, w_low)[:, :, None]


def bounded_distill_loss(student: np.ndarray, oracle: np.ndarray, cfg: DistillConfig,
                         weights: np.ndarray | None = None) -> float:
    """Gated MSE against the composed target, mean-reduced per partition.

    Algebraically the low-confidence term equals (1 - lam)^2 times the plain
    MSE on those cells, so the whole loss is two masked MSEs.  Mean reduction
    keeps the scale independent of grid size.  Empty partitions contribute 0.
    """
    if student.shape != oracle.shape:
        raise ValueError(f"shape mismatch: {student.shape} vs {oracle.shape}")
    if weights is None:
        weights = cell_weights(oracle, cfg)
    diff = student - oracle
    diff *= diff
    diff *= weights
    return float(diff.sum())


def bounded_loss_grad(student: np.ndarray, oracle: np.ndarray, cfg: DistillConfig,
                      weights: np.ndarray | None = None, out: np.ndarray | None = None) -> np.ndarray:
    """Gradient of bounded_distill_loss with respect to the student tensor."""
    if weights is None:
        weights = cell_weights(oracle, cfg)
    grad = np.subtract(student, oracle, out=out)
    grad *= weights
    grad *= 2.0
    return grad


def _match_greedy(dets: list[Detection], targets: list, iou_threshold: float = 0.5):
    """Greedy confidence-ordered matching; returns (pairs, unmatched_dets, unmatched_targets)."""
    order = sorted(range(len(dets)), key=lambda k: -dets[k].confidence)
    taken = [False] * len(targets)
    pairs, unmatched = [], []
    for k in order:
        det = dets[k]
        best_j, best_iou = -1, iou_threshold
        for j, tgt in enumerate(targets):
            if taken[j]:
                continue
            v = iou(det.box, tgt.box)
            if v >= best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            taken[best_j] = True
            pairs.append((det, targets[best_j]))
        else:
            unmatched.append(det)
    missed = [t for j, t in enumerate(targets) if not taken[j]]
    return pairs, unmatched, missed


def _pair_loss(pairs, unmatched, missed) -> float:
    """Quadratic objectness + box + class penalty over a matching."""
    total, n = 0.0, 0
    for det, tgt in pairs:
        box_mse = np.mean([
            (det.box.cx - tgt.box.cx) ** 2,
            (det.box.cy - tgt.box.cy) ** 2,
            (det.box.w - tgt.box.w) ** 2,
            (det.box.h - tgt.box.h) ** 2,
        ])
        cls = 0.0 if det.class_id == tgt.class_id else 1.0
        total += (det.confidence - 1.0) ** 2 + box_mse + cls
        n += 1
    for det in unmatched:
        total += det.confidence ** 2
        n += 1
    for _ in missed:
        total += 1.0
        n += 1
    return total / n if n else 0.0


def general_distill_loss(student_dets: list[Detection], gt: list[GroundTruthObject],
                         oracle_dets: list[Detection], beta: float) -> float:
    """Weighted combination of a ground-truth loss and a teacher loss.

    beta = 1 ignores the teacher entirely, beta = 0 ignores ground truth.
    Reference baseline only; not used on the training path.
    """
    l_gt = _pair_loss(*_match_greedy(student_dets, gt))
    l_t = _pair_loss(*_match_greedy(student_dets, oracle_dets))
    return beta * l_gt + (1.0 - beta) * l_t


def nms_distill_loss(student: np.ndarray, oracle: np.ndarray, gt: list[GroundTruthObject],
                     shape: GridShape, conf_threshold: float = 0.5,
                     iou_threshold: float = 0.5) -> float:
    """Decode-and-match distillation loss (box + class + objectness terms).

    Decodes both tensors, suppresses duplicates, then scores the student's
    boxes against ground truth and against the oracle's boxes.  Exists mainly
    so its wall-clock cost (which grows with the number of decoded targets)
    can be benchmarked against the tensor-space loss.
    """
    student_dets = nms(decode_tensor(student, shape, conf_threshold), iou_threshold)
    oracle_dets = nms(decode_tensor(oracle, shape, conf_threshold), iou_threshold)
    l_gt = _pair_loss(*_match_greedy(student_dets, gt))
    l_t = _pair_loss(*_match_greedy(student_dets, oracle_dets))
    return l_gt + l_t


def distill_step(params: DecoderParams, features: FeatureFrame, oracle: np.ndarray,
                 cfg: DistillConfig, frame_id: int = -1,
                 decision_source: str = "both") -> tuple[DecoderParams, FeedbackRecord]:
    """Run one distillation event: k gradient steps toward the composed target.

    The target is recomposed from the current student output at every step
    (equivalently, the gated weight map is applied to the fresh difference).
    Returns the updated params and a FeedbackRecord carrying the on-frame
    loss change.  A non-finite loss or update aborts the event with params
    unchanged.

    The inner loop runs on the distillation worker while inference shares the
    interpreter, so it reuses buffers and in-place ops instead of the public
    per-call functions.
    """
    weights = cell_weights(oracle, cfg)
    x = features.values.reshape(-1, params.w1.shape[0])
    n, d = x.shape
    hidden_dim = params.w1.shape[1]
    channels = params.w2.shape[1]
    w1, b1 = params.w1.copy(), params.b1.copy()
    w2, b2 = params.w2.copy(), params.b2.copy()
    w_flat = weights.reshape(-1, 1)
    oracle_flat = oracle.reshape(-1, channels)

    a = np.empty((n, hidden_dim))
    out = np.empty((n, channels))
    g = np.empty((n, channels))
    dz = np.empty((n, hidden_dim))
    ones = np.empty((n, hidden_dim))

    def forward():
        np.matmul(x, w1, out=a)
        np.add(a, b1, out=a)
        np.tanh(a, out=a)
        np.matmul(a, w2, out=out)
        np.add(out, b2, out=out)

    def loss():
        np.subtract(out, oracle_flat, out=g)
        np.multiply(g, g, out=g)
        np.multiply(g, w_flat, out=g)
        return float(g.sum())

    forward()
    loss_before = loss()
    if not np.isfinite(loss_before):
        return params, FeedbackRecord(frame_id, loss_before, loss_before,
                                      decision_source, error="non-finite loss")

    lr = cfg.lr
    for _ in range(cfg.steps_per_event):
        forward()
        np.subtract(out, oracle_flat, out=g)
        g *= w_flat
        g *= 2.0
        # backprop through the two-layer head, then the SGD update in place
        gw2 = a.T @ g
        gb2 = g.sum(axis=0)
        np.matmul(g, w2.T, out=dz)
        np.multiply(a, a, out=ones)
        np.subtract(1.0, ones, out=ones)
        dz *= ones
        gw1 = x.T @ dz
        gb1 = dz.sum(axis=0)
        gw1 *= lr
        gb1 *= lr
        gw2 *= lr
        gb2 *= lr
        w1 -= gw1
        b1 -= gb1
        w2 -= gw2
        b2 -= gb2

    forward()
    loss_after = loss()
    finite = (np.isfinite(loss_after) and np.all(np.isfinite(w1)) and np.all(np.isfinite(b1))
              and np.all(np.isfinite(w2)) and np.all(np.isfinite(b2)))
    if not finite:
        return params, FeedbackRecord(frame_id, loss_before, loss_before,
                                      decision_source, error="non-finite loss")
    new_params = DecoderParams(w1=w1, b1=b1, w2=w2, b2=b2,
                               version=params.version + cfg.steps_per_event)
    return new_params, FeedbackRecord(frame_id, loss_before, loss_after, decision_source)
