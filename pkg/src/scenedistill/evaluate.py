"""Detection metrics, the blend-factor sweep, the loss-cost benchmark, and
key-frame adaptivity analysis.

AP uses all-point (precision envelope) interpolation.  Ground truth can be
the stream's true labels or the oracle's own decoded detections, matching
how the adapted student is normally scored against the model it distills
from.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .detection import Box, Detection, GridShape, GroundTruthObject, decode_tensor, iou
from .distill import DistillConfig, bounded_distill_loss, nms_distill_loss
from .pipeline import PipelineConfig, PipelineReport, run_pipeline
from .simstream import FrameRecord, OracleNoiseSpec, oracle_for_frame, synth_oracle

GT_SOURCES = ("true_gt", "oracle_as_gt")


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.5, 0.6, 0.75)
    conf_threshold: float = 0.5
    gt_source: str = "true_gt"
    oracle_conf_threshold: float | None = None  # decode threshold for oracle-as-GT

    def __post_init__(self):
        if self.gt_source not in GT_SOURCES:
            raise ValueError(f"unknown gt_source {self.gt_source!r}, expected one of {GT_SOURCES}")
        thr = self.iou_thresholds
        if any(not 0.0 < t < 1.0 for t in thr) or list(thr) != sorted(set(thr)):
            raise ValueError(f"iou_thresholds must be strictly increasing in (0, 1), got {thr}")

    @property
    def gt_conf(self) -> float:
        return self.oracle_conf_threshold if self.oracle_conf_threshold is not None else self.conf_threshold


def match_detections(dets: list[Detection], gt: list[GroundTruthObject],
                     iou_threshold: float):
    """Greedy matcher: each detection (best first) takes the highest-IOU
    unmatched same-class ground-truth object at or above the threshold.

    Returns (tp_flags, fp_flags, fn_count) with flags in descending-confidence
    order.
    """
    order = sorted(range(len(dets)), key=lambda k: -dets[k].confidence)
    taken = [False] * len(gt)
    tp_flags = []
    for k in order:
        det = dets[k]
        best_j, best_iou = -1, iou_threshold
        for j, obj in enumerate(gt):
            if taken[j] or obj.class_id != det.class_id:
                continue
            v = iou(det.box, obj.box)
            if v >= best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            taken[best_j] = True
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    fp_flags = [not t for t in tp_flags]
    fn_count = sum(1 for t in taken if not t)
    return tp_flags, fp_flags, fn_count


def average_precision(tp_flags: list[bool], n_gt: int) -> float:
    """Area under the precision-recall curve, all-point interpolation.

    tp_flags must be ordered by descending confidence.  With no ground truth,
    returns 1.0 for an empty ranking and 0.0 as soon as any false positive
    exists.
    """
    if n_gt == 0:
        return 1.0 if not tp_flags else 0.0
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=float))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope over recall, integrated at recall steps
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


@dataclass
class ThresholdMetrics:
    iou: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    ap_per_class: dict[int, float]
    mean_ap: float

    def to_dict(self) -> dict:
        return {
            "iou": self.iou, "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "ap_per_class": {str(k): v for k, v in self.ap_per_class.items()},
            "mean_ap": self.mean_ap,
        }


@dataclass
class EvalSummary:
    gt_source: str
    conf_threshold: float
    per_threshold: list[ThresholdMetrics]

    def at(self, iou_thr: float) -> ThresholdMetrics:
        for m in self.per_threshold:
            if abs(m.iou - iou_thr) < 1e-9:
                return m
        raise KeyError(f"no metrics at IOU {iou_thr}")

    def to_dict(self) -> dict:
        return {
            "gt_source": self.gt_source,
            "conf_threshold": self.conf_threshold,
            "per_threshold": [m.to_dict() for m in self.per_threshold],
        }


def evaluate_frames(per_frame_dets: list[list[Detection]],
                    per_frame_gt: list[list[GroundTruthObject]],
                    iou_threshold: float) -> ThresholdMetrics:
    """Score a whole run at one IOU threshold (counts plus per-class AP)."""
    scored = []  # (confidence, is_tp, class_id)
    n_gt_per_class: dict[int, int] = {}
    fn_total = 0
    for dets, gt in zip(per_frame_dets, per_frame_gt):
        for obj in gt:
            n_gt_per_class[obj.class_id] = n_gt_per_class.get(obj.class_id, 0) + 1
        ordered = sorted(dets, key=lambda d: -d.confidence)
        tp_flags, _, fn = match_detections(ordered, gt, iou_threshold)
        fn_total += fn
        scored.extend(
            (det.confidence, flag, det.class_id) for det, flag in zip(ordered, tp_flags)
        )
    tp_total = sum(1 for _, flag, _ in scored if flag)
    fp_total = len(scored) - tp_total
    precision = tp_total / (tp_total + fp_total) if scored else 0.0
    recall = tp_total / (tp_total + fn_total) if tp_total + fn_total else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0

    ap_per_class = {}
    for cls, n_gt in sorted(n_gt_per_class.items()):
        flags = [flag for conf, flag, c in sorted(scored, key=lambda r: -r[0]) if c == cls]
        ap_per_class[cls] = average_precision(flags, n_gt)
    mean_ap = float(np.mean(list(ap_per_class.values()))) if ap_per_class else 0.0
    return ThresholdMetrics(
        iou=iou_threshold, tp=tp_total, fp=fp_total, fn=fn_total,
        precision=precision, recall=recall, f1=f1,
        ap_per_class=ap_per_class, mean_ap=mean_ap,
    )


def ground_truth_for(stream: list[FrameRecord], grid: GridShape, eval_cfg: EvalConfig,
                     noise: OracleNoiseSpec | None = None,
                     oracle_seed: int = 0) -> list[list[GroundTruthObject]]:
    """Per-frame ground truth: labels, or the oracle's decoded detections."""
    if eval_cfg.gt_source == "true_gt":
        return [rec.gt for rec in stream]
    noise = noise if noise is not None else OracleNoiseSpec()
    out = []
    for rec in stream:
        tensor = oracle_for_frame(rec, noise, grid, oracle_seed)
        dets = decode_tensor(tensor, grid, eval_cfg.gt_conf)
        out.append([
            GroundTruthObject(box=d.box, class_id=d.class_id, object_id=i)
            for i, d in enumerate(dets)
        ])
    return out


def evaluate_report(report: PipelineReport, stream: list[FrameRecord], grid: GridShape,
                    eval_cfg: EvalConfig, noise: OracleNoiseSpec | None = None,
                    oracle_seed: int = 0) -> EvalSummary:
    """Attach an evaluation over all configured IOU thresholds to a run report."""
    gt = ground_truth_for(stream[:len(report.detections)], grid, eval_cfg, noise, oracle_seed)
    summary = EvalSummary(
        gt_source=eval_cfg.gt_source,
        conf_threshold=eval_cfg.conf_threshold,
        per_threshold=[
            evaluate_frames(report.detections, gt, thr) for thr in eval_cfg.iou_thresholds
        ],
    )
    report.evaluation = summary.to_dict()
    return summary


def ablate_lambda(stream: list[FrameRecord], grid: GridShape, lambdas: list[float],
                  pipe_cfg: PipelineConfig, eval_cfg: EvalConfig,
                  iou_thr: float = 0.5) -> list[dict]:
    """Run the pipeline once per blend factor on identical streams and seeds.

    Sequential mode keeps runs deterministic; metrics are scored against the
    configured ground-truth source at one IOU threshold.
    """
    rows = []
    for lam in lambdas:
        cfg = replace(pipe_cfg, mode="sequential", distill=replace(pipe_cfg.distill, lam=lam))
        report = run_pipeline(stream, grid, cfg)
        gt = ground_truth_for(stream, grid, eval_cfg, cfg.oracle_noise,
                              cfg.oracle_seed if cfg.oracle_seed is not None else cfg.seed)
        metrics = evaluate_frames(report.detections, gt, iou_thr)
        rows.append({
            "lam": lam,
            "ap": metrics.mean_ap,
            "f1": metrics.f1,
            "tp": metrics.tp,
            "fp": metrics.fp,
            "key_frames": report.n_key_frames,
            "key_fraction": report.key_fraction,
        })
    return rows


def bench_loss_cost(target_counts: list[int], trials: int, grid: GridShape,
                    seed: int = 0, cfg: DistillConfig | None = None) -> list[dict]:
    """Median wall-clock of the tensor-space loss vs the decode+NMS loss as
    the number of targets per frame grows.

    One warm-up call per loss is excluded from the medians; clocks are
    monotonic.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if max(target_counts, default=0) > grid.s * grid.s:
        raise ValueError(f"cannot place {max(target_counts)} objects on a {grid.s}x{grid.s} grid")
    cfg = cfg or DistillConfig()
    rng = np.random.default_rng(seed)
    cases = []
    for n in target_counts:
        cells = rng.choice(grid.s * grid.s, size=n, replace=False) if n else []
        gt = []
        for i, cell in enumerate(cells):
            row, col = divmod(int(cell), grid.s)
            gt.append(GroundTruthObject(
                box=Box((col + 0.5) / grid.s, (row + 0.5) / grid.s, 0.1, 0.1),
                class_id=int(rng.integers(grid.c)), object_id=i,
            ))
        oracle = synth_oracle(gt, OracleNoiseSpec(), grid, rng)
        student = oracle + rng.normal(0.0, 0.05, size=oracle.shape)
        bounded_distill_loss(student, oracle, cfg)
        nms_distill_loss(student, oracle, gt, grid)
        cases.append((n, student, oracle, gt))

    # trials interleaved across target counts so scheduler drift hits all
    # cells equally instead of biasing whole measurement blocks
    t_bounded = {n: [] for n in target_counts}
    t_nms = {n: [] for n in target_counts}
    for _ in range(trials):
        for n, student, oracle, gt in cases:
            t0 = time.perf_counter()
            bounded_distill_loss(student, oracle, cfg)
            t_bounded[n].append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            nms_distill_loss(student, oracle, gt, grid)
            t_nms[n].append(time.perf_counter() - t0)
    return [
        {
            "n_targets": n,
            "bounded_ms": float(np.median(t_bounded[n]) * 1e3),
            "nms_ms": float(np.median(t_nms[n]) * 1e3),
        }
        for n in target_counts
    ]


def keyframe_histogram(report: PipelineReport, bin_size: int) -> list[int]:
    """Positive decisions counted per bin of consecutive frames."""
    if bin_size < 1:
        raise ValueError(f"bin_size must be >= 1, got {bin_size}")
    flags = [1 if d["train"] else 0 for d in report.decisions]
    return [
        sum(flags[i:i + bin_size]) for i in range(0, len(flags), bin_size)
    ]
