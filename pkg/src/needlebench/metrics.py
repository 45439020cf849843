"""Tracking and insertion-outcome metrics.

Tracking quality over a set of frames:
  * auc: mean success rate over IoU thresholds 0.00, 0.05, ..., 1.00
    (21 points, success means iou > threshold, so auc caps at 20/21);
  * precision: fraction of frames with center error <= 20 px;
  * err_mm / sd_mm: mean and population sd of center error in mm.

Per-mode results are computed over all frames of that mode's videos; the
pooled row is the plain mean of the per-mode values (not frame-weighted).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

IOU_THRESHOLDS = np.round(np.arange(0.0, 1.0001, 0.05), 2)  # 21 points
PRECISION_RADIUS_PX = 20.0


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two x1,y1,x2,y2 boxes.

    Degenerate boxes (non-positive extent) score 0 and emit a warning.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a[2] <= a[0] or a[3] <= a[1] or b[2] <= b[0] or b[3] <= b[1]:
        warnings.warn("degenerate box in iou; scoring 0", stacklevel=2)
        return 0.0
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def center_error_px(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ca = np.array([(a[0] + a[2]) / 2.0, (a[1] + a[3]) / 2.0])
    cb = np.array([(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0])
    return float(np.linalg.norm(ca - cb))


@dataclass(frozen=True)
class TrackingEval:
    auc: float
    precision: float
    err_mm: float
    sd_mm: float
    n_frames: int


def success_curve(ious: np.ndarray) -> np.ndarray:
    """(21,) success rate at each IoU threshold, success = iou > thr."""
    ious = np.asarray(ious, dtype=np.float64)
    return np.array([(ious > t).mean() for t in IOU_THRESHOLDS])


def eval_boxes(pred_boxes: np.ndarray, gt_boxes: np.ndarray,
               mm_per_px: float) -> TrackingEval:
    """Single pass over (N,4) predictions and ground truths."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    if pred_boxes.shape != gt_boxes.shape or pred_boxes.ndim != 2:
        raise ValueError(
            f"box arrays must be matching (N,4), got {pred_boxes.shape} "
            f"vs {gt_boxes.shape}")
    ious = np.array([iou(p, g) for p, g in zip(pred_boxes, gt_boxes)])
    errs_px = np.array([center_error_px(p, g)
                        for p, g in zip(pred_boxes, gt_boxes)])
    errs_mm = errs_px * mm_per_px
    return TrackingEval(
        auc=float(success_curve(ious).mean()),
        precision=float((errs_px <= PRECISION_RADIUS_PX).mean()),
        err_mm=float(errs_mm.mean()),
        sd_mm=float(errs_mm.std()),  # population sd
        n_frames=int(len(ious)),
    )


def eval_by_mode(videos: list[tuple[str, np.ndarray, np.ndarray]],
                 mm_per_px: float) -> dict[str, TrackingEval]:
    """Per-mode evals plus a pooled row that is the mean over modes.

    videos: (mode, pred_boxes (N,4), gt_boxes (N,4)) per video.
    """
    by_mode: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    for mode, preds, gts in videos:
        by_mode.setdefault(mode, []).append((preds, gts))
    out: dict[str, TrackingEval] = {}
    for mode in sorted(by_mode):
        preds = np.concatenate([p for p, _ in by_mode[mode]], axis=0)
        gts = np.concatenate([g for _, g in by_mode[mode]], axis=0)
        out[mode] = eval_boxes(preds, gts, mm_per_px)
    evals = [out[m] for m in sorted(by_mode)]
    out["pooled"] = TrackingEval(
        auc=float(np.mean([e.auc for e in evals])),
        precision=float(np.mean([e.precision for e in evals])),
        err_mm=float(np.mean([e.err_mm for e in evals])),
        sd_mm=float(np.mean([e.sd_mm for e in evals])),
        n_frames=int(sum(e.n_frames for e in evals)),
    )
    return out


@dataclass(frozen=True)
class InsertionSummary:
    suc: float  # success rate in [0, 1]
    mean_time_s: float  # over successful trials; nan if none
    n_trials: int
    n_success: int


def summarize_trials(results: list[dict]) -> InsertionSummary:
    """Aggregate trial result dicts with keys success(bool), duration_s."""
    n = len(results)
    succ = [r for r in results if r["success"]]
    mean_t = float(np.mean([r["duration_s"] for r in succ])) if succ else float("nan")
    return InsertionSummary(suc=(len(succ) / n if n else 0.0),
                            mean_time_s=mean_t, n_trials=n, n_success=len(succ))
