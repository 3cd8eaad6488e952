"""One-pass-evaluation metrics and robustness bucketing.

Success is the AUC of the success-rate curve over 21 IoU thresholds in
[0, 1]; a frame counts as successful at threshold t when its IoU is >= t
and strictly positive (so zero-overlap tracking scores 0 and perfect
tracking scores 100 exactly). Precision is the AUC of the
fraction-within-threshold curve over 21 center-error thresholds in [0, 2] m,
normalized to percent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, GridTrackError, center_distance, iou3d

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.linspace(0.0, 2.0, 21)


class MetricError(GridTrackError):
    pass


def success_curve(ious: np.ndarray) -> np.ndarray:
    ious = np.asarray(ious, dtype=np.float64)
    return np.array([np.mean((ious >= t) & (ious > 0.0))
                     for t in SUCCESS_THRESHOLDS])


def success_metric(ious) -> float:
    """AUC of the success-rate curve, in percent."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise MetricError("success_metric needs at least one frame")
    if ((ious < 0) | (ious > 1)).any():
        raise MetricError("IoU values must lie in [0, 1]")
    return float(np.trapezoid(success_curve(ious), SUCCESS_THRESHOLDS) * 100.0)


def precision_curve(errors: np.ndarray) -> np.ndarray:
    errors = np.asarray(errors, dtype=np.float64)
    return np.array([np.mean(errors <= t) for t in PRECISION_THRESHOLDS])


def precision_metric(errors) -> float:
    """AUC of the fraction-within-threshold curve over [0, 2] m, in percent."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise MetricError("precision_metric needs at least one frame")
    if (errors < 0).any():
        raise MetricError("center errors must be non-negative")
    auc = np.trapezoid(precision_curve(errors), PRECISION_THRESHOLDS)
    return float(auc / PRECISION_THRESHOLDS[-1] * 100.0)


@dataclass
class OpeResult:
    """Per-sequence one-pass evaluation outcome."""

    ious: np.ndarray
    center_errors: np.ndarray
    success: float
    precision: float
    fallback_count: int = 0

    @property
    def frames(self) -> int:
        return int(self.ious.shape[0])

    @property
    def mean_center_error(self) -> float:
        return float(self.center_errors.mean())


def evaluate_ope(predictions: list[Box3D], gt_boxes: list[Box3D],
                 fallback_count: int = 0) -> OpeResult:
    """Score predicted boxes for frames 2..T against their ground truth."""
    if len(predictions) != len(gt_boxes):
        raise MetricError(f"{len(predictions)} predictions vs "
                          f"{len(gt_boxes)} ground-truth boxes")
    if not predictions:
        raise MetricError("nothing to evaluate")
    ious = np.array([iou3d(p, g) for p, g in zip(predictions, gt_boxes)])
    errors = np.array([center_distance(p, g)
                       for p, g in zip(predictions, gt_boxes)])
    return OpeResult(ious, errors, success_metric(ious),
                     precision_metric(errors), fallback_count)


def pool_results(results: list[OpeResult]) -> OpeResult:
    """Frame-pooled aggregate over sequences."""
    if not results:
        raise MetricError("no results to pool")
    ious = np.concatenate([r.ious for r in results])
    errors = np.concatenate([r.center_errors for r in results])
    return OpeResult(ious, errors, success_metric(ious),
                     precision_metric(errors),
                     sum(r.fallback_count for r in results))


SPARSITY_EDGES = (10, 20, 50, 100, 200)
DISTRACTOR_EDGES = (1, 3)


@dataclass
class BucketRow:
    label: str
    n_sequences: int
    n_frames: int
    success: float | None
    precision: float | None


@dataclass
class BucketReport:
    axis: str
    rows: list[BucketRow]
    excluded: int = 0

    def as_records(self) -> list[dict]:
        recs = []
        for row in self.rows:
            recs.append({"axis": self.axis, "bucket": row.label,
                         "sequences": row.n_sequences, "frames": row.n_frames,
                         "success": row.success, "precision": row.precision})
        return recs


def _bucket_labels(edges) -> list[str]:
    labels = [f"<{edges[0]}"]
    for lo, hi in zip(edges[:-1], edges[1:]):
        labels.append(f"{lo}-{hi}")
    labels.append(f">={edges[-1]}")
    return labels


def bucket_report(results: list[tuple[dict, OpeResult]], axis: str,
                  edges=None) -> BucketReport:
    """Group per-sequence results along a robustness axis.

    ``axis`` is ``"sparsity"`` (bucketed by first-frame target point count)
    or ``"distractors"``. Sequences missing the required metadata are
    excluded and counted.
    """
    if axis == "sparsity":
        key = "first_frame_points"
        edges = tuple(edges) if edges is not None else SPARSITY_EDGES
    elif axis == "distractors":
        key = "distractors"
        edges = tuple(edges) if edges is not None else DISTRACTOR_EDGES
    else:
        raise MetricError(f"unknown bucket axis {axis!r}")

    buckets: list[list[OpeResult]] = [[] for _ in range(len(edges) + 1)]
    excluded = 0
    for meta, result in results:
        if key not in meta:
            excluded += 1
            continue
        value = meta[key]
        idx = int(np.searchsorted(np.asarray(edges), value, side="right"))
        buckets[idx].append(result)

    rows = []
    for label, members in zip(_bucket_labels(edges), buckets):
        if members:
            pooled = pool_results(members)
            rows.append(BucketRow(label, len(members), pooled.frames,
                                  pooled.success, pooled.precision))
        else:
            rows.append(BucketRow(label, 0, 0, None, None))
    return BucketReport(axis, rows, excluded)
