"""Rotated BEV IoU, greedy detection matching, AP and heading-weighted AP."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .world import PEDESTRIAN, VEHICLE, Box7, box_corners_bev, wrap_angle

DEFAULT_IOU_THRESHOLDS = {VEHICLE: 0.7, PEDESTRIAN: 0.5}


# -------------------------------------------------------------------- IoU


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area (positive for counter-clockwise order)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: intersect a polygon with a convex counter-clockwise polygon."""
    out = list(map(tuple, subject))
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _as_box_array(box) -> np.ndarray:
    arr = box.as_array() if isinstance(box, Box7) else np.asarray(box, dtype=np.float64)[:7]
    if not (arr[3] > 0 and arr[4] > 0):
        raise ValueError(f"degenerate box footprint l={arr[3]} w={arr[4]}")
    return arr


def iou_bev(a, b) -> float:
    """IoU of two rotated BEV footprints (Box7 or 7-vectors)."""
    a, b = _as_box_array(a), _as_box_array(b)
    if np.hypot(a[0] - b[0], a[1] - b[1]) > 0.5 * (np.hypot(a[3], a[4]) + np.hypot(b[3], b[4])):
        return 0.0
    pa, pb = box_corners_bev(a[None])[0], box_corners_bev(b[None])[0]
    inter = max(polygon_area(clip_polygon(pa, pb)), 0.0)
    union = a[3] * a[4] + b[3] * b[4] - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a).reshape(-1, 7), np.asarray(b).reshape(-1, 7)
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            out[i, j] = iou_bev(a[i], b[j])
    return out


# --------------------------------------------------------------- matching


@dataclass
class MatchResult:
    """Per-detection outcome for one class (possibly pooled over frames)."""

    scores: np.ndarray  # (n,)
    tp: np.ndarray  # (n,) bool
    heading_error: np.ndarray  # (n,) wrapped |dtheta| in [0, pi]; nan for false positives
    matched_gt: np.ndarray  # (n,) gt index or -1
    num_gt: int

    @property
    def num_fn(self) -> int:
        return self.num_gt - int(self.tp.sum())

    @classmethod
    def concat(cls, parts: list["MatchResult"]) -> "MatchResult":
        if not parts:
            return cls(np.zeros(0), np.zeros(0, bool), np.zeros(0), np.zeros(0, np.int64), 0)
        return cls(np.concatenate([p.scores for p in parts]), np.concatenate([p.tp for p in parts]),
                   np.concatenate([p.heading_error for p in parts]),
                   np.concatenate([p.matched_gt for p in parts]), sum(p.num_gt for p in parts))


def heading_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(wrap_angle(np.asarray(a) - np.asarray(b)))


def match_class(det_boxes: np.ndarray, scores: np.ndarray, gt_boxes: np.ndarray, iou_thr: float,
                ious: np.ndarray | None = None) -> MatchResult:
    """Greedy by descending score; each detection takes the unmatched GT of highest IoU >= thr."""
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 7)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    scores = np.asarray(scores, dtype=np.float64)
    n, m = len(det_boxes), len(gt_boxes)
    if ious is None:
        ious = iou_matrix(det_boxes, gt_boxes)
    tp = np.zeros(n, dtype=bool)
    herr = np.full(n, np.nan)
    matched = np.full(n, -1, dtype=np.int64)
    taken = np.zeros(m, dtype=bool)
    for i in np.lexsort((np.arange(n), -scores)):
        if m == 0:
            break
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thr and cand[j] > 0:
            taken[j] = True
            tp[i], matched[i] = True, j
            herr[i] = heading_error(det_boxes[i, 6], gt_boxes[j, 6])
    return MatchResult(scores, tp, herr, matched, m)


def match_detections(dets: list, gts: list[Box7], iou_thresholds: dict[int, float] | None = None) -> dict[int, MatchResult]:
    """Per-class greedy matching of Detection-like objects (``.box``, ``.score``) against GT boxes."""
    thr = DEFAULT_IOU_THRESHOLDS if iou_thresholds is None else iou_thresholds
    out = {}
    for cls, t in thr.items():
        d = [x for x in dets if x.box.class_id == cls]
        g = [b for b in gts if b.class_id == cls]
        out[cls] = match_class(np.array([x.box.as_array() for x in d]).reshape(-1, 7),
                               np.array([x.score for x in d]), np.array([b.as_array() for b in g]).reshape(-1, 7), t)
    return out


# ---------------------------------------------------------------- AP / APH


def _envelope_area(recall: np.ndarray, precision: np.ndarray) -> float:
    if len(recall) == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    dr = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(dr * env))


def _sweep(match: MatchResult, weights: np.ndarray) -> float:
    if match.num_gt == 0 or len(match.scores) == 0:
        return 0.0
    order = np.lexsort((np.arange(len(match.scores)), -match.scores))
    tp = match.tp[order].astype(np.float64)
    w = weights[order]
    k = np.arange(1, len(tp) + 1)
    recall = np.cumsum(tp) / match.num_gt
    precision = np.cumsum(tp * w) / k
    return _envelope_area(recall, precision)


def average_precision(match: MatchResult) -> float:
    """Area under the monotone precision envelope over the score sweep."""
    return _sweep(match, np.ones(len(match.scores)))


def heading_weights(match: MatchResult) -> np.ndarray:
    err = np.where(match.tp, np.nan_to_num(match.heading_error), 0.0)
    return np.where(match.tp, 1.0 - np.clip(err, 0, math.pi) / math.pi, 0.0)


def aph(match: MatchResult) -> float:
    """Same sweep as AP with each true positive weighted by 1 - dtheta/pi in the precision numerator."""
    return _sweep(match, heading_weights(match))


@dataclass
class ClassMetrics:
    class_id: int
    ap: float
    aph: float
    num_gt: int
    num_det: int


def evaluate(frames: list[tuple[list, list[Box7]]], iou_thresholds: dict[int, float] | None = None) -> dict[int, ClassMetrics]:
    """Pool per-frame matches per class and report AP/APH."""
    thr = DEFAULT_IOU_THRESHOLDS if iou_thresholds is None else iou_thresholds
    pooled: dict[int, list[MatchResult]] = {c: [] for c in thr}
    for dets, gts in frames:
        for c, m in match_detections(dets, gts, thr).items():
            pooled[c].append(m)
    out = {}
    for c, parts in pooled.items():
        m = MatchResult.concat(parts)
        out[c] = ClassMetrics(c, average_precision(m), aph(m), m.num_gt, len(m.scores))
    return out


def mean_ap(metrics: dict[int, ClassMetrics]) -> float:
    vals = [m.ap for m in metrics.values() if m.num_gt > 0]
    return float(np.mean(vals)) if vals else 0.0


def write_metrics_csv(path: str | Path, run_id: str, metrics: dict[int, ClassMetrics]) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["run_id", "class", "AP", "APH"])
        for c in sorted(metrics):
            w.writerow([run_id, c, f"{metrics[c].ap:.6f}", f"{metrics[c].aph:.6f}"])


def metrics_summary(metrics: dict[int, ClassMetrics]) -> dict:
    return {
        "classes": {str(c): {"AP": m.ap, "APH": m.aph, "num_gt": m.num_gt, "num_det": m.num_det}
                    for c, m in sorted(metrics.items())},
        "mAP": mean_ap(metrics),
        "mAPH": float(np.mean([m.aph for m in metrics.values() if m.num_gt > 0] or [0.0])),
    }


def write_metrics_json(path: str | Path, metrics: dict[int, ClassMetrics]) -> None:
    Path(path).write_text(json.dumps(metrics_summary(metrics), indent=2, sort_keys=True))
