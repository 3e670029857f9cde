"""Detection (segmentation, voxel diffusion, CenterNet), occupancy and roadgraph heads."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import iou_bev
from .nn import MLP, Conv3x3, Linear, Module
from .voxel import GridSpec, SparseBEVMap, cell_keys, unpack_keys
from .world import DETECTION_CLASSES, Box7, Polyline, points_in_boxes_bev

REG_DIM = 8  # dx, dy, z, log l, log w, log h, sin, cos
GAUSSIAN_OVERLAP = 0.1
DIFFUSION_THRESHOLD = 0.3
FG_PRIOR_BIAS = -2.2

OCC_FREE = 0
OCC_CLASSES = ("free", "vehicle", "pedestrian", "static")
ROAD_BACKGROUND, ROAD_LANE, ROAD_BOUNDARY = 0, 1, 2
ROAD_CLASSES = ("background", "lane", "boundary")


@dataclass(frozen=True)
class Detection:
    box: Box7
    score: float
    frame_id: str | int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def class_id(self) -> int:
        return self.box.class_id


# ------------------------------------------------------------ densify


def densify(bev: SparseBEVMap, grid: GridSpec, batch_size: int) -> Tensor:
    """Scatter a stride-1 map into a (B, rows, cols, C) tensor; absent cells are zero."""
    if bev.num_cells and not grid.contains(bev.coords).all():
        raise ValueError("cells outside the grid cannot be densified")
    idx = bev.batch * (grid.rows * grid.cols) + grid.dense_index(bev.coords)
    flat = ad.scatter_add(bev.features, idx, batch_size * grid.rows * grid.cols)
    return ad.reshape(flat, (batch_size, grid.rows, grid.cols, bev.width))


def sparse_rows(bev: SparseBEVMap, grid: GridSpec) -> np.ndarray:
    """Flat (B*rows*cols) positions of the map's cells."""
    return bev.batch * (grid.rows * grid.cols) + grid.dense_index(bev.coords)


# ------------------------------------------------------- segmentation


class SegmentationHead(Module):
    def __init__(self, rng, width: int):
        self.linear = Linear(rng, width, 1)
        self.linear.bias.data[:] = FG_PRIOR_BIAS


def fg_segmentation(features: Tensor, params: SegmentationHead) -> Tensor:
    """Per-cell foreground logits (N,); probabilities are sigmoid(logits)."""
    return ad.reshape(params.linear(features), (-1,))


def fg_targets(bev: SparseBEVMap, boxes_per_sample: list[np.ndarray], grid: GridSpec) -> np.ndarray:
    """1 for cells whose center lies inside any ground-truth footprint, else 0."""
    out = np.zeros(bev.num_cells)
    centers = grid.cell_center(bev.coords)
    for b, boxes in enumerate(boxes_per_sample):
        sel = np.flatnonzero(bev.batch == b)
        boxes = np.asarray(boxes).reshape(-1, 7)
        if len(sel) and len(boxes):
            out[sel] = points_in_boxes_bev(centers[sel], boxes).any(axis=1)
    return out


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Binary focal loss averaged over elements."""
    t = np.asarray(targets, dtype=np.float64)
    p = ad.sigmoid(logits)
    logp, log1mp = ad.log_sigmoid(logits), ad.log_sigmoid(-logits)
    pos = ad.mul(ad.mul(ad.power(1.0 - p, gamma), logp), alpha * t)
    neg = ad.mul(ad.mul(ad.power(p, gamma), log1mp), (1 - alpha) * (1 - t))
    return -ad.mean(pos + neg)


# ------------------------------------------------------ voxel diffusion


def voxel_diffusion(bev: SparseBEVMap, fg_prob: np.ndarray, threshold: float = DIFFUSION_THRESHOLD, k: int = 3,
                    grid: GridSpec | None = None) -> SparseBEVMap:
    """Dilate confident foreground cells into their k x k neighborhood.

    Each output cell's features are the elementwise max over itself (if it
    existed) and every foreground cell whose neighborhood covers it. With a
    grid, dilated cells that leave it are dropped.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"diffusion kernel must be odd and >= 1, got {k}")
    fg_prob = np.asarray(fg_prob.data if isinstance(fg_prob, Tensor) else fg_prob, dtype=np.float64).reshape(-1)
    if bev.num_cells == 0:
        return bev
    fg = np.flatnonzero(fg_prob >= threshold)
    h = k // 2
    dr, dc = np.meshgrid(np.arange(-h, h + 1), np.arange(-h, h + 1), indexing="ij")
    offs = np.stack([dr.ravel(), dc.ravel()], axis=1)
    src = np.concatenate([np.arange(bev.num_cells), np.repeat(fg, len(offs))])
    dst = np.concatenate([bev.coords, (bev.coords[fg][:, None, :] + offs[None]).reshape(-1, 2)])
    bat = bev.batch[src]
    if grid is not None:
        keep = grid.contains(dst, bev.stride)
        keep[: bev.num_cells] = True
        src, dst, bat = src[keep], dst[keep], bat[keep]
    keys = cell_keys(bat, dst)
    uniq, inverse = np.unique(keys, return_inverse=True)
    ob, oc = unpack_keys(uniq)
    feats = ad.max_over_set(ad.gather(bev.features, src), inverse.reshape(-1), len(uniq))
    return SparseBEVMap(bev.stride, oc, feats, ob)


# ------------------------------------------------------ CenterNet targets


def gaussian_radius(length: float, width: float, min_overlap: float = GAUSSIAN_OVERLAP) -> float:
    """Largest center shift keeping IoU >= min_overlap (minimum of the three corner cases)."""
    h, w = length, width
    b1 = h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * c1)) / 2
    b2 = 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 + math.sqrt(b2 ** 2 - 16 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


@dataclass
class HeatmapTarget:
    heatmap: np.ndarray  # (rows, cols, n_classes) in [0, 1]
    regression: np.ndarray  # (rows, cols, REG_DIM)
    mask: np.ndarray  # (rows, cols) bool: regression defined here
    centers: np.ndarray  # (n, 2) center cells (absolute coords) of kept boxes
    boxes: np.ndarray  # (n, 8): 7-dof + class


def encode_box(box: np.ndarray, cell: np.ndarray, voxel: float) -> np.ndarray:
    return np.array([box[0] / voxel - cell[0], box[1] / voxel - cell[1], box[2],
                     math.log(box[3]), math.log(box[4]), math.log(box[5]),
                     math.sin(box[6]), math.cos(box[6])])


def decode_box(reg: np.ndarray, cell: np.ndarray, voxel: float) -> np.ndarray:
    return np.array([(cell[0] + reg[0]) * voxel, (cell[1] + reg[1]) * voxel, reg[2],
                     math.exp(reg[3]), math.exp(reg[4]), math.exp(reg[5]), math.atan2(reg[6], reg[7])])


def box_gaussian(box: np.ndarray, grid: GridSpec, min_overlap: float = GAUSSIAN_OVERLAP):
    """Center cell, radius and the (cells, values) footprint of one box's Gaussian."""
    v = grid.voxel_size
    center = grid.cell_of(np.asarray(box[:2])[None])[0]
    r = max(0, int(gaussian_radius(box[3] / v, box[4] / v, min_overlap)))
    sigma = (2 * r + 1) / 6.0
    d = np.arange(-r, r + 1)
    dr, dc = np.meshgrid(d, d, indexing="ij")
    vals = np.exp(-(dr ** 2 + dc ** 2) / (2 * sigma ** 2))
    cells = np.stack([dr.ravel(), dc.ravel()], axis=1) + center
    return center, r, cells, vals.ravel()


def make_centernet_targets(boxes: np.ndarray, grid: GridSpec, gaussian_overlap: float = GAUSSIAN_OVERLAP,
                           classes: tuple[int, ...] = DETECTION_CLASSES) -> HeatmapTarget:
    """Per-class Gaussian heatmaps (max over boxes) with regression targets at center cells.

    ``boxes`` is (n, 8) with the class id in the last column; boxes of other
    classes or with centers outside the grid are ignored.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 8)
    heat = np.zeros(grid.shape + (len(classes),))
    reg = np.zeros(grid.shape + (REG_DIM,))
    mask = np.zeros(grid.shape, dtype=bool)
    centers, kept = [], []
    for box in boxes:
        cls = int(box[7])
        if cls not in classes or not grid.in_range(box[None, :2])[0]:
            continue
        ci = classes.index(cls)
        center, _, cells, vals = box_gaussian(box, grid, gaussian_overlap)
        ok = grid.contains(cells)
        di = grid.dense_index(cells[ok])
        flat = heat[..., ci].reshape(-1)
        np.maximum.at(flat, di, vals[ok])
        heat[..., ci] = flat.reshape(grid.shape)
        r, c = center - (grid.row_lo, grid.col_lo)
        reg[r, c] = encode_box(box, center, grid.voxel_size)
        mask[r, c] = True
        centers.append(center)
        kept.append(box)
    return HeatmapTarget(heat, reg, mask, np.array(centers, dtype=np.int64).reshape(-1, 2),
                         np.array(kept).reshape(-1, 8))


# -------------------------------------------------------------- decode


def local_maxima(heatmap: np.ndarray) -> np.ndarray:
    """True where a value is >= all of its 3x3 neighbors (per class channel)."""
    fp = np.ones((3, 3, 1), dtype=bool) if heatmap.ndim == 3 else np.ones((3, 3), dtype=bool)
    return heatmap >= maximum_filter(heatmap, footprint=fp, mode="constant", cval=-np.inf)


def centernet_decode(heatmap: np.ndarray, regression: np.ndarray, grid: GridSpec, score_thr: float = 0.1,
                     top_k: int = 100, classes: tuple[int, ...] = DETECTION_CLASSES, frame_id=0) -> list[Detection]:
    """Peaks (3x3 local maxima >= score_thr), best ``top_k`` by score, boxes decoded from regression.

    Ties are broken by flat (row, col, class) position.
    """
    if not 0.0 <= score_thr <= 1.0 or top_k < 0:
        raise ValueError("invalid decode thresholds")
    heatmap = np.asarray(heatmap, dtype=np.float64)
    peaks = local_maxima(heatmap) & (heatmap >= score_thr)
    flat = np.flatnonzero(peaks.reshape(-1))
    scores = heatmap.reshape(-1)[flat]
    order = np.lexsort((flat, -scores))[:top_k]
    out = []
    nc = heatmap.shape[-1]
    for f in flat[order]:
        r, c, ci = f // (grid.cols * nc), (f // nc) % grid.cols, f % nc
        cell = np.array([r + grid.row_lo, c + grid.col_lo])
        b = decode_box(regression[r, c], cell, grid.voxel_size)
        out.append(Detection(Box7.from_array(b, classes[ci]), float(min(max(heatmap[r, c, ci], 0.0), 1.0)), frame_id))
    return out


def nms_bev(dets: list[Detection], iou_thr: float = 0.5, class_agnostic: bool = False) -> list[Detection]:
    """Greedy rotated-IoU suppression, highest score first, ties by input position."""
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError(f"iou_thr must lie in (0, 1], got {iou_thr}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    keep: list[int] = []
    for i in order:
        ok = True
        for j in keep:
            if not class_agnostic and dets[i].class_id != dets[j].class_id:
                continue
            if iou_bev(dets[i].box, dets[j].box) >= iou_thr:
                ok = False
                break
        if ok:
            keep.append(i)
    return [dets[i] for i in keep]


def write_detections_jsonl(path: str | Path, dets: list[Detection]) -> None:
    with Path(path).open("w") as fh:
        for d in dets:
            fh.write(json.dumps({"box": [float(v) for v in d.box.as_array()], "score": float(d.score),
                                 "class_id": int(d.class_id), "frame_id": d.frame_id}) + "\n")


def read_detections_jsonl(path: str | Path) -> list[Detection]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append(Detection(Box7.from_array(rec["box"], rec["class_id"]), rec["score"], rec["frame_id"]))
    return out


# ---------------------------------------------------------- dense heads


class DenseHead(Module):
    """3x3 convolution followed by a per-cell MLP."""

    def __init__(self, rng, width: int, n_out: int, hidden: int | None = None):
        hidden = hidden or width
        self.conv = Conv3x3(rng, width, hidden)
        self.mlp = MLP(rng, [hidden, hidden, n_out])
        self.n_out = n_out

    def __call__(self, dense: Tensor) -> Tensor:
        return self.mlp(ad.relu(self.conv(dense)))


class DetectionHead(Module):
    def __init__(self, rng, width: int, n_classes: int = len(DETECTION_CLASSES)):
        self.body = DenseHead(rng, width, n_classes + REG_DIM)
        last = self.body.mlp.layers[-1]
        last.weight.data *= 0.1
        last.bias.data[:n_classes] = FG_PRIOR_BIAS
        self.n_classes = n_classes


def detection_outputs(dense: Tensor, params: DetectionHead) -> tuple[Tensor, Tensor]:
    """(heatmap logits (B,H,W,C), regression (B,H,W,REG_DIM))."""
    out = params.body(dense)
    B, H, W, _ = out.shape
    flat = ad.reshape(out, (B * H * W, params.n_classes + REG_DIM))
    eye = np.eye(params.n_classes + REG_DIM)
    heat = ad.matmul(flat, eye[:, : params.n_classes])
    reg = ad.matmul(flat, eye[:, params.n_classes:])
    return ad.reshape(heat, (B, H, W, params.n_classes)), ad.reshape(reg, (B, H, W, REG_DIM))


def occupancy_head(dense: Tensor, params: DenseHead) -> Tensor:
    """Per-cell occupancy class logits (B, H, W, K)."""
    return params(dense)


def roadgraph_head(dense: Tensor, params: DenseHead) -> Tensor:
    """Per-cell roadgraph element logits (B, H, W, 3)."""
    return params(dense)


def cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean (optionally weighted) softmax cross-entropy over the last axis."""
    k = logits.shape[-1]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    logp = ad.reshape(ad.log_softmax(logits, axis=-1), (-1, k))
    onehot = np.zeros((len(labels), k))
    onehot[np.arange(len(labels)), labels] = 1.0
    w = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    return -ad.sum_(ad.mul(logp, onehot * w[:, None])) / max(w.sum(), 1e-12)


# ------------------------------------------------------------- targets


def occupancy_targets(boxes: np.ndarray, grid: GridSpec) -> np.ndarray:
    """(rows, cols) class per cell center: free, or 1 + box class (later boxes win)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 8)
    out = np.zeros(grid.shape, dtype=np.int64)
    if len(boxes) == 0:
        return out
    centers = grid.cell_center(grid.all_cells())
    inside = points_in_boxes_bev(centers, boxes[:, :7])
    for j in range(len(boxes)):
        out.reshape(-1)[inside[:, j]] = 1 + int(boxes[j, 7])
    return out


def _segment_hits_cells(p0: np.ndarray, p1: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Liang-Barsky test of one segment against many closed axis-aligned squares."""
    d = p1 - p0
    t0 = np.zeros(len(lo))
    t1 = np.ones(len(lo))
    ok = np.ones(len(lo), dtype=bool)
    for ax in range(2):
        if abs(d[ax]) < 1e-15:
            ok &= (p0[ax] >= lo[:, ax]) & (p0[ax] <= hi[:, ax])
            continue
        ta = (lo[:, ax] - p0[ax]) / d[ax]
        tb = (hi[:, ax] - p0[ax]) / d[ax]
        t0 = np.maximum(t0, np.minimum(ta, tb))
        t1 = np.minimum(t1, np.maximum(ta, tb))
    return ok & (t0 <= t1)


def supercover_cells(p0, p1, voxel: float) -> np.ndarray:
    """Every grid cell whose closed square the segment p0-p1 touches."""
    p0, p1 = np.asarray(p0, dtype=np.float64)[:2], np.asarray(p1, dtype=np.float64)[:2]
    a = np.floor(np.minimum(p0, p1) / voxel).astype(np.int64) - 1
    b = np.floor(np.maximum(p0, p1) / voxel).astype(np.int64) + 1
    rr, cc = np.meshgrid(np.arange(a[0], b[0] + 1), np.arange(a[1], b[1] + 1), indexing="ij")
    cells = np.stack([rr.ravel(), cc.ravel()], axis=1)
    hit = _segment_hits_cells(p0, p1, cells * voxel, (cells + 1) * voxel)
    return cells[hit]


def rasterize_polylines(polylines: list[Polyline], grid: GridSpec) -> np.ndarray:
    """(rows, cols) roadgraph labels; boundaries take precedence over lanes."""
    out = np.zeros(grid.shape, dtype=np.int64)
    for kind in ("lane", "boundary"):
        label = ROAD_LANE if kind == "lane" else ROAD_BOUNDARY
        for line in polylines:
            if line.kind != kind:
                continue
            pts = np.asarray(line.points)
            for p0, p1 in zip(pts[:-1], pts[1:]):
                cells = supercover_cells(p0, p1, grid.voxel_size)
                cells = cells[grid.contains(cells)]
                out.reshape(-1)[grid.dense_index(cells)] = label
    return out


# ------------------------------------------------------------- losses


def centernet_heatmap_loss(logits: Tensor, target: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss on Gaussian heatmaps, normalized by the number of peaks."""
    t = np.asarray(target, dtype=np.float64)
    pos = (t >= 1.0 - 1e-12).astype(np.float64)
    p = ad.sigmoid(logits)
    logp, log1mp = ad.log_sigmoid(logits), ad.log_sigmoid(-logits)
    pos_term = ad.mul(ad.mul(ad.power(1.0 - p, alpha), logp), pos)
    neg_term = ad.mul(ad.mul(ad.power(p, alpha), log1mp), (1 - pos) * (1 - t) ** beta)
    return -ad.sum_(pos_term + neg_term) / max(pos.sum(), 1.0)


def regression_loss(reg: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Smooth-L1 on the regression channels at center cells, averaged over those cells."""
    k = reg.shape[-1]
    idx = np.flatnonzero(np.asarray(mask).reshape(-1))
    if len(idx) == 0:
        return ad.sum_(ad.mul(reg, 0.0))
    pred = ad.gather(ad.reshape(reg, (-1, k)), idx)
    diff = pred - np.asarray(target).reshape(-1, k)[idx]
    a = ad.abs_(diff)
    quad = ad.mul(ad.mul(diff, diff), 0.5)
    small = np.abs(diff.data) < 1.0
    per = ad.add(ad.mul(quad, small.astype(np.float64)), ad.mul(a - 0.5, (~small).astype(np.float64)))
    return ad.sum_(per) / len(idx)


def distill_loss(student, teacher: np.ndarray, beta: float = 2.0, eps: float = 1e-6, from_logits: bool = True,
                 weights: np.ndarray | None = None) -> Tensor:
    """Quality focal loss against continuous teacher heatmaps.

    per cell: -|t - p|^beta * (t log p + (1 - t) log(1 - p)), averaged.
    With ``from_logits`` the student is given as logits; otherwise as
    probabilities, which are clamped to [eps, 1 - eps].
    """
    t = np.asarray(teacher, dtype=np.float64)
    if t.shape != tuple(student.shape):
        raise ValueError(f"student {student.shape} and teacher {t.shape} shapes differ")
    if (t < 0).any() or (t > 1).any():
        raise ValueError("teacher values must lie in [0, 1]")
    if from_logits:
        p = ad.sigmoid(student)
        logp = ad.clip(ad.log_sigmoid(student), math.log(eps), 0.0)
        log1mp = ad.clip(ad.log_sigmoid(-student), math.log(eps), 0.0)
    else:
        p = ad.clip(student, eps, 1 - eps)
        logp, log1mp = ad.log(p), ad.log(1.0 - p)
    mod = ad.power(ad.abs_(p - t), beta)
    ce = ad.mul(logp, t) + ad.mul(log1mp, 1.0 - t)
    per = -ad.mul(mod, ce)
    if weights is not None:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), t.shape)
        return ad.sum_(ad.mul(per, w)) / max(float(w.sum()), 1e-12)
    return ad.mean(per)
