"""LiDAR path: temporal stacking, dynamic voxelization, PointNet voxel features."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, Linear, Module
from .world import Frame

_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)


def cell_keys(batch: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Pack (batch, row, col) into sortable int64 keys."""
    batch = np.asarray(batch, dtype=np.int64)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    hi = (batch << _KEY_BITS) + (coords[:, 0] + _KEY_OFFSET)
    return (hi << _KEY_BITS) + (coords[:, 1] + _KEY_OFFSET)


def lookup_keys(table: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Position of each query key in ``table`` (unsorted, unique), -1 where absent."""
    if len(table) == 0:
        return np.full(len(query), -1, dtype=np.int64)
    order = np.argsort(table, kind="stable")
    sk = table[order]
    pos = np.minimum(np.searchsorted(sk, query), len(sk) - 1)
    return np.where(sk[pos] == query, order[pos], -1)


def unpack_keys(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keys = np.asarray(keys, dtype=np.int64)
    mask = (1 << _KEY_BITS) - 1
    col = (keys & mask) - _KEY_OFFSET
    row = ((keys >> _KEY_BITS) & mask) - _KEY_OFFSET
    batch = keys >> (2 * _KEY_BITS)
    return batch, np.stack([row, col], axis=1)


@dataclass(frozen=True)
class GridSpec:
    """Origin-anchored BEV grid: cell (row, col) covers [row*v, (row+1)*v) x [col*v, (col+1)*v).

    Rows index x and columns index y. Because indices are anchored at the
    ego origin rather than at the grid corner, the same point falls in the
    same cell for every perception range.
    """

    x_range: float
    y_range: float
    voxel_size: float = 0.32

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.x_range <= 0 or self.y_range <= 0:
            raise ValueError("degenerate grid: ranges must be positive")

    @property
    def row_lo(self) -> int:
        return -math.ceil(self.x_range / self.voxel_size - 1e-9)

    @property
    def col_lo(self) -> int:
        return -math.ceil(self.y_range / self.voxel_size - 1e-9)

    @property
    def rows(self) -> int:
        return -2 * self.row_lo

    @property
    def cols(self) -> int:
        return -2 * self.col_lo

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def in_range(self, xy: np.ndarray) -> np.ndarray:
        x, y = xy[:, 0], xy[:, 1]
        return (x >= -self.x_range) & (x < self.x_range) & (y >= -self.y_range) & (y < self.y_range)

    def cell_of(self, xy: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(xy)[:, :2] / self.voxel_size).astype(np.int64)

    def cell_center(self, coords: np.ndarray, stride: int = 1) -> np.ndarray:
        return (np.asarray(coords, dtype=np.float64) + 0.5) * self.voxel_size * stride

    def bounds(self, stride: int = 1) -> tuple[int, int, int, int]:
        """Inclusive (row_min, row_max, col_min, col_max) at ``stride``."""
        return (self.row_lo // stride, (self.row_lo + self.rows - 1) // stride,
                self.col_lo // stride, (self.col_lo + self.cols - 1) // stride)

    def contains(self, coords: np.ndarray, stride: int = 1) -> np.ndarray:
        r0, r1, c0, c1 = self.bounds(stride)
        coords = np.asarray(coords).reshape(-1, 2)
        return (coords[:, 0] >= r0) & (coords[:, 0] <= r1) & (coords[:, 1] >= c0) & (coords[:, 1] <= c1)

    def dense_index(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords).reshape(-1, 2)
        return (coords[:, 0] - self.row_lo) * self.cols + (coords[:, 1] - self.col_lo)

    def all_cells(self) -> np.ndarray:
        r = np.arange(self.row_lo, self.row_lo + self.rows)
        c = np.arange(self.col_lo, self.col_lo + self.cols)
        rr, cc = np.meshgrid(r, c, indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)


@dataclass
class SparseBEVMap:
    """Occupied cells of a (possibly batched) BEV grid with per-cell features."""

    stride: int
    coords: np.ndarray  # (N, 2) int64 (row, col) at this stride
    features: Tensor  # (N, C)
    batch: np.ndarray | None = None  # (N,) int64 sample index

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if self.batch is None:
            self.batch = np.zeros(len(self.coords), dtype=np.int64)
        self.batch = np.asarray(self.batch, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.coords):
            raise ValueError(f"features {self.features.shape} do not match {len(self.coords)} cells")

    @property
    def num_cells(self) -> int:
        return len(self.coords)

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def keys(self) -> np.ndarray:
        return cell_keys(self.batch, self.coords)

    def validate(self, grid: GridSpec | None = None) -> None:
        keys = self.keys()
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate cells in sparse map")
        if grid is not None and not grid.contains(self.coords, self.stride).all():
            raise ValueError("cells outside grid")

    def with_features(self, features: Tensor) -> "SparseBEVMap":
        return SparseBEVMap(self.stride, self.coords, features, self.batch)

    def lookup(self, batch: np.ndarray, coords: np.ndarray) -> np.ndarray:
        """Row index of each queried cell, -1 where absent."""
        return lookup_keys(self.keys(), cell_keys(batch, coords))

    @classmethod
    def empty(cls, width: int, stride: int = 1) -> "SparseBEVMap":
        return cls(stride, np.zeros((0, 2), dtype=np.int64), Tensor(np.zeros((0, width))))


def temporal_stack(frames: list[Frame]) -> np.ndarray:
    """Union of all sweeps in the current frame, with a time-offset channel.

    Returns (n, 5): x, y, z, intensity, time offset relative to frames[0].
    """
    if not frames:
        raise ValueError("temporal_stack needs at least one frame")
    if len(frames) > 8:
        raise ValueError(f"temporal_stack supports at most 8 frames, got {len(frames)}")
    cur = frames[0]
    world_to_cur = np.linalg.inv(cur.pose)
    chunks = []
    for f in frames:
        pts = f.lidar[:, :4].copy()
        if f is not cur:
            T = world_to_cur @ f.pose
            pts[:, :3] = pts[:, :3] @ T[:3, :3].T + T[:3, 3]
        chunks.append(np.c_[pts, np.full(len(pts), f.time_offset - cur.time_offset)])
    return np.concatenate(chunks)


@dataclass
class VoxelAssignment:
    """Dynamic voxelization result: every in-range point owns exactly one voxel."""

    coords: np.ndarray  # (V, 2) voxel cells, sorted by (batch, row, col)
    batch: np.ndarray  # (V,)
    point_index: np.ndarray  # (M,) indices into the input point array
    voxel_of_point: np.ndarray  # (M,) voxel id per assigned point

    @property
    def num_voxels(self) -> int:
        return len(self.coords)

    def groups(self) -> dict[tuple[int, int, int], list[int]]:
        out: dict[tuple[int, int, int], list[int]] = {}
        for p, v in zip(self.point_index.tolist(), self.voxel_of_point.tolist()):
            out.setdefault((int(self.batch[v]), int(self.coords[v, 0]), int(self.coords[v, 1])), []).append(p)
        return out


def dynamic_voxelize(points: np.ndarray, grid: GridSpec, batch: np.ndarray | None = None) -> VoxelAssignment:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        points = points.reshape(len(points), -1)
    if batch is None:
        batch = np.zeros(len(points), dtype=np.int64)
    keep = grid.in_range(points[:, :2]) if len(points) else np.zeros(0, dtype=bool)
    idx = np.flatnonzero(keep)
    cells = grid.cell_of(points[idx, :2]) if len(idx) else np.zeros((0, 2), dtype=np.int64)
    keys = cell_keys(batch[idx], cells)
    uniq, inverse = np.unique(keys, return_inverse=True)
    vb, vc = unpack_keys(uniq)
    return VoxelAssignment(vc, vb, idx, inverse.reshape(-1))


class PointNetEncoder(Module):
    """Shared per-point MLP, max-pool per voxel, then a per-voxel MLP."""

    def __init__(self, rng: np.random.Generator, in_features: int, hidden: int = 16, out: int = 16):
        self.point_mlp = MLP(rng, [3 + in_features, hidden, hidden], final_activation=True)
        self.voxel_mlp = MLP(rng, [hidden, out], final_activation=True)
        self.in_features = in_features
        self.out_width = out


def point_inputs(assign: VoxelAssignment, points: np.ndarray, features: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Per assigned point: (x, y) offset from its voxel center, z, then extra features."""
    pts = points[assign.point_index]
    centers = grid.cell_center(assign.coords[assign.voxel_of_point])
    return np.c_[pts[:, :2] - centers, pts[:, 2], features[assign.point_index]]


def pointnet_embed(assign: VoxelAssignment, points: np.ndarray, features: np.ndarray, grid: GridSpec,
                   params: PointNetEncoder) -> SparseBEVMap:
    """Stride-1 sparse map with one feature vector per non-empty voxel."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        features = features.reshape(len(points), -1)
    if features.shape[1] != params.in_features:
        raise ValueError(f"pointnet expects {params.in_features} extra features, got {features.shape[1]}")
    if assign.num_voxels == 0:
        return SparseBEVMap.empty(params.out_width)
    x = Tensor(point_inputs(assign, points, features, grid))
    h = params.point_mlp(x)
    pooled = ad.max_over_set(h, assign.voxel_of_point, assign.num_voxels)
    return SparseBEVMap(1, assign.coords, params.voxel_mlp(pooled), assign.batch)


def project_lidar(bev: SparseBEVMap, params: Linear) -> SparseBEVMap:
    """Per-cell linear + ReLU to the fusion width; the cell set is unchanged."""
    if bev.width != params.n_in:
        raise ValueError(f"projection expects width {params.n_in}, got {bev.width}")
    if bev.num_cells == 0:
        return SparseBEVMap(bev.stride, bev.coords, Tensor(np.zeros((0, params.n_out))), bev.batch)
    return bev.with_features(ad.relu(params(bev.features)))
