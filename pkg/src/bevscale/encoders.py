"""Camera (lift-splat), radar (polar to Cartesian), surfel encoders and concat fusion.

Camera and radar encoders are bias-free ReLU conv stacks, so a zero input
region maps to exactly zero features. That keeps the dense BEV maps they
produce sparse enough to take part in the sparse cell set at fusion time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv3x3, Module
from .voxel import GridSpec, PointNetEncoder, SparseBEVMap, cell_keys, dynamic_voxelize, pointnet_embed, unpack_keys


class ResBlock(Module):
    def __init__(self, rng, width: int, bias: bool = False):
        self.conv1 = Conv3x3(rng, width, width, bias=bias)
        self.conv2 = Conv3x3(rng, width, width, bias=bias)

    def __call__(self, x: Tensor, act=ad.relu) -> Tensor:
        return act(x + self.conv2(act(self.conv1(x))))


def avg_pool2(x: Tensor) -> Tensor:
    B, H, W, C = x.shape
    return ad.mean(ad.reshape(x, (B, H // 2, 2, W // 2, 2, C)), axis=(2, 4))


class CameraEncoder(Module):
    """Small residual conv stack emitting pixel features and depth logits.

    Resolution is halved after the stem and after each residual block, so
    the total downsample factor is ``2 ** (1 + blocks)``.
    """

    def __init__(self, rng, width: int = 8, out_width: int = 8, depth_bins: int = 8, blocks: int = 1):
        self.stem = Conv3x3(rng, 3, width, bias=False)
        self.blocks = [ResBlock(rng, width) for _ in range(blocks)]
        self.feature_head = Conv3x3(rng, width, out_width, bias=False)
        self.depth_head = Conv3x3(rng, width, depth_bins, bias=True)
        self.out_width = out_width
        self.depth_bins = depth_bins

    @property
    def downsample(self) -> int:
        return 2 ** (1 + len(self.blocks))


def camera_backbone(image, params: CameraEncoder) -> tuple[Tensor, Tensor]:
    """(B, H, W, 3) image -> features (B, H', W', C) and depth distribution (B, H', W', D)."""
    x = ad.as_tensor(image)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    _, H, W, _ = x.shape
    k = params.downsample
    if H % k or W % k:
        raise ValueError(f"image {H}x{W} not divisible by downsample factor {k}")
    x = avg_pool2(ad.relu(params.stem(x)))
    for block in params.blocks:
        x = avg_pool2(block(x))
    feats = ad.relu(params.feature_head(x))
    depth = ad.softmax(params.depth_head(x), axis=-1)
    return feats, depth


def default_depth_bins(grid: GridSpec, count: int = 8) -> np.ndarray:
    return np.linspace(1.0, max(grid.x_range, grid.y_range), count)


def frustum_points(intrinsics: np.ndarray, cam_to_ego: np.ndarray, image_hw: tuple[int, int],
                   downsample: int, depth_bins: np.ndarray) -> np.ndarray:
    """Ego-frame 3D point for every (feature pixel, depth bin): (H', W', D, 3)."""
    H, W = image_hw
    h, w = H // downsample, W // downsample
    v = (np.arange(h) + 0.5) * downsample
    u = (np.arange(w) + 0.5) * downsample
    uu, vv = np.meshgrid(u, v)
    rays = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ np.linalg.inv(intrinsics).T  # z_cam = 1
    pts_cam = rays[:, :, None, :] * np.asarray(depth_bins)[None, None, :, None]
    return pts_cam @ cam_to_ego[:3, :3].T + cam_to_ego[:3, 3]


@lru_cache(maxsize=32)
def _frustum_cells_cached(key):
    K, T, image_hw, downsample, bins, grid = key
    pts = frustum_points(np.array(K).reshape(3, 3), np.array(T).reshape(4, 4), image_hw, downsample, np.array(bins))
    flat = pts.reshape(-1, 3)
    valid = grid.in_range(flat[:, :2])
    cells = grid.cell_of(flat[valid, :2])
    return np.flatnonzero(valid), grid.dense_index(cells)


def frustum_cells(intrinsics, cam_to_ego, image_hw, downsample, depth_bins, grid: GridSpec):
    """Indices of in-grid frustum points and the dense cell each one lands in."""
    key = (tuple(np.asarray(intrinsics, float).ravel()), tuple(np.asarray(cam_to_ego, float).ravel()),
           tuple(image_hw), int(downsample), tuple(np.asarray(depth_bins, float)), grid)
    return _frustum_cells_cached(key)


def lss_lift_splat(features: Tensor, depth: Tensor, intrinsics: np.ndarray, cam_to_ego: np.ndarray,
                   grid: GridSpec, depth_bins: np.ndarray, image_hw: tuple[int, int]) -> Tensor:
    """Lift pixel features along their depth distribution and sum them into BEV cells.

    Returns a dense (B, rows, cols, C) map; frustum points outside the grid
    are dropped.
    """
    features, depth = ad.as_tensor(features), ad.as_tensor(depth)
    B, h, w, C = features.shape
    D = depth.shape[-1]
    if depth.shape != (B, h, w, D) or len(depth_bins) != D:
        raise ValueError(f"depth {depth.shape} / bins {len(depth_bins)} do not match features {features.shape}")
    downsample = image_hw[0] // h
    src, cell = frustum_cells(intrinsics, cam_to_ego, image_hw, downsample, depth_bins, grid)
    ncell = grid.rows * grid.cols
    lifted = ad.mul(ad.reshape(depth, (B, h, w, D, 1)), ad.reshape(features, (B, h, w, 1, C)))
    lifted = ad.reshape(lifted, (B * h * w * D, C))
    per = h * w * D
    rows = (np.arange(B)[:, None] * per + src[None, :]).ravel()
    target = (np.arange(B)[:, None] * ncell + cell[None, :]).ravel()
    bev = ad.scatter_add(ad.gather(lifted, rows), target, B * ncell)
    return ad.reshape(bev, (B, grid.rows, grid.cols, C))


class RadarEncoder(Module):
    def __init__(self, rng, width: int = 8, blocks: int = 1, linear: bool = False):
        self.stem = Conv3x3(rng, 1, width, bias=False)
        self.blocks = [ResBlock(rng, width) for _ in range(blocks)]
        self.linear = linear
        self.out_width = width

    def __call__(self, polar: Tensor) -> Tensor:
        act = (lambda t: t) if self.linear else ad.relu
        x = act(self.stem(polar))
        for block in self.blocks:
            x = block(x, act=act)
        return x


@dataclass(frozen=True)
class RadarGeometry:
    range_bin: float
    azimuth_bin: float
    azimuth_min: float = -math.pi
    shape: tuple[int, int] = (64, 64)

    @property
    def max_range(self) -> float:
        return self.shape[0] * self.range_bin


def bilinear_taps(geom: RadarGeometry, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat polar indices (n, 4) and weights (n, 4) for sampling at Cartesian ``xy``.

    Range clamps to the first/last bin centers; azimuth wraps. Points at or
    beyond the maximum range get zero weight.
    """
    R, A = geom.shape
    r = np.hypot(xy[:, 0], xy[:, 1])
    a = np.arctan2(xy[:, 1], xy[:, 0])
    fr = np.clip(r / geom.range_bin - 0.5, 0.0, R - 1)
    fa = ((a - geom.azimuth_min) / geom.azimuth_bin - 0.5) % A
    r0 = np.minimum(np.floor(fr).astype(np.int64), R - 2) if R > 1 else np.zeros(len(fr), dtype=np.int64)
    a0 = np.floor(fa).astype(np.int64) % A
    tr = fr - r0 if R > 1 else np.zeros(len(fr))
    ta = fa - np.floor(fa)
    r1 = np.minimum(r0 + 1, R - 1)
    a1 = (a0 + 1) % A
    idx = np.stack([r0 * A + a0, r0 * A + a1, r1 * A + a0, r1 * A + a1], axis=1)
    wts = np.stack([(1 - tr) * (1 - ta), (1 - tr) * ta, tr * (1 - ta), tr * ta], axis=1)
    wts[r >= geom.max_range] = 0.0
    return idx, wts


def radar_to_cartesian(polar, params: RadarEncoder | None, geom: RadarGeometry, grid: GridSpec) -> Tensor:
    """Encode the (B, R, A) polar image and resample it at every BEV cell center.

    Returns (B, rows, cols, C). With ``params=None`` the raw intensity is
    resampled (C = 1).
    """
    x = ad.as_tensor(polar)
    if x.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim == 3:
        x = ad.reshape(x, x.shape + (1,))
    if geom.range_bin <= 0 or geom.azimuth_bin <= 0:
        raise ValueError("radar bin sizes must be positive")
    B, R, A, _ = x.shape
    if (R, A) != geom.shape:
        raise ValueError(f"polar grid {(R, A)} does not match geometry {geom.shape}")
    if params is not None:
        x = params(x)
    C = x.shape[-1]
    centers = grid.cell_center(grid.all_cells())
    idx, wts = bilinear_taps(geom, centers)
    flat = ad.reshape(x, (B * R * A, C))
    gidx = (np.arange(B)[:, None, None] * (R * A) + idx[None]).reshape(B * len(idx), 4)
    taps = ad.gather(flat, gidx)  # (B*n, 4, C)
    w = np.broadcast_to(wts[None], (B,) + wts.shape).reshape(B * len(idx), 4, 1)
    out = ad.sum_(ad.mul(taps, w), axis=1)
    return ad.reshape(out, (B, grid.rows, grid.cols, C))


def surfel_encode(surfels: np.ndarray, grid: GridSpec, params: PointNetEncoder,
                  batch: np.ndarray | None = None) -> SparseBEVMap:
    """Surfels as points (center) with features (normal, color) through the LiDAR encoder."""
    surfels = np.asarray(surfels, dtype=np.float64).reshape(-1, 9)
    assign = dynamic_voxelize(surfels[:, :3], grid, batch)
    return pointnet_embed(assign, surfels[:, :3], surfels[:, 3:9], grid, params)


@dataclass(frozen=True)
class ModalityFlags:
    lidar: bool = True
    camera: bool = True
    radar: bool = True
    surfel: bool = True

    @classmethod
    def parse(cls, spec: str) -> "ModalityFlags":
        names = {s.strip() for s in spec.split(",") if s.strip()}
        unknown = names - {"lidar", "camera", "radar", "surfel"}
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")
        return cls(**{k: k in names for k in ("lidar", "camera", "radar", "surfel")})

    def names(self) -> list[str]:
        return [k for k in ("lidar", "camera", "radar", "surfel") if getattr(self, k)]


def _dense_cells(dense: Tensor, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    mag = np.abs(dense.data).max(axis=-1)
    b, i, j = np.nonzero(mag > threshold)
    return b, np.stack([i, j], axis=1)


def fuse_concat(lidar: SparseBEVMap | None, camera: Tensor | None, radar: Tensor | None,
                surfel: SparseBEVMap | None, grid: GridSpec, widths: tuple[int, int, int, int],
                flags: ModalityFlags = ModalityFlags(), threshold: float = 0.0,
                batch_size: int | None = None) -> SparseBEVMap:
    """Union of occupied cells with channels laid out as lidar | camera | radar | surfel.

    Dense camera/radar cells join the cell set where any channel magnitude
    exceeds ``threshold``. Disabled or missing modalities contribute zeros.
    """
    sources = {"lidar": lidar if flags.lidar else None, "surfel": surfel if flags.surfel else None}
    dense = {"camera": camera if flags.camera else None, "radar": radar if flags.radar else None}
    key_parts = []
    for name, m in sources.items():
        if m is not None:
            if m.stride != 1 or not grid.contains(m.coords).all():
                raise ValueError(f"{name} map does not lie on the fusion grid")
            key_parts.append(m.keys())
    for name, d in dense.items():
        if d is not None:
            if d.shape[1:3] != grid.shape:
                raise ValueError(f"{name} dense map {d.shape[1:3]} does not match grid {grid.shape}")
            b, ij = _dense_cells(d, threshold)
            ij = ij + np.array([grid.row_lo, grid.col_lo])
            key_parts.append(cell_keys(b, ij))
    keys = np.unique(np.concatenate(key_parts)) if key_parts else np.zeros(0, dtype=np.int64)
    batch, coords = unpack_keys(keys)
    n = len(keys)
    chunks = []
    for name, width in zip(("lidar", "camera", "radar", "surfel"), widths):
        m = sources.get(name)
        d = dense.get(name)
        if m is not None and m.num_cells:
            idx = m.lookup(batch, coords)
            padded = ad.concat([m.features, Tensor(np.zeros((1, width)))], axis=0)
            chunks.append(ad.gather(padded, np.where(idx < 0, m.num_cells, idx)))
        elif d is not None and n:
            flat = ad.reshape(d, (-1, width))
            chunks.append(ad.gather(flat, batch * grid.rows * grid.cols + grid.dense_index(coords)))
        else:
            chunks.append(Tensor(np.zeros((n, width))))
    return SparseBEVMap(1, coords, ad.concat(chunks, axis=1), batch)
