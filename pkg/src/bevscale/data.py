"""Training samples drawn from synthetic scenes, and batch collation with targets."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .heads import make_centernet_targets, occupancy_targets, rasterize_polylines
from .voxel import GridSpec, temporal_stack
from .world import (AutoLabelNoise, Box7, Polyline, WorldConfig, build_surfels, filter_autolabels, generate_scene,
                    simulate_autolabels, surfels_to_array)


def boxes_with_class(boxes: list[Box7]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 8))
    return np.array([list(b.as_array()) + [b.class_id] for b in boxes])


@dataclass
class Sample:
    """Everything one training example needs, as plain arrays."""

    scene_id: int
    points: np.ndarray  # (n, 5) stacked sweeps in the current frame
    image: np.ndarray  # (H, W, 3)
    intrinsics: np.ndarray
    cam_to_ego: np.ndarray
    radar: np.ndarray  # (R, A)
    radar_geom: tuple[float, float, float]  # range bin, azimuth bin, azimuth min
    surfels: np.ndarray  # (S, 9)
    boxes: np.ndarray  # (n, 8) ground truth, detection classes
    obstacles: np.ndarray  # (m, 8) static obstacles (occupancy only)
    autolabels: np.ndarray  # (k, 8) auto-labels that pass the confidence filter
    roadgraph: list[Polyline] = field(default_factory=list)


def make_sample(seed: int, world: WorldConfig | None = None, frames: int = 4,
                noise: AutoLabelNoise | None = None, surfel_radius: float = 0.5) -> Sample:
    """Build the sample of scene ``seed`` using its current frame plus ``frames - 1`` history sweeps."""
    world = world or WorldConfig()
    if not 1 <= frames <= world.num_frames:
        raise ValueError(f"frames must lie in [1, {world.num_frames}], got {frames}")
    scene = generate_scene(seed, world)
    cur = scene.frames[0]
    points = temporal_stack(scene.frames[:frames])
    surfels = surfels_to_array(build_surfels(cur.lidar, cur.camera, surfel_radius))
    auto = filter_autolabels(simulate_autolabels(cur.boxes, seed, noise))
    return Sample(seed, points, cur.camera.image, cur.camera.intrinsics, cur.camera.cam_to_ego,
                  cur.radar.intensity, (cur.radar.range_bin, cur.radar.azimuth_bin, cur.radar.azimuth_min),
                  surfels, boxes_with_class(cur.boxes), boxes_with_class(cur.obstacles), boxes_with_class(auto),
                  cur.roadgraph)


class SyntheticSource:
    """Indexable, lazily generated dataset: item i is the scene with seed ``base_seed + i``."""

    def __init__(self, size: int, base_seed: int = 0, world: WorldConfig | None = None, frames: int = 4,
                 cache_size: int = 0, noise: AutoLabelNoise | None = None):
        if size <= 0:
            raise ValueError("data source is empty")
        self.size, self.base_seed, self.world, self.frames = size, base_seed, world or WorldConfig(), frames
        self.noise = noise
        self.cache_size = cache_size
        self._cache: OrderedDict[int, Sample] = OrderedDict()

    def __len__(self) -> int:
        return self.size

    def __getitem__(self, i: int) -> Sample:
        if not 0 <= i < self.size:
            raise IndexError(i)
        if i in self._cache:
            self._cache.move_to_end(i)
            return self._cache[i]
        s = make_sample(self.base_seed + i, self.world, self.frames, self.noise)
        if self.cache_size:
            self._cache[i] = s
            if len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return s


class ListSource:
    def __init__(self, samples: list[Sample]):
        if not samples:
            raise ValueError("data source is empty")
        self.samples = samples

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]


@dataclass
class Batch:
    grid: GridSpec
    size: int
    points: np.ndarray  # (n, 5)
    point_batch: np.ndarray
    images: np.ndarray  # (B, H, W, 3)
    intrinsics: np.ndarray
    cam_to_ego: np.ndarray
    radar: np.ndarray  # (B, R, A)
    radar_geom: tuple[float, float, float]
    surfels: np.ndarray  # (S, 9)
    surfel_batch: np.ndarray
    det_boxes: list[np.ndarray]  # per sample (n, 8) boxes used as detection labels
    gt_boxes: list[np.ndarray]  # per sample (n, 8) ground truth
    heatmap: np.ndarray  # (B, rows, cols, C)
    regression: np.ndarray  # (B, rows, cols, 8)
    reg_mask: np.ndarray  # (B, rows, cols)
    occupancy: np.ndarray  # (B, rows, cols)
    roadgraph: np.ndarray  # (B, rows, cols)
    scene_ids: list[int]


def keep_frames(points: np.ndarray, frames: int) -> np.ndarray:
    """Drop sweeps older than the ``frames`` most recent ones (by time-offset channel)."""
    offsets = np.unique(points[:, 4])[::-1]
    if frames >= len(offsets):
        return points
    return points[points[:, 4] >= offsets[frames - 1]]


def collate(samples: list[Sample], grid: GridSpec, labels: str = "gt", frames: int | None = None) -> Batch:
    """Stack samples and build dense targets.

    ``labels`` picks "gt" or "auto" detection labels; ``frames`` limits the
    number of stacked sweeps.
    """
    if labels not in ("gt", "auto"):
        raise ValueError(f"labels must be 'gt' or 'auto', got {labels!r}")
    if not samples:
        raise ValueError("cannot collate an empty batch")
    B = len(samples)
    if frames is not None and frames < 1:
        raise ValueError("frames must be >= 1")
    pts = [s.points if frames is None else keep_frames(s.points, frames) for s in samples]
    sfl = [s.surfels for s in samples]
    det = [s.boxes if labels == "gt" else s.autolabels for s in samples]
    targets = [make_centernet_targets(d, grid) for d in det]
    occ = np.stack([occupancy_targets(np.concatenate([s.boxes, s.obstacles]), grid) for s in samples])
    road = np.stack([rasterize_polylines(s.roadgraph, grid) for s in samples])
    return Batch(
        grid=grid, size=B,
        points=np.concatenate(pts), point_batch=np.repeat(np.arange(B), [len(p) for p in pts]),
        images=np.stack([s.image for s in samples]), intrinsics=samples[0].intrinsics,
        cam_to_ego=samples[0].cam_to_ego, radar=np.stack([s.radar for s in samples]),
        radar_geom=samples[0].radar_geom,
        surfels=np.concatenate(sfl).reshape(-1, 9), surfel_batch=np.repeat(np.arange(B), [len(s) for s in sfl]),
        det_boxes=det, gt_boxes=[s.boxes for s in samples],
        heatmap=np.stack([t.heatmap for t in targets]), regression=np.stack([t.regression for t in targets]),
        reg_mask=np.stack([t.mask for t in targets]), occupancy=occ, roadgraph=road,
        scene_ids=[s.scene_id for s in samples],
    )
