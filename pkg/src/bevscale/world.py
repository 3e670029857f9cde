"""Parametric synthetic driving scenes with LiDAR, camera, radar and labels.

Coordinates follow the usual ego convention: x forward, y left, z up, ground
at z = 0. The world frame coincides with the ego frame of the current frame.
Every frame stores its ego-to-world pose so history sweeps can be motion
compensated exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

VEHICLE, PEDESTRIAN, STATIC = 0, 1, 2
DETECTION_CLASSES = (VEHICLE, PEDESTRIAN)
CLASS_NAMES = {VEHICLE: "vehicle", PEDESTRIAN: "pedestrian", STATIC: "static"}
LIDAR_HEIGHT = 1.8
CAMERA_HEIGHT = 1.5

_CLASS_SIZE = {  # mean (l, w, h)
    VEHICLE: (4.5, 1.9, 1.6),
    PEDESTRIAN: (0.8, 0.8, 1.8),
    STATIC: (0.5, 0.5, 2.5),
}
_CLASS_INTENSITY = {VEHICLE: 0.7, PEDESTRIAN: 0.4, STATIC: 0.9}
_CLASS_COLOR = {
    VEHICLE: (0.9, 0.2, 0.2),
    PEDESTRIAN: (0.2, 0.9, 0.2),
    STATIC: (0.3, 0.3, 0.9),
}
_RADAR_AMPLITUDE = {VEHICLE: 1.0, PEDESTRIAN: 0.4, STATIC: 0.6}


def wrap_angle(theta):
    """Wrap to [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class Box7:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    heading: float
    class_id: int = VEHICLE

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got l={self.l} w={self.w} h={self.h}")
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.heading])

    @classmethod
    def from_array(cls, arr, class_id: int = VEHICLE) -> "Box7":
        a = [float(v) for v in arr[:7]]
        return cls(*a, class_id=int(class_id))

    def corners_bev(self) -> np.ndarray:
        return box_corners_bev(self.as_array()[None])[0]


def boxes_to_array(boxes: list[Box7]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


def box_corners_bev(arr: np.ndarray) -> np.ndarray:
    """(n, 7) boxes -> (n, 4, 2) footprint corners, counter-clockwise."""
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 7)
    signs = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]])
    local = signs[None] * arr[:, None, 3:5]
    c, s = np.cos(arr[:, 6]), np.sin(arr[:, 6])
    x = local[..., 0] * c[:, None] - local[..., 1] * s[:, None] + arr[:, None, 0]
    y = local[..., 0] * s[:, None] + local[..., 1] * c[:, None] + arr[:, None, 1]
    return np.stack([x, y], axis=-1)


def points_in_boxes_bev(xy: np.ndarray, arr: np.ndarray) -> np.ndarray:
    """(p, 2) points vs (n, 7) boxes -> (p, n) footprint membership."""
    arr = np.asarray(arr).reshape(-1, 7)
    d = xy[:, None, :2] - arr[None, :, :2]
    c, s = np.cos(arr[:, 6]), np.sin(arr[:, 6])
    lx = d[..., 0] * c + d[..., 1] * s
    ly = -d[..., 0] * s + d[..., 1] * c
    return (np.abs(lx) <= arr[:, 3] / 2) & (np.abs(ly) <= arr[:, 4] / 2)


def points_in_box(points: np.ndarray, box: Box7) -> np.ndarray:
    inside = points_in_boxes_bev(points[:, :2], box.as_array()[None])[:, 0]
    return inside & (np.abs(points[:, 2] - box.cz) <= box.h / 2)


# ------------------------------------------------------------------ sensors


@dataclass
class Camera:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    intrinsics: np.ndarray  # (3, 3)
    cam_to_ego: np.ndarray  # (4, 4); camera axes x right, y down, z forward

    def project(self, points: np.ndarray):
        """Ego points (n, 3) -> pixel (u, v), depth and in-image mask."""
        ego_to_cam = np.linalg.inv(self.cam_to_ego)
        pc = points[:, :3] @ ego_to_cam[:3, :3].T + ego_to_cam[:3, 3]
        depth = pc[:, 2]
        safe = np.where(depth > 1e-6, depth, 1.0)
        uvw = pc @ self.intrinsics.T
        u = uvw[:, 0] / safe
        v = uvw[:, 1] / safe
        h, w = self.image.shape[:2]
        valid = (depth > 1e-6) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        return u, v, depth, valid


def default_camera(height: int, width: int, hfov_deg: float = 90.0, image=None) -> Camera:
    fx = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
    K = np.array([[fx, 0.0, width / 2], [0.0, fx, height / 2], [0.0, 0.0, 1.0]])
    T = np.eye(4)
    T[:3, :3] = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    T[:3, 3] = (0.0, 0.0, CAMERA_HEIGHT)
    img = np.zeros((height, width, 3)) if image is None else image
    return Camera(img, K, T)


@dataclass
class RadarImage:
    intensity: np.ndarray  # (R, A)
    range_bin: float
    azimuth_bin: float
    azimuth_min: float = -math.pi

    @property
    def max_range(self) -> float:
        return self.intensity.shape[0] * self.range_bin


class Polyline(NamedTuple):
    points: np.ndarray  # (k, 2)
    kind: str  # "lane" | "boundary"


@dataclass
class Frame:
    lidar: np.ndarray  # (n, 5): x, y, z, intensity, time_offset
    camera: Camera
    radar: RadarImage
    boxes: list[Box7]
    roadgraph: list[Polyline]
    pose: np.ndarray  # (4, 4) ego -> world
    time_offset: float = 0.0
    obstacles: list[Box7] = field(default_factory=list)


@dataclass
class Scene:
    seed: int
    frames: list[Frame]  # current first, then history
    velocities: np.ndarray  # (n_objects, 2) world-frame, for boxes of the current frame


@dataclass(frozen=True)
class WorldConfig:
    range_m: float = 16.0
    num_frames: int = 4
    dt: float = 0.1
    num_objects: tuple[int, int] = (3, 7)
    pedestrian_fraction: float = 0.35
    obstacle_fraction: float = 0.15
    ground_points: int = 300
    surface_density: float = 6.0  # points per m^2 of visible face at 10 m
    occlusion_rate: float = 0.2
    point_noise: float = 0.01
    ego_speed_max: float = 5.0
    ego_yaw_rate_max: float = 0.2
    image_hw: tuple[int, int] = (24, 48)
    radar_bins: tuple[int, int] = (64, 64)
    lanes: tuple[int, int] = (2, 4)
    lane_width: float = 3.5

    def validate(self) -> None:
        if self.range_m <= 0:
            raise ValueError("degenerate world config: range_m must be positive")
        if min(self.image_hw) <= 0 or min(self.radar_bins) <= 0:
            raise ValueError("degenerate world config: zero-size sensor grid")
        if self.num_frames < 1 or self.dt <= 0:
            raise ValueError("degenerate world config: need >= 1 frame and dt > 0")
        lo, hi = self.num_objects
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid object count range {self.num_objects}")


# ----------------------------------------------------------------- geometry


def _se2(x: float, y: float, yaw: float) -> np.ndarray:
    T = np.eye(4)
    c, s = math.cos(yaw), math.sin(yaw)
    T[:2, :2] = [[c, -s], [s, c]]
    T[:2, 3] = (x, y)
    return T


def transform_points(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    out = pts.copy()
    out[:, :3] = pts[:, :3] @ T[:3, :3].T + T[:3, 3]
    return out


def transform_box(T: np.ndarray, box: Box7) -> Box7:
    c = T[:3, :3] @ np.array([box.cx, box.cy, box.cz]) + T[:3, 3]
    yaw = math.atan2(T[1, 0], T[0, 0])
    return replace(box, cx=float(c[0]), cy=float(c[1]), cz=float(c[2]), heading=float(wrap_angle(box.heading + yaw)))


def _sample_box_surface(rng: np.random.Generator, box: Box7, density: float, noise: float) -> np.ndarray:
    """Points on the faces of ``box`` visible from the LiDAR, slightly inset."""
    inset = min(0.03, box.l / 4, box.w / 4, box.h / 4)
    hl, hw, hh = box.l / 2 - inset, box.w / 2 - inset, box.h / 2 - inset
    c, s = math.cos(box.heading), math.sin(box.heading)
    sensor = np.array([0.0, 0.0, LIDAR_HEIGHT])
    center = np.array([box.cx, box.cy, box.cz])
    dist = max(float(np.linalg.norm(center[:2])), 1.0)
    faces = [  # (local normal, fixed axis, fixed value, free axes extents)
        (np.array([1.0, 0, 0]), 0, hl, (1, hw), (2, hh)),
        (np.array([-1.0, 0, 0]), 0, -hl, (1, hw), (2, hh)),
        (np.array([0, 1.0, 0]), 1, hw, (0, hl), (2, hh)),
        (np.array([0, -1.0, 0]), 1, -hw, (0, hl), (2, hh)),
        (np.array([0, 0, 1.0]), 2, hh, (0, hl), (1, hw)),
    ]
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    chunks = []
    for normal, axis, value, (a1, e1), (a2, e2) in faces:
        n_world = R @ normal
        face_center = center + R @ (normal * abs(value))
        if n_world @ (sensor - face_center) <= 0:
            continue
        area = 4 * e1 * e2
        count = max(int(rng.poisson(density * area * (10.0 / dist) ** 2 / 4 + 1.0)), 1)
        local = np.zeros((count, 3))
        local[:, axis] = value
        local[:, a1] = rng.uniform(-e1, e1, count)
        local[:, a2] = rng.uniform(-e2, e2, count)
        local += np.clip(rng.normal(0, noise, (count, 3)), -inset * 0.8, inset * 0.8)
        chunks.append(local @ R.T + center)
    if not chunks:
        return np.zeros((0, 3))
    return np.concatenate(chunks)


def _render_camera(camera: Camera, boxes: list[Box7]) -> np.ndarray:
    h, w = camera.image.shape[:2]
    img = np.zeros((h, w, 3))
    ego_to_cam = np.linalg.inv(camera.cam_to_ego)
    quads = []
    for box in boxes:
        corners2 = box.corners_bev()
        corners = np.concatenate([
            np.c_[corners2, np.full(4, box.cz - box.h / 2)],
            np.c_[corners2, np.full(4, box.cz + box.h / 2)],
        ])
        pc = corners @ ego_to_cam[:3, :3].T + ego_to_cam[:3, 3]
        if (pc[:, 2] <= 0.5).any():
            continue
        uv = pc @ camera.intrinsics.T
        u, v = uv[:, 0] / uv[:, 2], uv[:, 1] / uv[:, 2]
        u0, u1 = int(max(math.floor(u.min()), 0)), int(min(math.ceil(u.max()), w))
        v0, v1 = int(max(math.floor(v.min()), 0)), int(min(math.ceil(v.max()), h))
        if u0 >= u1 or v0 >= v1:
            continue
        quads.append((float(pc[:, 2].mean()), u0, u1, v0, v1, box.class_id))
    for _, u0, u1, v0, v1, cls in sorted(quads, key=lambda q: -q[0]):
        img[v0:v1, u0:u1] = _CLASS_COLOR[cls]
    return img


def _render_radar(cfg: WorldConfig, boxes: list[Box7]) -> RadarImage:
    n_r, n_a = cfg.radar_bins
    max_range = cfg.range_m * math.sqrt(2)
    rbin, abin = max_range / n_r, 2 * math.pi / n_a
    grid = np.zeros((n_r, n_a))
    rc = (np.arange(n_r) + 0.5) * rbin
    ac = -math.pi + (np.arange(n_a) + 0.5) * abin
    for box in boxes:
        r0 = math.hypot(box.cx, box.cy)
        a0 = math.atan2(box.cy, box.cx)
        dr = (rc - r0) / rbin
        da = wrap_angle(ac - a0) / abin
        blob = np.exp(-0.5 * dr[:, None] ** 2 - 0.5 * da[None, :] ** 2)
        blob[(np.abs(dr) > 2)[:, None] | (np.abs(da) > 2)[None, :]] = 0.0
        grid = np.maximum(grid, _RADAR_AMPLITUDE[box.class_id] * blob)
    return RadarImage(grid, rbin, abin)


def _place_objects(rng: np.random.Generator, cfg: WorldConfig, road_y: float, n_lanes: int):
    lo, hi = cfg.num_objects
    n = int(rng.integers(lo, hi + 1))
    half_road = n_lanes * cfg.lane_width / 2
    R = cfg.range_m - 1.0
    placed: list[tuple[Box7, np.ndarray]] = []
    attempts = 0
    while len(placed) < n and attempts < 50 * (n + 1):
        attempts += 1
        u = rng.random()
        if u < cfg.obstacle_fraction:
            cls = STATIC
        elif u < cfg.obstacle_fraction + cfg.pedestrian_fraction:
            cls = PEDESTRIAN
        else:
            cls = VEHICLE
        ml, mw, mh = _CLASS_SIZE[cls]
        l, w, h = (ml * math.exp(rng.normal(0, 0.08)), mw * math.exp(rng.normal(0, 0.08)),
                   mh * math.exp(rng.normal(0, 0.05)))
        x = rng.uniform(-R, R)
        if cls == VEHICLE:
            lane = int(rng.integers(n_lanes))
            y = road_y - half_road + (lane + 0.5) * cfg.lane_width + rng.normal(0, 0.2)
            forward = lane >= n_lanes / 2
            heading = (0.0 if forward else math.pi) + rng.normal(0, 0.1)
            speed = rng.uniform(0, 6.0)
        else:
            side = 1 if rng.random() < 0.5 else -1
            y = road_y + side * (half_road + rng.uniform(0.8, 3.0))
            heading = rng.uniform(-math.pi, math.pi)
            speed = rng.uniform(0, 1.5) if cls == PEDESTRIAN else 0.0
        if abs(y) > R or (abs(x) < 3.0 and abs(y) < 1.5):
            continue
        box = Box7(x, y, h / 2, l, w, h, heading, cls)
        radius = 0.5 * math.hypot(l, w)
        if any(math.hypot(x - b.cx, y - b.cy) < radius + 0.5 * math.hypot(b.l, b.w) + 0.3 for b, _ in placed):
            continue
        vel = speed * np.array([math.cos(heading), math.sin(heading)])
        placed.append((box, vel))
    return placed


def _ego_pose(t: float, speed: float, yaw_rate: float) -> np.ndarray:
    yaw = yaw_rate * t
    if abs(yaw_rate) < 1e-9:
        x, y = speed * t, 0.0
    else:
        x = speed / yaw_rate * math.sin(yaw)
        y = speed / yaw_rate * (1 - math.cos(yaw))
    return _se2(x, y, yaw)


def generate_scene(seed: int, config: WorldConfig | None = None) -> Scene:
    """Deterministically build a scene of ``config.num_frames`` frames, current first."""
    cfg = config or WorldConfig()
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE4E]))
    n_lanes = int(rng.integers(cfg.lanes[0], cfg.lanes[1] + 1))
    road_y = rng.uniform(-3.0, 3.0)
    ego_speed = rng.uniform(0, cfg.ego_speed_max)
    ego_yaw_rate = rng.uniform(-cfg.ego_yaw_rate_max, cfg.ego_yaw_rate_max)
    placed = _place_objects(rng, cfg, road_y, n_lanes)
    half_road = n_lanes * cfg.lane_width / 2
    L = cfg.range_m * 2
    world_lines = [Polyline(np.array([[-L, road_y - half_road + (k + 0.5) * cfg.lane_width],
                                      [L, road_y - half_road + (k + 0.5) * cfg.lane_width]]), "lane")
                   for k in range(n_lanes)]
    world_lines += [Polyline(np.array([[-L, road_y + s * half_road], [L, road_y + s * half_road]]), "boundary")
                    for s in (-1, 1)]
    h, w = cfg.image_hw
    frames = []
    for k in range(cfg.num_frames):
        t = -k * cfg.dt
        pose = _ego_pose(t, ego_speed, ego_yaw_rate)
        world_to_ego = np.linalg.inv(pose)
        boxes, obstacles = [], []
        for box, vel in placed:
            moved = replace(box, cx=box.cx + vel[0] * t, cy=box.cy + vel[1] * t)
            local = transform_box(world_to_ego, moved)
            (obstacles if box.class_id == STATIC else boxes).append(local)
        chunks = []
        ground = np.c_[rng.uniform(-cfg.range_m, cfg.range_m, (cfg.ground_points, 2)),
                       rng.normal(0, cfg.point_noise, cfg.ground_points)]
        chunks.append(np.c_[ground, 0.1 + 0.1 * rng.random(cfg.ground_points)])
        for box in boxes + obstacles:
            pts = _sample_box_surface(rng, box, cfg.surface_density, cfg.point_noise)
            keep = rng.random(len(pts)) >= cfg.occlusion_rate
            keep[: int(not keep.any())] = True  # occlusion never hides an object completely
            pts = pts[keep]
            inten = np.clip(_CLASS_INTENSITY[box.class_id] + rng.normal(0, 0.05, len(pts)), 0, 1)
            chunks.append(np.c_[pts, inten])
        pts = np.concatenate(chunks)
        inside = (np.abs(pts[:, 0]) < cfg.range_m) & (np.abs(pts[:, 1]) < cfg.range_m)
        pts = pts[inside]
        lidar = np.c_[pts, np.full(len(pts), t)]
        camera = default_camera(h, w)
        camera.image = _render_camera(camera, boxes + obstacles)
        radar = _render_radar(cfg, boxes + obstacles)
        roadgraph = [Polyline(transform_points(world_to_ego, np.c_[p.points, np.zeros(len(p.points))])[:, :2], p.kind)
                     for p in world_lines]
        frames.append(Frame(lidar=lidar, camera=camera, radar=radar, boxes=boxes, roadgraph=roadgraph,
                            pose=pose, time_offset=t, obstacles=obstacles))
    vel = np.array([v for b, v in placed if b.class_id != STATIC]).reshape(-1, 2)
    return Scene(seed=int(seed), frames=frames, velocities=vel)


# --------------------------------------------------------------- autolabels


@dataclass(frozen=True)
class AutoLabelNoise:
    center_std: float = 0.3
    size_std: float = 0.1  # std of log-size perturbation
    heading_std: float = 0.1
    confidence_scale: float = 0.5  # confidence = exp(-center_error / confidence_scale)


@dataclass(frozen=True)
class AutoLabel:
    box: Box7
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


AUTOLABEL_MIN_CONFIDENCE = 0.3


def simulate_autolabels(boxes: list[Box7], seed: int, noise: AutoLabelNoise | None = None) -> list[AutoLabel]:
    noise = noise or AutoLabelNoise()
    if min(noise.center_std, noise.size_std, noise.heading_std) < 0:
        raise ValueError("noise standard deviations must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA070]))
    out = []
    for b in boxes:
        dc = rng.normal(0, 1, 3) * noise.center_std
        ds = rng.normal(0, 1, 3) * noise.size_std
        dh = rng.normal(0, 1) * noise.heading_std
        err = float(np.linalg.norm(dc))
        conf = 1.0 if err == 0 else float(np.clip(math.exp(-err / max(noise.confidence_scale, 1e-12)), 0, 1))
        box = Box7(b.cx + dc[0], b.cy + dc[1], b.cz + dc[2], b.l * math.exp(ds[0]), b.w * math.exp(ds[1]),
                   b.h * math.exp(ds[2]), b.heading + dh, b.class_id)
        out.append(AutoLabel(box, conf))
    return out


def filter_autolabels(labels: list[AutoLabel], threshold: float = AUTOLABEL_MIN_CONFIDENCE) -> list[Box7]:
    return [lab.box for lab in labels if lab.confidence >= threshold]


# ------------------------------------------------------------------ surfels


class Surfel(NamedTuple):
    center: np.ndarray
    normal: np.ndarray
    color: np.ndarray


def build_surfels(points: np.ndarray, camera: Camera | None = None, radius: float = 0.5,
                  sensor_origin=(0.0, 0.0, LIDAR_HEIGHT)) -> list[Surfel]:
    """Summarize fixed-radius neighborhoods by mean, normal and mean pixel color.

    Points are visited in order; each point not yet covered seeds a ball of
    ``radius``. Balls with fewer than 3 points are skipped.
    """
    xyz = np.asarray(points, dtype=np.float64)[:, :3]
    if len(xyz) < 3:
        return []
    origin = np.asarray(sensor_origin, dtype=np.float64)
    tree = cKDTree(xyz)
    covered = np.zeros(len(xyz), dtype=bool)
    if camera is not None:
        u, v, _, valid = camera.project(xyz)
        h, w = camera.image.shape[:2]
        ui = np.clip(np.floor(u).astype(np.int64), 0, w - 1)
        vi = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
        pixel = camera.image[vi, ui]
    out = []
    for i in range(len(xyz)):
        if covered[i]:
            continue
        idx = np.asarray(tree.query_ball_point(xyz[i], radius), dtype=np.int64)
        idx.sort()
        covered[idx] = True
        if len(idx) < 3:
            continue
        nb = xyz[idx]
        center = nb.mean(axis=0)
        cov = np.cov((nb - center).T, bias=True)
        _, vecs = np.linalg.eigh(cov)
        normal = vecs[:, 0] / np.linalg.norm(vecs[:, 0])
        facing = float(normal @ (origin - center))
        if facing < -1e-12 or (abs(facing) <= 1e-12 and normal[np.argmax(np.abs(normal))] < 0):
            normal = -normal
        if camera is not None and valid[idx].any():
            color = pixel[idx[valid[idx]]].mean(axis=0)
        else:
            color = np.zeros(3)
        out.append(Surfel(center, normal, color))
    return out


def surfels_to_array(surfels: list[Surfel]) -> np.ndarray:
    """(S, 9): center, normal, color."""
    if not surfels:
        return np.zeros((0, 9))
    return np.stack([np.concatenate([s.center, s.normal, s.color]) for s in surfels])
