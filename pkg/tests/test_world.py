import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevscale.world import (AUTOLABEL_MIN_CONFIDENCE, AutoLabelNoise, Box7, WorldConfig, build_surfels,
                            default_camera, filter_autolabels, generate_scene, points_in_box, simulate_autolabels,
                            surfels_to_array, wrap_angle)


def _scene_bytes(scene):
    parts = []
    for f in scene.frames:
        parts += [f.lidar.tobytes(), f.camera.image.tobytes(), f.radar.intensity.tobytes(), f.pose.tobytes()]
        parts += [np.array([b.as_array() for b in f.boxes]).tobytes()]
    return b"".join(parts)


def test_same_seed_bit_identical():
    assert _scene_bytes(generate_scene(7)) == _scene_bytes(generate_scene(7))
    assert _scene_bytes(generate_scene(7)) != _scene_bytes(generate_scene(8))


def test_empty_world_has_only_ground():
    cfg = WorldConfig(num_objects=(0, 0))
    scene = generate_scene(3, cfg)
    for f in scene.frames:
        assert f.boxes == [] and f.obstacles == []
        assert len(f.lidar) == cfg.ground_points or len(f.lidar) <= cfg.ground_points
        assert np.all(np.abs(f.lidar[:, 2]) < 0.1)


def test_single_static_box_is_hit_every_frame():
    cfg = WorldConfig(num_objects=(1, 1), obstacle_fraction=1.0, pedestrian_fraction=0.0)
    for seed in range(5):
        scene = generate_scene(seed, cfg)
        for f in scene.frames:
            assert len(f.obstacles) == 1
            assert points_in_box(f.lidar, f.obstacles[0]).sum() >= 1


def test_frame_time_offsets_and_range():
    cfg = WorldConfig()
    scene = generate_scene(11, cfg)
    assert [f.time_offset for f in scene.frames] == pytest.approx([0.0, -0.1, -0.2, -0.3])
    for f in scene.frames:
        assert np.all(np.abs(f.lidar[:, :2]) < cfg.range_m)
        np.testing.assert_array_equal(f.lidar[:, 4], f.time_offset)
        assert np.all((f.lidar[:, 3] >= 0) & (f.lidar[:, 3] <= 1))
        assert f.camera.image.min() >= 0 and f.camera.image.max() <= 1


def test_boxes_move_with_constant_velocity():
    scene = generate_scene(5, WorldConfig(ego_speed_max=0.0, ego_yaw_rate_max=0.0))
    vel = scene.velocities
    for k, f in enumerate(scene.frames[1:], start=1):
        for i, (b0, bk) in enumerate(zip(scene.frames[0].boxes, f.boxes)):
            np.testing.assert_allclose([bk.cx - b0.cx, bk.cy - b0.cy], -k * 0.1 * vel[i], atol=1e-9)


def test_degenerate_config_rejected():
    with pytest.raises(ValueError):
        generate_scene(0, WorldConfig(range_m=0.0))
    with pytest.raises(ValueError):
        generate_scene(0, WorldConfig(image_hw=(0, 4)))


def test_box_validation_and_heading_wrap():
    with pytest.raises(ValueError):
        Box7(0, 0, 0, 0.0, 1, 1, 0)
    assert -math.pi <= Box7(0, 0, 0, 1, 1, 1, 3 * math.pi).heading < math.pi


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50, allow_nan=False))
def test_wrap_angle_range(theta):
    w = float(wrap_angle(theta))
    assert -math.pi <= w < math.pi
    assert math.isclose(math.cos(w), math.cos(theta), abs_tol=1e-9)


# ---------------------------------------------------------------- autolabels


def _boxes(n, seed=0):
    rng = np.random.default_rng(seed)
    return [Box7(*rng.uniform(-10, 10, 3), *rng.uniform(1, 4, 3), rng.uniform(-3, 3)) for _ in range(n)]


def test_zero_noise_autolabels_are_exact():
    boxes = _boxes(10)
    labels = simulate_autolabels(boxes, 0, AutoLabelNoise(0.0, 0.0, 0.0))
    for b, lab in zip(boxes, labels):
        np.testing.assert_allclose(lab.box.as_array(), b.as_array(), atol=1e-12)
        assert lab.confidence == 1.0


def test_confidence_filter_is_a_subset():
    labels = simulate_autolabels(_boxes(200), 3)
    kept = filter_autolabels(labels)
    assert len(kept) <= len(labels)
    assert kept == [lab.box for lab in labels if lab.confidence >= 0.3]
    assert AUTOLABEL_MIN_CONFIDENCE == 0.3
    assert all(0 <= lab.confidence <= 1 for lab in labels)


def test_autolabel_center_noise_statistics():
    noise = AutoLabelNoise(center_std=0.4)
    boxes = _boxes(1000, 1)
    labels = simulate_autolabels(boxes, 9, noise)
    err = np.array([[lab.box.cx - b.cx, lab.box.cy - b.cy, lab.box.cz - b.cz] for b, lab in zip(boxes, labels)])
    assert abs(err.std() - 0.4) / 0.4 < 0.10


def test_confidence_is_monotone_in_center_error():
    labels = simulate_autolabels(_boxes(300, 2), 4)
    boxes = _boxes(300, 2)
    err = [math.dist((lab.box.cx, lab.box.cy, lab.box.cz), (b.cx, b.cy, b.cz)) for b, lab in zip(boxes, labels)]
    conf = [lab.confidence for lab in labels]
    order = np.argsort(err)
    assert np.all(np.diff(np.array(conf)[order]) <= 1e-12)


# ------------------------------------------------------------------- surfels


def test_planar_surfel_normal():
    pts = np.array([[0, 0, 0], [0.1, 0, 0], [0, 0.1, 0], [0.1, 0.1, 0]], dtype=float)
    s = build_surfels(pts, radius=0.5)
    assert len(s) == 1
    np.testing.assert_allclose(s[0].normal, [0, 0, 1], atol=1e-12)  # faces the sensor above


def test_constant_color_surfel():
    cam = default_camera(24, 48, image=np.full((24, 48, 3), 0.25))
    pts = np.array([[5, 0, 1.5], [5, 0.1, 1.5], [5, 0, 1.6], [5, 0.1, 1.6]], dtype=float)
    s = build_surfels(pts, cam, radius=0.5)
    np.testing.assert_allclose(s[0].color, 0.25)


@pytest.mark.parametrize("seed", range(10))
def test_noisy_plane_normal_within_one_degree(seed):
    rng = np.random.default_rng(seed)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    u = np.cross(n, [1.0, 0, 0] if abs(n[0]) < 0.9 else [0, 1.0, 0])
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    ab = rng.uniform(-0.3, 0.3, (200, 2))
    pts = ab[:, :1] * u + ab[:, 1:] * v + rng.normal(0, 1e-3, (200, 1)) * n + np.array([3.0, 2.0, 0.5])
    s = build_surfels(pts, radius=2.0)
    angle = math.degrees(math.acos(min(1.0, abs(float(s[0].normal @ n)))))
    assert angle < 1.0


def test_surfels_unit_normals_and_determinism():
    scene = generate_scene(4)
    f = scene.frames[0]
    a = surfels_to_array(build_surfels(f.lidar, f.camera))
    b = surfels_to_array(build_surfels(f.lidar, f.camera))
    assert a.tobytes() == b.tobytes()
    np.testing.assert_allclose(np.linalg.norm(a[:, 3:6], axis=1), 1.0, atol=1e-9)
