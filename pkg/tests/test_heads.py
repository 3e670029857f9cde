import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevscale import autodiff as ad
from bevscale.autodiff import Tensor
from bevscale.heads import (OCC_CLASSES, REG_DIM, ROAD_BOUNDARY, ROAD_LANE, DenseHead, Detection, DetectionHead,
                            SegmentationHead, centernet_decode, cross_entropy, decode_box, densify, detection_outputs,
                            distill_loss, encode_box, fg_segmentation, fg_targets, gaussian_radius,
                            make_centernet_targets, nms_bev, occupancy_head, occupancy_targets, rasterize_polylines,
                            read_detections_jsonl, roadgraph_head, sigmoid_focal_loss, supercover_cells,
                            voxel_diffusion, write_detections_jsonl)
from bevscale.metrics import iou_bev
from bevscale.voxel import GridSpec, SparseBEVMap
from bevscale.world import PEDESTRIAN, VEHICLE, Box7, Polyline

from _oracles import brute_dilation, brute_heatmap, brute_peaks, random_box, suppress_all_nms


def random_sparse(rng, n=30, spread=6, width=3, batches=2):
    cells = sorted({(int(rng.integers(batches)), int(rng.integers(-spread, spread)), int(rng.integers(-spread, spread)))
                    for _ in range(n)})
    return SparseBEVMap(1, np.array([c[1:] for c in cells]), Tensor(rng.normal(size=(len(cells), width))),
                        np.array([c[0] for c in cells]))


# ---------------------------------------------------------------- segmentation


def test_zero_logits_give_half_probability():
    head = SegmentationHead(np.random.default_rng(0), 4)
    head.linear.weight.data[:] = 0
    head.linear.bias.data[:] = 0
    logits = fg_segmentation(Tensor(np.random.default_rng(1).normal(size=(7, 4))), head)
    np.testing.assert_array_equal(ad.sigmoid(logits).data, 0.5)


def test_fg_targets_mark_cells_inside_boxes():
    grid = GridSpec(5, 5, 1.0)
    bev = SparseBEVMap(1, np.array([[0, 0], [3, 3], [0, 0]]), Tensor(np.zeros((3, 1))), np.array([0, 0, 1]))
    boxes = [np.array([[0.5, 0.5, 0, 2, 2, 1, 0.3]]), np.zeros((0, 7))]
    np.testing.assert_array_equal(fg_targets(bev, boxes, grid), [1, 0, 0])


def test_focal_loss_vanishes_when_confident_and_correct():
    assert sigmoid_focal_loss(Tensor([40.0, -40.0]), np.array([1.0, 0.0])).item() == pytest.approx(0.0, abs=1e-15)
    assert sigmoid_focal_loss(Tensor([-3.0]), np.array([1.0])).item() > 0


# ------------------------------------------------------------------- diffusion


def test_diffusion_single_cell_fills_neighborhood():
    bev = SparseBEVMap(1, np.array([[2, -1]]), Tensor(np.array([[1.5, -2.0]])))
    out = voxel_diffusion(bev, np.array([0.9]), k=3)
    assert out.num_cells == 9
    assert {tuple(c) for c in out.coords.tolist()} == {(2 + a, -1 + b) for a in (-1, 0, 1) for b in (-1, 0, 1)}
    np.testing.assert_array_equal(out.features.data, np.tile([1.5, -2.0], (9, 1)))


def test_diffusion_k1_and_below_threshold_are_identity():
    rng = np.random.default_rng(0)
    bev = random_sparse(rng)
    for k, prob in ((1, np.ones(bev.num_cells)), (3, np.zeros(bev.num_cells))):
        out = voxel_diffusion(bev, prob, k=k)
        np.testing.assert_array_equal(out.coords, bev.coords)
        np.testing.assert_array_equal(out.features.data, bev.features.data)
    with pytest.raises(ValueError):
        voxel_diffusion(bev, np.ones(bev.num_cells), k=2)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("k", [3, 5])
def test_diffusion_matches_bruteforce_dilation(seed, k):
    rng = np.random.default_rng(seed)
    bev = random_sparse(rng, n=40, spread=5)
    prob = rng.random(bev.num_cells)
    grid = GridSpec(5, 5, 1.0)
    out = voxel_diffusion(bev, prob, threshold=0.5, k=k, grid=grid)
    cells = {(int(b), int(r), int(c)): bev.features.data[i] for i, (b, (r, c)) in enumerate(zip(bev.batch, bev.coords))}
    keys = list(cells)
    fg = {keys[i] for i in np.flatnonzero(prob >= 0.5)}
    ref = brute_dilation(cells, fg, k, grid.bounds())
    got = {(int(b), int(r), int(c)): out.features.data[i] for i, (b, (r, c)) in enumerate(zip(out.batch, out.coords))}
    assert got.keys() == ref.keys()
    for key in ref:
        np.testing.assert_array_equal(got[key], ref[key])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.sampled_from([1, 3, 5]))
def test_diffusion_never_removes_cells(seed, thr, k):
    rng = np.random.default_rng(seed)
    bev = random_sparse(rng, n=15)
    out = voxel_diffusion(bev, rng.random(bev.num_cells), threshold=thr, k=k)
    before = {(int(b), int(r), int(c)) for b, (r, c) in zip(bev.batch, bev.coords)}
    after = {(int(b), int(r), int(c)) for b, (r, c) in zip(out.batch, out.coords)}
    assert before <= after


# --------------------------------------------------------------------- targets


def _box8(cx, cy, l=4.0, w=2.0, heading=0.3, cls=VEHICLE, cz=0.5, h=1.6):
    return np.array([cx, cy, cz, l, w, h, heading, cls])


def test_single_box_unit_peak_at_center_cell():
    grid = GridSpec(10, 10, 0.5)
    t = make_centernet_targets(_box8(1.3, -2.2)[None], grid)
    heat = t.heatmap[..., 0]
    assert heat.max() == 1.0
    r, c = np.argwhere(heat == 1.0)[0]
    assert (r + grid.row_lo, c + grid.col_lo) == (math.floor(1.3 / 0.5), math.floor(-2.2 / 0.5))
    assert np.all((t.heatmap >= 0) & (t.heatmap <= 1))
    assert t.mask.sum() == 1 and t.heatmap[..., 1].max() == 0


def test_two_distant_boxes_two_unit_peaks():
    grid = GridSpec(20, 20, 0.5)
    t = make_centernet_targets(np.stack([_box8(-10, -10), _box8(10, 10, cls=PEDESTRIAN, l=0.8, w=0.8)]), grid)
    assert (t.heatmap[..., 0] == 1).sum() == 1 and (t.heatmap[..., 1] == 1).sum() == 1


@pytest.mark.parametrize("seed", range(4))
def test_heatmap_matches_bruteforce_max_of_gaussians(seed):
    rng = np.random.default_rng(seed)
    grid = GridSpec(6, 5, 0.4)
    boxes = np.array([_box8(*rng.uniform(-6, 6, 2), l=rng.uniform(0.5, 5), w=rng.uniform(0.5, 3),
                            heading=rng.uniform(-3, 3), cls=int(rng.integers(0, 3))) for _ in range(6)])
    t = make_centernet_targets(boxes, grid)
    ref = brute_heatmap(boxes, grid, lambda l, w: gaussian_radius(l, w, 0.1), [VEHICLE, PEDESTRIAN])
    np.testing.assert_allclose(t.heatmap, ref, atol=1e-12)


def test_gaussian_radius_monotone_and_nonnegative():
    sizes = np.linspace(0.5, 20, 40)
    radii = [gaussian_radius(s, s / 2) for s in sizes]
    assert all(r >= 0 for r in radii) and np.all(np.diff(radii) > 0)
    assert gaussian_radius(10, 4, 0.1) > gaussian_radius(10, 4, 0.7)


@settings(max_examples=60, deadline=None)
@given(st.floats(-9, 9), st.floats(-9, 9), st.floats(-1, 2), st.floats(0.3, 8), st.floats(0.3, 8), st.floats(0.3, 4),
       st.floats(-3.14, 3.14))
def test_encode_decode_roundtrip(cx, cy, cz, l, w, h, th):
    box = np.array([cx, cy, cz, l, w, h, th])
    cell = np.floor(box[:2] / 0.32).astype(np.int64)
    back = decode_box(encode_box(box, cell, 0.32), cell, 0.32)
    np.testing.assert_allclose(back[:6], box[:6], rtol=1e-9, atol=1e-9)
    assert abs(math.remainder(back[6] - th, 2 * math.pi)) < 1e-9


def test_targets_decode_roundtrip_recovers_boxes():
    rng = np.random.default_rng(3)
    grid = GridSpec(24, 24, 0.5)
    centers = [(-16, -16), (-16, 12), (4, -6), (15, 15), (0, 18)]
    boxes = np.array([_box8(x + rng.uniform(0, 1), y + rng.uniform(0, 1), l=rng.uniform(0.6, 5), w=rng.uniform(0.6, 2.5),
                            h=rng.uniform(0.5, 3), heading=rng.uniform(-3, 3), cls=[VEHICLE, PEDESTRIAN][i % 2])
                      for i, (x, y) in enumerate(centers)])
    t = make_centernet_targets(boxes, grid)
    dets = centernet_decode(t.heatmap, t.regression, grid, score_thr=0.99)
    assert len(dets) == len(boxes)
    for box in boxes:
        d = min(dets, key=lambda d: math.hypot(d.box.cx - box[0], d.box.cy - box[1]))
        assert d.class_id == int(box[7]) and d.score == 1.0
        assert abs(d.box.cx - box[0]) <= grid.voxel_size and abs(d.box.cy - box[1]) <= grid.voxel_size
        np.testing.assert_allclose([d.box.l, d.box.w, d.box.h], box[3:6], atol=1e-6)
        assert abs(math.remainder(d.box.heading - box[6], 2 * math.pi)) < 1e-6


# ---------------------------------------------------------------------- decode


def test_decode_single_peak_and_below_threshold():
    grid = GridSpec(3, 3, 1.0)
    heat = np.zeros(grid.shape + (2,))
    heat[2, 4, 1] = 0.9
    reg = np.zeros(grid.shape + (REG_DIM,))
    reg[..., 7] = 1.0
    dets = centernet_decode(heat, reg, grid, score_thr=0.2)
    assert len(dets) == 1 and dets[0].score == 0.9 and dets[0].class_id == PEDESTRIAN
    assert (dets[0].box.cx, dets[0].box.cy) == ((2 + grid.row_lo) * 1.0, (4 + grid.col_lo) * 1.0)
    assert centernet_decode(np.full(grid.shape + (2,), 0.1), reg, grid, score_thr=0.2) == []
    with pytest.raises(ValueError):
        centernet_decode(heat, reg, grid, score_thr=1.5)


@pytest.mark.parametrize("seed", range(5))
def test_decode_matches_bruteforce_peaks(seed):
    rng = np.random.default_rng(seed)
    grid = GridSpec(4, 3, 0.5)
    heat = rng.random(grid.shape + (2,))
    reg = rng.normal(size=grid.shape + (REG_DIM,))
    dets = centernet_decode(heat, reg, grid, score_thr=0.5, top_k=7)
    ref = brute_peaks(heat, 0.5, 7)
    assert len(dets) == len(ref)
    for d, (i, j, c, s) in zip(dets, ref):
        assert d.score == s and d.class_id == (VEHICLE, PEDESTRIAN)[c]
        expect = decode_box(reg[i, j], np.array([i + grid.row_lo, j + grid.col_lo]), 0.5)
        np.testing.assert_allclose(d.box.as_array()[:6], expect[:6], atol=1e-12)


# ------------------------------------------------------------------------- NMS


def _det(box, score, cls=VEHICLE):
    return Detection(Box7.from_array(box, cls), score)


def test_nms_duplicates_and_disjoint():
    b = [0, 0, 0, 4, 2, 1.5, 0.2]
    kept = nms_bev([_det(b, 0.9), _det(b, 0.8)], 0.5)
    assert len(kept) == 1 and kept[0].score == 0.9
    far = [_det([10 * i, 0, 0, 4, 2, 1.5, 0], 0.5) for i in range(4)]
    assert nms_bev(far, 0.5) == far
    with pytest.raises(ValueError):
        nms_bev(far, 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_nms_matches_reference_and_is_antichain(seed):
    rng = np.random.default_rng(seed)
    dets = [_det(random_box(rng, 3.0), float(rng.random()), int(rng.integers(0, 2))) for _ in range(50)]
    n = len(dets)
    ious = np.array([[iou_bev(dets[i].box, dets[j].box) for j in range(n)] for i in range(n)])
    classes = np.array([d.class_id for d in dets])
    kept = nms_bev(dets, 0.3)
    ref = suppress_all_nms(np.array([d.score for d in dets]), classes, ious, 0.3)
    assert [dets.index(d) for d in kept] == ref
    for a in kept:
        for b in kept:
            if a is not b and a.class_id == b.class_id:
                assert iou_bev(a.box, b.box) < 0.3


# ---------------------------------------------------------------- dense heads


def test_zero_weight_head_gives_uniform_logits_and_single_class_is_constant():
    rng = np.random.default_rng(0)
    head = DenseHead(rng, 4, len(OCC_CLASSES))
    for p in head.parameters():
        p.data[:] = 0
    out = occupancy_head(Tensor(rng.normal(size=(2, 5, 6, 4))), head).data
    assert np.all(out == 0)
    single = DenseHead(rng, 4, 1)
    logits = occupancy_head(Tensor(rng.normal(size=(1, 5, 6, 4))), single).data
    assert np.all(logits.argmax(-1) == 0)


def test_roadgraph_and_occupancy_heads_agree_with_same_weights():
    rng = np.random.default_rng(1)
    a, b = DenseHead(rng, 4, 3), DenseHead(rng, 4, 3)
    b.load_state_dict(a.state_dict())
    x = Tensor(rng.normal(size=(1, 4, 4, 4)))
    assert roadgraph_head(x, b).data.tobytes() == occupancy_head(x, a).data.tobytes()


def test_dense_head_gradients():
    rng = np.random.default_rng(2)
    head = DenseHead(rng, 3, 4, hidden=3)
    for p in head.parameters():
        p.data[:] = p.data + rng.normal(0, 0.2, p.shape)
    x = Tensor(rng.normal(size=(1, 3, 4, 3)), requires_grad=True)
    labels = rng.integers(0, 4, (1, 3, 4))
    assert ad.gradcheck(lambda: cross_entropy(occupancy_head(x, head), labels), head.parameters() + [x]) < 1e-5


def test_detection_outputs_split_channels():
    rng = np.random.default_rng(3)
    head = DetectionHead(rng, 4)
    x = Tensor(rng.normal(size=(2, 3, 3, 4)))
    heat, reg = detection_outputs(x, head)
    full = head.body(x).data
    np.testing.assert_array_equal(heat.data, full[..., :2])
    np.testing.assert_array_equal(reg.data, full[..., 2:])


def test_densify_places_cells():
    grid = GridSpec(2, 2, 1.0)
    bev = SparseBEVMap(1, np.array([[-2, -2], [1, 0]]), Tensor(np.array([[1.0], [2.0]])), np.array([0, 1]))
    d = densify(bev, grid, 2).data
    assert d[0, 0, 0, 0] == 1.0 and d[1, 3, 2, 0] == 2.0 and d.sum() == 3.0
    with pytest.raises(ValueError):
        densify(SparseBEVMap(1, np.array([[5, 0]]), Tensor(np.ones((1, 1)))), grid, 1)


def test_cross_entropy_hand_value():
    logits = Tensor(np.array([[0.0, math.log(3.0)]]))
    assert cross_entropy(logits, np.array([1])).item() == pytest.approx(-math.log(0.75), abs=1e-12)


def test_occupancy_targets_label_cells_inside_boxes():
    grid = GridSpec(4, 4, 1.0)
    occ = occupancy_targets(np.array([_box8(0.5, 0.5, l=1.0, w=1.0, heading=0.0, cls=PEDESTRIAN)]), grid)
    assert occ[-grid.row_lo, -grid.col_lo] == 1 + PEDESTRIAN and (occ != 0).sum() == 1
    assert np.all(occupancy_targets(np.zeros((0, 8)), grid) == 0)


# ---------------------------------------------------------------- rasterization


def _orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _segments_touch(p, q, a, b):
    d1, d2, d3, d4 = _orient(a, b, p), _orient(a, b, q), _orient(p, q, a), _orient(p, q, b)
    if ((d1 > 0) != (d2 > 0) or d1 == 0 or d2 == 0) and ((d3 > 0) != (d4 > 0) or d3 == 0 or d4 == 0):
        def on(u, v, w):
            return min(u[0], v[0]) <= w[0] <= max(u[0], v[0]) and min(u[1], v[1]) <= w[1] <= max(u[1], v[1])
        if d1 == d2 == 0:  # collinear: require overlap
            return on(a, b, p) or on(a, b, q) or on(p, q, a) or on(p, q, b)
        return True
    return False


def _brute_supercover(p, q, v, lo=-20, hi=20):
    cells = set()
    for r in range(lo, hi):
        for c in range(lo, hi):
            x0, x1, y0, y1 = r * v, (r + 1) * v, c * v, (c + 1) * v
            inside = any(x0 <= s[0] <= x1 and y0 <= s[1] <= y1 for s in (p, q))
            edges = [((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))]
            if inside or any(_segments_touch(p, q, a, b) for a, b in edges):
                cells.add((r, c))
    return cells


@pytest.mark.parametrize("seed", range(6))
def test_supercover_matches_segment_square_intersection(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.uniform(-7, 7, 2), rng.uniform(-7, 7, 2)
    got = {tuple(c) for c in supercover_cells(p, q, 0.7).tolist()}
    assert got == _brute_supercover(tuple(p), tuple(q), 0.7)


def test_straight_lane_and_empty_roadgraph():
    grid = GridSpec(5, 5, 1.0)
    lane = Polyline(np.array([[0.5, -4.5], [0.5, 4.5]]), "lane")
    road = rasterize_polylines([lane], grid)
    assert set(np.argwhere(road == ROAD_LANE)[:, 0] + grid.row_lo) == {0}
    assert (road == ROAD_LANE).sum() == 10  # columns -5 .. 4
    assert np.all(rasterize_polylines([], grid) == 0)
    both = rasterize_polylines([lane, Polyline(np.array([[-4.5, 0.5], [4.5, 0.5]]), "boundary")], grid)
    assert both[-grid.row_lo, -grid.col_lo] == ROAD_BOUNDARY


# --------------------------------------------------------------------- distill


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_distill_loss_zero_at_teacher_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    t = rng.random((3, 4))
    assert distill_loss(Tensor(t), t, from_logits=False).item() == pytest.approx(0.0, abs=1e-15)
    logits = np.log(t) - np.log1p(-t)
    assert distill_loss(Tensor(logits), t).item() == pytest.approx(0.0, abs=1e-20)
    assert distill_loss(Tensor(rng.normal(size=(3, 4)) * 5), t).item() >= 0
    assert distill_loss(Tensor(rng.random((3, 4))), t, from_logits=False).item() >= 0


def test_distill_loss_clamps_at_log_eps():
    for student, kw in ((Tensor([[-100.0]]), {}), (Tensor([[0.0]]), {"from_logits": False})):
        loss = distill_loss(student, np.array([[1.0]]), eps=1e-6, **kw).item()
        assert np.isfinite(loss) and loss == pytest.approx(-math.log(1e-6), rel=1e-5)


def test_distill_loss_validation():
    with pytest.raises(ValueError):
        distill_loss(Tensor(np.zeros(3)), np.zeros(4))
    with pytest.raises(ValueError):
        distill_loss(Tensor(np.zeros(2)), np.array([0.5, 1.5]))


# ------------------------------------------------------------------ detections


def test_detection_jsonl_roundtrip(tmp_path):
    dets = [_det([1, 2, 0.5, 4, 2, 1.5, 0.3], 0.7), _det([-1, 0, 0, 0.8, 0.8, 1.8, -2.0], 0.2, PEDESTRIAN)]
    write_detections_jsonl(tmp_path / "d.jsonl", dets)
    assert read_detections_jsonl(tmp_path / "d.jsonl") == dets
    with pytest.raises(ValueError):
        Detection(Box7(0, 0, 0, 1, 1, 1, 0), 1.2)
