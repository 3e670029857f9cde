"""Full perception model: modality encoders, fusion, backbone and task heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, BackboneOutput, ModelConfig, backbone_forward
from .data import Batch
from .encoders import (CameraEncoder, ModalityFlags, RadarEncoder, RadarGeometry, camera_backbone, fuse_concat,
                       lss_lift_splat, radar_to_cartesian, surfel_encode)
from .heads import (DIFFUSION_THRESHOLD, OCC_CLASSES, ROAD_CLASSES, DenseHead, Detection, DetectionHead,
                    SegmentationHead, centernet_decode, centernet_heatmap_loss, cross_entropy, densify,
                    detection_outputs, fg_segmentation, fg_targets, nms_bev, occupancy_head, regression_loss,
                    roadgraph_head, sigmoid_focal_loss, voxel_diffusion)
from .nn import Module
from .voxel import GridSpec, PointNetEncoder, dynamic_voxelize, pointnet_embed
from .world import DETECTION_CLASSES

TASKS = ("detection", "occupancy", "roadgraph")
DEFAULT_TASK_WEIGHTS = {"detection": 1.0, "occupancy": 0.2, "roadgraph": 0.2}


@dataclass(frozen=True)
class PerceptionConfig:
    backbone: ModelConfig = field(default_factory=lambda: ModelConfig(width=16, ffn_ratio=2, layers=(1, 1, 1, 1, 1),
                                                                       window=4))
    lidar_hidden: int = 16
    lidar_width: int = 16
    camera_width: int = 8
    camera_blocks: int = 1
    depth_bins: tuple[float, ...] = (2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0)
    radar_width: int = 4
    surfel_width: int = 8
    diffusion_k: int = 3
    diffusion_threshold: float = DIFFUSION_THRESHOLD

    @property
    def fused_width(self) -> int:
        return self.lidar_width + self.camera_width + self.radar_width + self.surfel_width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depth_bins"] = list(self.depth_bins)
        d["backbone"]["layers"] = list(self.backbone.layers)
        d["backbone"]["strides"] = list(self.backbone.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PerceptionConfig":
        d = dict(d)
        bb = d.pop("backbone", None)
        if "depth_bins" in d:
            d["depth_bins"] = tuple(float(v) for v in d["depth_bins"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config fields {sorted(unknown)}")
        return cls(backbone=ModelConfig(**bb) if bb else ModelConfig(), **d)


class PerceptionModel(Module):
    def __init__(self, config: PerceptionConfig, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x30DE1]))
        c = config
        self.config = c
        self.lidar = PointNetEncoder(rng, in_features=2, hidden=c.lidar_hidden, out=c.lidar_width)
        self.camera = CameraEncoder(rng, width=c.camera_width, out_width=c.camera_width,
                                    depth_bins=len(c.depth_bins), blocks=c.camera_blocks)
        self.radar = RadarEncoder(rng, width=c.radar_width)
        self.surfel = PointNetEncoder(rng, in_features=6, hidden=c.lidar_hidden, out=c.surfel_width)
        self.backbone = Backbone(rng, c.backbone, c.fused_width)
        W = c.backbone.width
        self.segmentation = SegmentationHead(rng, W)
        self.detection = DetectionHead(rng, W)
        self.occupancy = DenseHead(rng, W, len(OCC_CLASSES))
        self.roadgraph = DenseHead(rng, W, len(ROAD_CLASSES))

    def _modules(self):
        yield self
        for m in (self.lidar, self.camera, self.radar, self.surfel, self.segmentation, self.detection,
                  self.occupancy, self.roadgraph):
            yield from m._modules()
        yield from self.backbone._modules()

    def copy(self) -> "PerceptionModel":
        other = PerceptionModel(self.config)
        other.load_state_dict(self.state_dict())
        return other


@dataclass
class ModelOutput:
    backbone: BackboneOutput
    seg_logits: Tensor | None = None
    heat_logits: Tensor | None = None  # (B, rows, cols, C)
    regression: Tensor | None = None
    occupancy: Tensor | None = None
    roadgraph: Tensor | None = None


def encode(model: PerceptionModel, batch: Batch, flags: ModalityFlags):
    """Run the enabled modality encoders and concat-fuse them into one sparse map."""
    c, grid, B = model.config, batch.grid, batch.size
    lidar = surfel = camera = radar = None
    if flags.lidar:
        assign = dynamic_voxelize(batch.points, grid, batch.point_batch)
        lidar = pointnet_embed(assign, batch.points, batch.points[:, 3:5], grid, model.lidar)
    if flags.camera:
        feats, depth = camera_backbone(batch.images, model.camera)
        camera = lss_lift_splat(feats, depth, batch.intrinsics, batch.cam_to_ego, grid, np.array(c.depth_bins),
                                batch.images.shape[1:3])
    if flags.radar:
        rb, ab, amin = batch.radar_geom
        geom = RadarGeometry(rb, ab, amin, batch.radar.shape[1:3])
        radar = radar_to_cartesian(batch.radar, model.radar, geom, grid)
    if flags.surfel and len(batch.surfels):
        surfel = surfel_encode(batch.surfels, grid, model.surfel, batch.surfel_batch)
    widths = (c.lidar_width, c.camera_width, c.radar_width, c.surfel_width)
    return fuse_concat(lidar, camera, radar, surfel, grid, widths, flags, batch_size=B)


def forward(model: PerceptionModel, batch: Batch, flags: ModalityFlags = ModalityFlags(),
            tasks: tuple[str, ...] = ("detection",), training: bool = False, drop_rate: float = 0.0,
            rng=None) -> ModelOutput:
    c, grid, B = model.config, batch.grid, batch.size
    fused = encode(model, batch, flags)
    out = ModelOutput(backbone_forward(fused, c.backbone, model.backbone, training, drop_rate, rng))
    feats = out.backbone.fused
    if "detection" in tasks:
        out.seg_logits = fg_segmentation(feats.features, model.segmentation)
        prob = ad.sigmoid_array(out.seg_logits.data)
        diffused = voxel_diffusion(feats, prob, c.diffusion_threshold, c.diffusion_k, grid)
        out.heat_logits, out.regression = detection_outputs(densify(diffused, grid, B), model.detection)
    if "occupancy" in tasks or "roadgraph" in tasks:
        dense = densify(feats, grid, B)
        if "occupancy" in tasks:
            out.occupancy = occupancy_head(dense, model.occupancy)
        if "roadgraph" in tasks:
            out.roadgraph = roadgraph_head(dense, model.roadgraph)
    return out


def task_losses(out: ModelOutput, batch: Batch) -> dict[str, Tensor]:
    losses: dict[str, Tensor] = {}
    if out.heat_logits is not None:
        fused = out.backbone.fused
        seg_t = fg_targets(fused, [b[:, :7] for b in batch.det_boxes], batch.grid)
        losses["detection"] = (centernet_heatmap_loss(out.heat_logits, batch.heatmap)
                               + regression_loss(out.regression, batch.regression, batch.reg_mask)
                               + sigmoid_focal_loss(out.seg_logits, seg_t))
    if out.occupancy is not None:
        losses["occupancy"] = cross_entropy(out.occupancy, batch.occupancy)
    if out.roadgraph is not None:
        losses["roadgraph"] = cross_entropy(out.roadgraph, batch.roadgraph)
    return losses


def total_loss(losses: dict[str, Tensor], weights: dict[str, float] | None = None) -> Tensor:
    weights = DEFAULT_TASK_WEIGHTS if weights is None else weights
    terms = [ad.mul(v, weights.get(k, 1.0)) for k, v in losses.items()]
    if not terms:
        raise ValueError("no task losses enabled")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def heatmap_probs(out: ModelOutput) -> np.ndarray:
    return ad.sigmoid_array(out.heat_logits.data)


def detect(out: ModelOutput, batch: Batch, score_thr: float = 0.1, top_k: int = 50,
           nms_iou: float = 0.5) -> list[list[Detection]]:
    """Decoded, NMS-filtered detections per sample."""
    heat = heatmap_probs(out)
    reg = out.regression.data
    dets = []
    for b in range(batch.size):
        raw = centernet_decode(heat[b], reg[b], batch.grid, score_thr, top_k, DETECTION_CLASSES,
                               frame_id=batch.scene_ids[b])
        dets.append(nms_bev(raw, nms_iou))
    return dets


def default_grid(range_m: float = 16.0, voxel: float = 1.0) -> GridSpec:
    return GridSpec(range_m, range_m, voxel)
