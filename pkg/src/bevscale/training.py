"""LAMB, schedules, staged training, FLOPs accounting and scaling analysis."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import ModelConfig, window_partition
from .data import Batch, collate
from .encoders import ModalityFlags
from .heads import REG_DIM, distill_loss
from .metrics import DEFAULT_IOU_THRESHOLDS, ClassMetrics, evaluate
from .model import (TASKS, PerceptionConfig, PerceptionModel, detect, forward, heatmap_probs,
                    task_losses, total_loss)
from .voxel import GridSpec

STAGES = ("pretrain", "midtrain", "finetune")


# ------------------------------------------------------------------- LAMB


@dataclass
class LambState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def lamb_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: LambState, lr: float,
              weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-6,
              trust_ratio: bool = True) -> None:
    """One in-place LAMB update; each tensor is its own parameter group.

    r = m_hat / (sqrt(v_hat) + eps) + wd * w; w <- w - lr * phi * r with
    phi = |w| / |r| (1 when either norm is 0, or when ``trust_ratio`` is off,
    which reduces the update to Adam with decoupled weight decay).
    """
    if not (0 < beta1 < 1 and 0 < beta2 < 1):
        raise ValueError(f"betas must lie in (0, 1), got {beta1}, {beta2}")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {i} (shape {p.shape})")
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m = state.m.get(i)
        v = state.v.get(i)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[i], state.v[i] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        r = m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data
        phi = 1.0
        if trust_ratio:
            w_norm, r_norm = float(np.linalg.norm(p.data)), float(np.linalg.norm(r))
            if w_norm > 0 and r_norm > 0:
                phi = w_norm / r_norm
        p.data -= lr * phi * r


def lr_at(schedule: str, step: int, total: int, base_lr: float) -> float:
    if not 0 <= step <= max(total, 0):
        raise ValueError(f"step {step} outside [0, {total}]")
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        return base_lr * 0.5 * (1 + math.cos(math.pi * step / total)) if total > 0 else base_lr
    raise ValueError(f"unknown schedule {schedule!r}")


# ----------------------------------------------------------------- stages


@dataclass(frozen=True)
class StageConfig:
    stage: str = "pretrain"
    lr: float = 1e-2
    schedule: str = "constant"
    steps: int = 100
    batch: int = 8
    weight_decay: float = 1e-3
    drop_path: float = 0.5
    tasks: tuple[str, ...] = ("detection",)
    modalities: tuple[str, ...] = ("lidar", "camera", "radar")
    frames: int = 4
    labels: str = "auto"

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "modalities", tuple(self.modalities))
        self.validate()

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.steps < 0 or self.batch <= 0 or self.lr <= 0 or self.frames < 1:
            raise ValueError("stage needs steps >= 0, batch > 0, lr > 0, frames >= 1")
        if not 0 <= self.drop_path < 1:
            raise ValueError("drop_path must lie in [0, 1)")
        if set(self.tasks) - set(TASKS) or not self.tasks:
            raise ValueError(f"tasks must be a non-empty subset of {TASKS}")
        ModalityFlags.parse(",".join(self.modalities))
        if self.labels not in ("gt", "auto"):
            raise ValueError("labels must be 'gt' or 'auto'")
        lr_at(self.schedule, 0, 1, self.lr)

    @property
    def flags(self) -> ModalityFlags:
        return ModalityFlags.parse(",".join(self.modalities))

    @classmethod
    def default(cls, stage: str, **overrides) -> "StageConfig":
        base = {
            "pretrain": dict(lr=1e-2, schedule="constant", tasks=("detection",),
                             modalities=("lidar", "camera", "radar"), labels="auto"),
            "midtrain": dict(lr=1e-4, schedule="cosine", tasks=TASKS,
                             modalities=("lidar", "camera", "radar", "surfel"), labels="gt"),
            "finetune": dict(lr=3e-5, schedule="cosine", tasks=("detection",),
                             modalities=("lidar", "camera", "radar", "surfel"), labels="gt"),
        }
        if stage not in base:
            raise ValueError(f"unknown stage {stage!r}")
        return cls(stage=stage, **{**base[stage], **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"], d["modalities"] = list(self.tasks), list(self.modalities)
        return d


@dataclass
class TrainResult:
    model: PerceptionModel
    trace: list[dict]
    examples: int


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *tags]))


def batch_indices(n: int, batch: int, steps: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Epoch-wise shuffled index batches; an epoch visits every item once."""
    out, perm, pos = [], rng.permutation(n), 0
    for _ in range(steps):
        idx = []
        while len(idx) < batch:
            if pos == n:
                perm, pos = rng.permutation(n), 0
            take = min(batch - len(idx), n - pos)
            idx.extend(perm[pos:pos + take].tolist())
            pos += take
        out.append(np.array(idx))
    return out


def run_stage(model: PerceptionModel, source, stage: StageConfig, seed: int, grid: GridSpec,
              loss_fn: Callable | None = None, task_weights: dict[str, float] | None = None,
              log_every: int = 0, log: Callable[[str], None] | None = None) -> TrainResult:
    """Train ``model`` in place for ``stage.steps`` LAMB steps; deterministic for a fixed seed."""
    if len(source) == 0:
        raise ValueError("empty data source")
    stage.validate()
    rng = _rng(seed, STAGES.index(stage.stage), 0xBA7C4)
    drop_rng = _rng(seed, STAGES.index(stage.stage), 0xD409)
    params = model.parameters()
    state = LambState()
    trace = []
    model.train()
    for step, idx in enumerate(batch_indices(len(source), stage.batch, stage.steps, rng)):
        batch = collate([source[int(i)] for i in idx], grid, stage.labels, stage.frames)
        lr = lr_at(stage.schedule, step, stage.steps, stage.lr)
        for p in params:
            p.grad = None
        out = forward(model, batch, stage.flags, stage.tasks, True, stage.drop_path, drop_rng)
        if loss_fn is None:
            losses = task_losses(out, batch)
            loss = total_loss(losses, task_weights)
        else:
            losses = {}
            loss = loss_fn(out, batch)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite loss at step {step} of {stage.stage}")
        ad.backward(loss)
        lamb_step(params, [p.grad for p in params], state, lr, stage.weight_decay)
        rec = {"step": step, "lr": lr, "loss": loss.item(), **{k: v.item() for k, v in losses.items()}}
        trace.append(rec)
        if log and log_every and step % log_every == 0:
            log(f"{stage.stage} step {step} loss {rec['loss']:.4f} lr {lr:.2e}")
    model.eval()
    for p in params:
        p.grad = None
    return TrainResult(model, trace, stage.steps * stage.batch)


def write_trace_csv(path: str | Path, trace: list[dict]) -> None:
    if not trace:
        Path(path).write_text("step,lr,loss\n")
        return
    keys = list(dict.fromkeys(k for rec in trace for k in rec))
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(trace)


# ------------------------------------------------------------- evaluation


def eval_batches(source, grid: GridSpec, batch: int, labels: str = "gt", frames: int | None = None):
    for start in range(0, len(source), batch):
        yield collate([source[i] for i in range(start, min(start + batch, len(source)))], grid, labels, frames)


def evaluate_loss(model: PerceptionModel, source, grid: GridSpec, tasks=("detection",),
                  modalities=("lidar", "camera", "radar"), batch: int = 8, frames: int | None = None,
                  task_weights: dict[str, float] | None = None) -> float:
    """Example-weighted mean held-out loss (ground-truth labels, eval mode)."""
    flags = ModalityFlags.parse(",".join(modalities))
    total, n = 0.0, 0
    model.eval()
    with ad.no_grad():
        for b in eval_batches(source, grid, batch, "gt", frames):
            out = forward(model, b, flags, tuple(tasks))
            total += total_loss(task_losses(out, b), task_weights).item() * b.size
            n += b.size
    return total / n


def evaluate_ap(model: PerceptionModel, source, grid: GridSpec, modalities=("lidar", "camera", "radar", "surfel"),
                batch: int = 8, frames: int | None = None, iou_thresholds: dict[int, float] | None = None,
                score_thr: float = 0.1) -> dict[int, ClassMetrics]:
    from .world import Box7

    flags = ModalityFlags.parse(",".join(modalities))
    frames_eval = []
    model.eval()
    with ad.no_grad():
        for b in eval_batches(source, grid, batch, "gt", frames):
            out = forward(model, b, flags, ("detection",))
            for dets, gts in zip(detect(out, b, score_thr), b.gt_boxes):
                frames_eval.append((dets, [Box7.from_array(g[:7], int(g[7])) for g in gts]))
    return evaluate(frames_eval, iou_thresholds or DEFAULT_IOU_THRESHOLDS)


# ------------------------------------------------------------------ FLOPs


@dataclass
class FlopBreakdown:
    encoders: float
    attention_blocks: float
    neck: float
    heads: float
    forward_per_sample: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def attention_block_flops(member_counts: np.ndarray, width: int, hidden: int) -> float:
    """One block over windows with the given member counts.

    Per window: 2 m^2 W (scores and weighted sum) + 4 m W^2 (q, k, v and
    output projections); per cell: 2 W F for the MLP. One multiply-add
    counts as one FLOP.
    """
    m = np.asarray(member_counts, dtype=np.float64)
    return float(np.sum(2 * m ** 2 * width + 4 * m * width ** 2) + 2 * m.sum() * width * hidden)


def estimate_flops(config: ModelConfig, cells_per_scale: Sequence[float], steps: int, batch: int,
                   window_members: Sequence[np.ndarray] | None = None, in_width: int = 36,
                   encoder_flops: float = 0.0, head_cells: float = 0.0, head_flops_per_cell: float | None = None
                   ) -> FlopBreakdown:
    """Analytic training FLOPs: 3 x forward (backward counted as 2 x forward).

    ``cells_per_scale`` are mean occupied cells per sample at each stride.
    ``window_members`` gives, per scale, the member count of every window
    (per sample); without it windows are assumed full (m = window^2).
    """
    if steps < 0 or batch <= 0:
        raise ValueError("steps must be >= 0 and batch > 0")
    W, F = config.width, config.hidden
    cells = [float(c) for c in cells_per_scale]
    attn = 0.0
    for s, n_layers in enumerate(config.layers):
        if n_layers == 0 or cells[s] <= 0:
            continue
        if window_members is not None:
            members = np.asarray(window_members[s], dtype=np.float64)
        else:
            cap = config.window ** 2
            full, rest = divmod(cells[s], cap)
            members = np.array([cap] * int(full) + ([rest] if rest else []), dtype=np.float64)
        attn += n_layers * attention_block_flops(members, W, F)
    neck = cells[0] * in_width * W
    neck += sum(c * W * W for c in cells[1:])
    neck += cells[0] * (len(cells) * W * W + W * W)
    if head_flops_per_cell is None:
        head_flops_per_cell = W + 9 * W * W + W * W + W * (2 + REG_DIM)
    heads = head_cells * head_flops_per_cell
    fwd = encoder_flops + attn + neck + heads
    return FlopBreakdown(encoder_flops, attn, neck, heads, fwd, 3.0 * fwd * steps * batch)


def encoder_flops(config: PerceptionConfig, points: float, image_hw: tuple[int, int], radar_hw: tuple[int, int],
                  surfels: float, grid_cells: float) -> float:
    """Forward FLOPs of the modality encoders for one sample."""
    c = config
    h = c.lidar_hidden
    lidar = points * (5 * h + h * h) + grid_cells * h * c.lidar_width
    H, Wd = image_hw
    cam = H * Wd * 27 * c.camera_width
    ds = H // 2
    pix = (H // 2) * (Wd // 2)
    for _ in range(c.camera_blocks):
        cam += 2 * pix * 9 * c.camera_width ** 2
        pix //= 4
        ds //= 2
    cam += pix * 9 * c.camera_width * (c.camera_width + len(c.depth_bins)) + pix * len(c.depth_bins) * c.camera_width
    R, A = radar_hw
    radar = R * A * 9 * c.radar_width + R * A * 2 * 9 * c.radar_width ** 2 + grid_cells * 4 * c.radar_width
    surf = surfels * (9 * h + h * h + h * c.surfel_width)
    return float(lidar + cam + radar + surf)


@dataclass
class FlopProfile:
    """Per-sample sparsity statistics measured on real batches."""

    cells_per_scale: list[float]
    window_members: list[np.ndarray]
    points: float
    surfels: float
    head_cells: float
    image_hw: tuple[int, int] = (24, 48)
    radar_hw: tuple[int, int] = (64, 64)


def measure_profile(model: PerceptionModel, source, grid: GridSpec, samples: int = 16,
                    modalities=("lidar", "camera", "radar")) -> FlopProfile:
    cfg = model.config.backbone
    flags = ModalityFlags.parse(",".join(modalities))
    n = min(samples, len(source))
    b = collate([source[i] for i in range(n)], grid)
    with ad.no_grad():
        out = forward(model, b, flags, ("detection",))
    cells, members = [], []
    for s, m in enumerate(out.backbone.scales):
        cells.append(m.num_cells / n)
        if m.num_cells:
            wb = window_partition(m, cfg.window, 0)
            members.append(wb.mask.sum(axis=1) / n)
        else:
            members.append(np.zeros(0))
    return FlopProfile(cells, members, len(b.points) / n, len(b.surfels) / n, grid.rows * grid.cols,
                       tuple(b.images.shape[1:3]), tuple(b.radar.shape[1:3]))


def model_flops(model: PerceptionModel, profile: FlopProfile, grid: GridSpec, steps: int, batch: int) -> FlopBreakdown:
    c = model.config
    enc = encoder_flops(c, profile.points, profile.image_hw, profile.radar_hw, profile.surfels, grid.rows * grid.cols)
    return estimate_flops(c.backbone, profile.cells_per_scale, steps, batch, profile.window_members,
                          c.fused_width, enc, profile.head_cells)


# ---------------------------------------------------------------- scaling


@dataclass
class ScalingRecord:
    run_id: str
    params: int
    examples: int
    flops: float
    final_loss: float
    seed: int

    def __post_init__(self):
        if self.params <= 0 or self.examples <= 0 or self.flops <= 0 or self.final_loss <= 0:
            raise ValueError(f"scaling record fields must be positive: {self}")


RECORD_FIELDS = ["run_id", "params", "examples", "flops", "final_loss", "seed"]


def read_records(path: str | Path) -> list[ScalingRecord]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with path.open() as fh:
        for row in csv.DictReader(fh):
            missing = set(RECORD_FIELDS) - set(row)
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            out.append(ScalingRecord(row["run_id"], int(row["params"]), int(row["examples"]), float(row["flops"]),
                                     float(row["final_loss"]), int(row["seed"])))
    return out


def append_record(path: str | Path, rec: ScalingRecord) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RECORD_FIELDS)
        w.writerow([rec.run_id, rec.params, rec.examples, repr(rec.flops), repr(rec.final_loss), rec.seed])
        fh.flush()


@dataclass(frozen=True)
class SweepSpec:
    """Everything the scaling grid holds fixed across cells."""

    stage: StageConfig = StageConfig.default("pretrain", drop_path=0.0)
    eval_size: int = 128
    data_seed: int = 0
    eval_seed: int = 1_000_000
    range_m: float = 16.0
    voxel: float = 1.0


def sweep_run_id(name: str, size: int, seed: int) -> str:
    return f"{name}_d{size}_s{seed}"


def scaling_sweep(configs: dict[str, PerceptionConfig], sizes: Sequence[int], seeds: Sequence[int],
                  spec: SweepSpec = SweepSpec(), out_csv: str | Path | None = None, source=None,
                  eval_source=None, log: Callable[[str], None] | None = None) -> list[ScalingRecord]:
    """Train every (config, data size, seed) cell with one fixed recipe for one epoch.

    Data sets are nested prefixes of one stream, so larger sets contain the
    smaller ones. Cells already present in ``out_csv`` are skipped.
    """
    from .data import SyntheticSource
    from .world import WorldConfig

    if len(configs) < 1 or len(sizes) < 1:
        raise ValueError("sweep needs at least one config and one size")
    grid = GridSpec(spec.range_m, spec.range_m, spec.voxel)
    done = {r.run_id: r for r in read_records(out_csv)} if out_csv else {}
    world = WorldConfig(range_m=spec.range_m)
    source = source or SyntheticSource(max(sizes), spec.data_seed, world, cache_size=max(sizes))
    eval_source = eval_source or SyntheticSource(spec.eval_size, spec.eval_seed, world, cache_size=spec.eval_size)
    records = []
    for seed in seeds:
        for name, cfg in configs.items():
            for size in sizes:
                rid = sweep_run_id(name, size, seed)
                if rid in done:
                    records.append(done[rid])
                    continue
                t0 = time.time()
                model = PerceptionModel(cfg, seed)
                steps = max(1, math.ceil(size / spec.stage.batch))
                stage = replace(spec.stage, steps=steps)
                profile = measure_profile(model, eval_source, grid, modalities=stage.modalities)
                run_stage(model, _Prefix(source, size), stage, seed, grid)
                loss = evaluate_loss(model, eval_source, grid, stage.tasks, stage.modalities)
                flops = model_flops(model, profile, grid, steps, stage.batch).total
                rec = ScalingRecord(rid, model.num_params(), steps * stage.batch, flops, loss, seed)
                if out_csv:
                    append_record(out_csv, rec)
                records.append(rec)
                if log:
                    log(f"{rid}: loss {loss:.4f} params {rec.params} flops {flops:.3e} ({time.time() - t0:.0f}s)")
    return records


class _Prefix:
    def __init__(self, source, size: int):
        if size > len(source):
            raise ValueError(f"requested {size} items from a source of {len(source)}")
        self.source, self.size = source, size

    def __len__(self):
        return self.size

    def __getitem__(self, i):
        if not 0 <= i < self.size:
            raise IndexError(i)
        return self.source[i]


@dataclass
class LineFit:
    intercept: float
    slope: float
    r2: float
    n: int


def fit_line(x: np.ndarray, y: np.ndarray) -> LineFit:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least 2 points to fit a line")
    if np.ptp(x) == 0:
        raise ValueError("singular fit: all x values are equal")
    A = np.c_[np.ones_like(x), x]
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (a + b * x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return LineFit(float(a), float(b), r2, len(x))


def fit_loglinear(records: Sequence[ScalingRecord], by: str = "examples") -> dict[int, LineFit]:
    """Per group (default: data size), L = a + b * log10(params) by least squares."""
    groups: dict[int, list[ScalingRecord]] = {}
    for r in records:
        groups.setdefault(getattr(r, by), []).append(r)
    return {k: fit_line(np.log10([r.params for r in g]), [r.final_loss for r in g])
            for k, g in sorted(groups.items())}


def efficient_frontier(records: Sequence) -> list:
    """Records not dominated by another with <= flops and strictly lower loss, sorted by flops.

    Exact ties in loss are all kept, so the loss is strictly decreasing along
    the result only when no two records share a loss.
    """
    order = sorted(range(len(records)), key=lambda i: (records[i].flops, records[i].final_loss, i))
    out, best, i = [], math.inf, 0
    while i < len(order):
        j = i
        while j < len(order) and records[order[j]].flops == records[order[i]].flops:
            j += 1
        best = min(best, records[order[i]].final_loss)  # group is sorted by loss
        out.extend(records[k] for k in order[i:j] if records[k].final_loss == best)
        i = j
    return out


def mean_records(records: Sequence[ScalingRecord]) -> list[ScalingRecord]:
    """Average the final loss (and FLOPs) over seeds for each (params, examples) cell."""
    groups: dict[tuple[int, int], list[ScalingRecord]] = {}
    for r in records:
        groups.setdefault((r.params, r.examples), []).append(r)
    out = []
    for (p, e), g in sorted(groups.items()):
        rid = g[0].run_id.rsplit("_s", 1)[0]
        out.append(ScalingRecord(rid, p, e, float(np.mean([r.flops for r in g])),
                                 float(np.mean([r.final_loss for r in g])), -1))
    return out


def write_fits_json(path: str | Path, fits: dict[int, LineFit], frontier: Sequence[ScalingRecord]) -> None:
    Path(path).write_text(json.dumps({
        "loglinear": {str(k): asdict(v) for k, v in fits.items()},
        "frontier": [asdict(r) for r in frontier],
    }, indent=2, sort_keys=True))


# ----------------------------------------------------------- distillation


def teacher_targets(teacher: PerceptionModel, batch: Batch, flags: ModalityFlags):
    """Teacher heatmap probs, regression and per-cell segmentation probs with their cell keys."""
    with ad.no_grad():
        out = forward(teacher, batch, flags, ("detection",))
    seg = ad.sigmoid_array(out.seg_logits.data)
    return heatmap_probs(out), out.regression.data, (out.backbone.fused.keys(), seg)


def align_cells(keys: np.ndarray, ref_keys: np.ndarray, ref_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Look up ``ref_values`` at ``keys``; cells absent from ``ref_keys`` get value 0 and weight 0."""
    order = np.argsort(ref_keys, kind="stable")
    pos = np.clip(np.searchsorted(ref_keys, keys, sorter=order), 0, max(len(ref_keys) - 1, 0))
    hit = np.zeros(len(keys), dtype=bool)
    vals = np.zeros((len(keys),) + ref_values.shape[1:])
    if len(ref_keys):
        idx = order[pos]
        hit = ref_keys[idx] == keys
        vals[hit] = ref_values[idx[hit]]
    return vals, hit.astype(np.float64)


def make_distill_loss(teacher: PerceptionModel, flags: ModalityFlags, reg_weight: float = 1.0):
    """Loss on raw teacher outputs: quality focal loss on heatmaps and segmentation,
    plus regression toward the teacher weighted by the teacher heatmap."""

    def loss_fn(out, batch: Batch) -> Tensor:
        heat_t, reg_t, (seg_keys, seg_t) = teacher_targets(teacher, batch, flags)
        # the fused cell set depends on each model's dense encoders, so match segmentation cells by key
        seg_t, seg_w = align_cells(out.backbone.fused.keys(), seg_keys, seg_t)
        if seg_t.ndim > 1:
            seg_w = seg_w.reshape((-1,) + (1,) * (seg_t.ndim - 1))
        loss = distill_loss(out.heat_logits, heat_t) + distill_loss(out.seg_logits, seg_t, weights=seg_w)
        if reg_weight:
            w = heat_t.max(axis=-1, keepdims=True)
            diff = out.regression - reg_t
            loss = loss + ad.mul(ad.sum_(ad.mul(ad.abs_(diff), w)), reg_weight / max(float(w.sum()), 1e-12))
        return loss

    return loss_fn


@dataclass
class DistillReport:
    distilled_loss: float
    scratch_loss: float
    distill_steps: int
    finetune_steps: int
    seed: int

    @property
    def distilled_wins(self) -> bool:
        return self.distilled_loss <= self.scratch_loss


def distill_run(teacher: PerceptionModel, student_config: PerceptionConfig, source, eval_source, grid: GridSpec,
                distill_steps: int, finetune_steps: int, seed: int, finetune: StageConfig | None = None,
                distill_lr: float | None = None) -> tuple[PerceptionModel, DistillReport]:
    """Distill then finetune a student; compare against scratch training for the summed step count."""
    ft = finetune or StageConfig.default("finetune", drop_path=0.0)
    flags = ft.flags
    student = PerceptionModel(student_config, seed)
    if distill_steps:
        dstage = replace(ft, stage="midtrain", steps=distill_steps, tasks=("detection",),
                         lr=distill_lr or ft.lr)
        run_stage(student, source, dstage, seed, grid, loss_fn=make_distill_loss(teacher, flags))
    if finetune_steps:
        run_stage(student, source, replace(ft, steps=finetune_steps), seed, grid)
    scratch = PerceptionModel(student_config, seed)
    total = distill_steps + finetune_steps
    if total:
        run_stage(scratch, source, replace(ft, steps=total), seed, grid)
    kw = dict(tasks=("detection",), modalities=ft.modalities)
    report = DistillReport(evaluate_loss(student, eval_source, grid, **kw), evaluate_loss(scratch, eval_source, grid, **kw),
                           distill_steps, finetune_steps, seed)
    return student, report


# --------------------------------------------------------------- ablations


@dataclass
class RecipeSteps:
    """Desk-scale step counts and learning rates for the three-stage recipe."""

    pretrain: StageConfig = StageConfig.default("pretrain", steps=300, drop_path=0.0)
    midtrain: StageConfig = StageConfig.default("midtrain", steps=150, lr=3e-3, drop_path=0.0)
    finetune: StageConfig = StageConfig.default("finetune", steps=100, lr=1e-3, drop_path=0.0)


def ablate_recipe(config: PerceptionConfig, pretrain_source, finetune_source, eval_source, grid: GridSpec, seed: int,
                  recipe: RecipeSteps = RecipeSteps(), iou_thresholds=None,
                  pretrained: PerceptionModel | None = None) -> dict[str, float]:
    """Held-out mAP of pretrain+finetune versus finetune from scratch."""
    ft = recipe.finetune
    if pretrained is None:
        base = PerceptionModel(config, seed)
        run_stage(base, pretrain_source, recipe.pretrain, seed, grid)
    else:
        base = pretrained.copy()
    run_stage(base, finetune_source, ft, seed, grid)
    scratch = PerceptionModel(config, seed)
    run_stage(scratch, finetune_source, ft, seed, grid)
    from .metrics import mean_ap

    return {
        "pretrain+finetune": mean_ap(evaluate_ap(base, eval_source, grid, ft.modalities, iou_thresholds=iou_thresholds)),
        "finetune_only": mean_ap(evaluate_ap(scratch, eval_source, grid, ft.modalities, iou_thresholds=iou_thresholds)),
    }


def ablate_tasks(config: PerceptionConfig, pretrain_source, mid_source, finetune_source, eval_source, grid: GridSpec,
                 seed: int, recipe: RecipeSteps = RecipeSteps(), iou_thresholds=None,
                 pretrained: PerceptionModel | None = None) -> dict[str, float]:
    """Held-out mAP after midtrain with detection+occupancy+roadgraph versus detection only."""
    from .metrics import mean_ap

    if pretrained is None:
        pretrained = PerceptionModel(config, seed)
        run_stage(pretrained, pretrain_source, recipe.pretrain, seed, grid)
    out = {}
    for name, tasks in (("multitask", TASKS), ("detection_only", ("detection",))):
        m = pretrained.copy()
        run_stage(m, mid_source, replace(recipe.midtrain, tasks=tasks), seed, grid)
        run_stage(m, finetune_source, recipe.finetune, seed, grid)
        out[name] = mean_ap(evaluate_ap(m, eval_source, grid, recipe.finetune.modalities,
                                        iou_thresholds=iou_thresholds))
    return out


def ablate_grid(config: PerceptionConfig, source, eval_source, grid: GridSpec, seed: int, stage: StageConfig,
                variants: dict[str, dict]) -> dict[str, float]:
    """Train one model per stage-field override (e.g. modalities or frames) and report held-out loss."""
    out = {}
    for name, override in variants.items():
        st = replace(stage, **override)
        m = PerceptionModel(config, seed)
        run_stage(m, source, st, seed, grid)
        out[name] = evaluate_loss(m, eval_source, grid, st.tasks, st.modalities, frames=st.frames)
    return out
