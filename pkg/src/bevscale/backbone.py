"""Multi-scale sparse window transformer over SparseBEVMaps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, LayerNorm, Linear, Module, param
from .voxel import SparseBEVMap, cell_keys, lookup_keys, unpack_keys

DEFAULT_STRIDES = (1, 2, 4, 16, 32)
_MASK_FILL = -1e30


@dataclass(frozen=True)
class ModelConfig:
    width: int = 128
    ffn_ratio: float = 2
    layers: tuple[int, ...] = (2, 3, 2, 3, 2)
    head_size: int = 8
    window: int = 10
    strides: tuple[int, ...] = DEFAULT_STRIDES

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(v) for v in self.layers))
        object.__setattr__(self, "strides", tuple(int(v) for v in self.strides))
        self.validate()

    def validate(self) -> None:
        if self.width <= 0 or self.width % self.head_size:
            raise ValueError(f"width {self.width} must be a positive multiple of head_size {self.head_size}")
        if len(self.layers) != 5 or len(self.strides) != 5:
            raise ValueError("layers and strides must have 5 entries")
        if any(v < 0 for v in self.layers):
            raise ValueError("layer counts must be non-negative")
        if self.window < 2 or self.window % 2:
            raise ValueError(f"window must be even and >= 2, got {self.window}")
        if self.strides[0] != 1 or any(b % a for a, b in zip(self.strides[:-1], self.strides[1:])):
            raise ValueError(f"strides must start at 1 and divide each other, got {self.strides}")
        if self.ffn_ratio <= 0:
            raise ValueError("ffn_ratio must be positive")

    @property
    def heads(self) -> int:
        return self.width // self.head_size

    @property
    def hidden(self) -> int:
        return int(round(self.width * self.ffn_ratio))


# Backbone size axes of the five published configurations.
REFERENCE_CONFIGS: dict[str, ModelConfig] = {
    "25M": ModelConfig(width=128, ffn_ratio=2, layers=(2, 3, 2, 3, 2)),
    "96M": ModelConfig(width=256, ffn_ratio=8, layers=(4, 6, 4, 6, 4)),
    "251M": ModelConfig(width=384, ffn_ratio=10, layers=(5, 7, 5, 7, 5)),
    "364M": ModelConfig(width=384, ffn_ratio=15, layers=(5, 8, 5, 8, 5)),
    "483M": ModelConfig(width=384, ffn_ratio=18, layers=(6, 9, 6, 9, 6)),
}


# ---------------------------------------------------------------- partition


@dataclass
class WindowBatch:
    """Cells grouped into square windows; padded member table per window."""

    stride: int
    window: int
    shift: int
    keys: np.ndarray  # (nW, 3): batch, window row, window col
    members: np.ndarray  # (nW, M) cell indices, -1 for padding
    mask: np.ndarray  # (nW, M) True for real members
    cell_window: np.ndarray  # (N,)
    cell_slot: np.ndarray  # (N,)
    local: np.ndarray = field(repr=False, default=None)  # (N, 2) position inside the window

    @property
    def num_windows(self) -> int:
        return len(self.keys)

    @property
    def capacity(self) -> int:
        return self.members.shape[1]

    def as_dict(self) -> dict[tuple[int, int, int], list[int]]:
        out = {}
        for w in range(self.num_windows):
            out[tuple(int(v) for v in self.keys[w])] = self.members[w][self.mask[w]].tolist()
        return out


def window_partition(bev: SparseBEVMap, window: int, shift: int = 0) -> WindowBatch:
    """Assign cell (r, c) to window (floor((r+shift)/window), floor((c+shift)/window)).

    Members are ordered by cell key, so the result does not depend on the
    input cell order (only on the cell indices it refers back to).
    """
    if window < 2 or window % 2:
        raise ValueError(f"window must be even and >= 2, got {window}")
    n = bev.num_cells
    shifted = bev.coords + shift
    wcoord = np.floor_divide(shifted, window)
    local = shifted - wcoord * window
    wkey = cell_keys(bev.batch, wcoord)
    ckey = bev.keys()
    order = np.lexsort((ckey, wkey))
    sorted_w = wkey[order]
    uniq, start, counts = np.unique(sorted_w, return_index=True, return_counts=True)
    nw = len(uniq)
    cap = int(counts.max()) if nw else 0
    win_of_sorted = np.repeat(np.arange(nw), counts)
    slot_of_sorted = np.arange(n) - np.repeat(start, counts)
    cell_window = np.empty(n, dtype=np.int64)
    cell_slot = np.empty(n, dtype=np.int64)
    cell_window[order] = win_of_sorted
    cell_slot[order] = slot_of_sorted
    members = np.full((nw, cap), -1, dtype=np.int64)
    members[win_of_sorted, slot_of_sorted] = order
    wb, wc = unpack_keys(uniq)
    keys = np.c_[wb, wc]
    return WindowBatch(bev.stride, window, shift, keys, members, members >= 0, cell_window, cell_slot, local)


# ---------------------------------------------------------------- drop path


def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator | int | None = None,
              sample_ids: np.ndarray | None = None) -> Tensor:
    """Zero a residual branch per sample with probability ``rate``; rescale survivors.

    ``sample_ids`` maps each row of ``x`` to its sample; rows of one sample
    share the same keep/drop decision.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop path rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if sample_ids is None:
        sample_ids = np.arange(x.shape[0])
    n_samples = int(sample_ids.max()) + 1 if len(sample_ids) else 0
    keep = (rng.random(n_samples) >= rate).astype(np.float64) / (1.0 - rate)
    scale = keep[sample_ids].reshape((-1,) + (1,) * (x.ndim - 1))
    return ad.mul(x, scale)


# ------------------------------------------------------------------ blocks


class TransformerBlock(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        W, H, w = cfg.width, cfg.heads, cfg.window
        self.ln1 = LayerNorm(W)
        self.q = Linear(rng, W, W)
        self.k = Linear(rng, W, W)
        self.v = Linear(rng, W, W)
        self.proj = Linear(rng, W, W)
        self.rel_bias = param(rng.normal(0, 0.02, ((2 * w - 1) ** 2, H)))
        self.ln2 = LayerNorm(W)
        self.fc1 = Linear(rng, W, cfg.hidden)
        self.fc2 = Linear(rng, cfg.hidden, W)
        self.width, self.heads, self.window = W, H, w


def relative_index(batch: WindowBatch) -> np.ndarray:
    """(nW, M, M) index into the relative position bias table."""
    w = batch.window
    safe = np.where(batch.mask, batch.members, 0)
    loc = batch.local[safe] if len(safe) else np.zeros(safe.shape + (2,), dtype=np.int64)
    d = loc[:, :, None, :] - loc[:, None, :, :] + (w - 1)
    return d[..., 0] * (2 * w - 1) + d[..., 1]


def window_self_attention(batch: WindowBatch, x: Tensor, blk: TransformerBlock) -> Tensor:
    """Multi-head self-attention inside every window (keys masked to real members)."""
    nw, M = batch.members.shape
    W, H = blk.width, blk.heads
    hd = W // H
    safe = np.where(batch.mask, batch.members, 0)
    xw = ad.gather(x, safe)  # (nW, M, W)

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (nw, M, H, hd)), (0, 2, 1, 3))

    q, k, v = heads(blk.q(xw)), heads(blk.k(xw)), heads(blk.v(xw))
    logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    bias = ad.transpose(ad.gather(blk.rel_bias, relative_index(batch)), (0, 3, 1, 2))
    mask_bias = np.where(batch.mask, 0.0, _MASK_FILL)[:, None, None, :]
    att = ad.softmax(ad.add(ad.add(logits, bias), mask_bias), axis=-1)
    out = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (nw * M, W))
    out = ad.gather(out, batch.cell_window * M + batch.cell_slot)
    return blk.proj(out)


def window_attention(batch: WindowBatch, x: Tensor, blk: TransformerBlock, training: bool = False,
                     drop_rate: float = 0.0, rng=None, sample_ids: np.ndarray | None = None) -> Tensor:
    """One pre-norm transformer block: windowed MHSA and MLP, each with a residual."""
    if x.shape[-1] != blk.width:
        raise ValueError(f"block width {blk.width} does not match features {x.shape}")
    if x.shape[0] == 0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    h = window_self_attention(batch, blk.ln1(x), blk)
    x = x + drop_path(h, drop_rate, training, rng, sample_ids)
    h = blk.fc2(ad.gelu(blk.fc1(blk.ln2(x))))
    return x + drop_path(h, drop_rate, training, rng, sample_ids)


# ------------------------------------------------------------- resampling


def strided_downsample(bev: SparseBEVMap, from_stride: int, to_stride: int, proj: Linear | None) -> SparseBEVMap:
    """Max-pool child cells into their parents at the coarser stride, then project."""
    if from_stride <= 0 or to_stride % from_stride:
        raise ValueError(f"invalid stride ratio {from_stride} -> {to_stride}")
    if bev.stride != from_stride:
        raise ValueError(f"map has stride {bev.stride}, expected {from_stride}")
    ratio = to_stride // from_stride
    parent = np.floor_divide(bev.coords, ratio)
    keys = cell_keys(bev.batch, parent)
    uniq, inverse = np.unique(keys, return_inverse=True)
    pb, pc = unpack_keys(uniq)
    if bev.num_cells == 0:
        width = proj.n_out if proj is not None else bev.width
        return SparseBEVMap(to_stride, pc, Tensor(np.zeros((0, width))), pb)
    pooled = ad.max_over_set(bev.features, inverse.reshape(-1), len(uniq))
    feats = proj(pooled) if proj is not None else pooled
    return SparseBEVMap(to_stride, pc, feats, pb)


def ancestor_index(fine: SparseBEVMap, coarse: SparseBEVMap) -> np.ndarray:
    ratio = coarse.stride // fine.stride
    anc = np.floor_divide(fine.coords, ratio)
    idx = lookup_keys(coarse.keys(), cell_keys(fine.batch, anc))
    if (idx < 0).any():
        raise ValueError(f"inconsistent cell lineage: {int((idx < 0).sum())} cells lack a stride-{coarse.stride} ancestor")
    return idx


def multi_scale_fuse(maps: list[SparseBEVMap], fuse: MLP) -> SparseBEVMap:
    """Concatenate each stride-1 cell's features with its ancestors' and apply an MLP."""
    fine = maps[0]
    if fine.num_cells == 0:
        return SparseBEVMap(fine.stride, fine.coords, Tensor(np.zeros((0, fuse.layers[-1].n_out))), fine.batch)
    parts = [fine.features]
    for coarse in maps[1:]:
        parts.append(ad.gather(coarse.features, ancestor_index(fine, coarse)))
    return fine.with_features(fuse(ad.concat(parts, axis=1)))


# ---------------------------------------------------------------- backbone


class Backbone(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, in_width: int):
        self.cfg = cfg
        self.stem = Linear(rng, in_width, cfg.width)
        self.scales = [[TransformerBlock(rng, cfg) for _ in range(n)] for n in cfg.layers]
        self.downs = [Linear(rng, cfg.width, cfg.width) for _ in range(len(cfg.strides) - 1)]
        self.fuse = MLP(rng, [cfg.width * len(cfg.strides), cfg.width, cfg.width], activation="gelu")

    def named_parameters(self, prefix: str = ""):
        out = {}
        out.update(self.stem.named_parameters(prefix + "stem."))
        for s, blocks in enumerate(self.scales):
            for j, blk in enumerate(blocks):
                out.update(blk.named_parameters(f"{prefix}scales.{s}.{j}."))
        for i, d in enumerate(self.downs):
            out.update(d.named_parameters(f"{prefix}downs.{i}."))
        out.update(self.fuse.named_parameters(prefix + "fuse."))
        return out

    def _modules(self):
        yield self
        for blocks in self.scales:
            yield from blocks
        yield self.stem
        yield from self.downs
        yield from self.fuse._modules()


@dataclass
class BackboneOutput:
    fused: SparseBEVMap
    scales: list[SparseBEVMap]


def block_shift(cfg: ModelConfig, j: int) -> int:
    return 0 if j % 2 == 0 else cfg.window // 2


def backbone_forward(fused: SparseBEVMap, cfg: ModelConfig, params: Backbone, training: bool = False,
                     drop_rate: float = 0.0, rng=None) -> BackboneOutput:
    """Stem, then per scale: alternating-shift window blocks and a downsample to the next scale."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    x = fused.with_features(params.stem(fused.features)) if fused.num_cells else \
        SparseBEVMap(1, fused.coords, Tensor(np.zeros((0, cfg.width))), fused.batch)
    outputs = []
    for s, blocks in enumerate(params.scales):
        if s > 0:
            x = strided_downsample(x, cfg.strides[s - 1], cfg.strides[s], params.downs[s - 1])
        feats = x.features
        for j, blk in enumerate(blocks):
            wb = window_partition(x, cfg.window, block_shift(cfg, j))
            feats = window_attention(wb, feats, blk, training, drop_rate, rng, x.batch)
            x = x.with_features(feats)
        outputs.append(x)
    return BackboneOutput(multi_scale_fuse(outputs, params.fuse), outputs)


def count_params(cfg: ModelConfig, in_width: int = 48) -> int:
    """Exact parameter count of ``Backbone(cfg, in_width)`` without allocating it."""
    W, F, H, w = cfg.width, cfg.hidden, cfg.heads, cfg.window
    block = 4 * (W * W + W) + (2 * w - 1) ** 2 * H + 2 * 2 * W + (W * F + F) + (F * W + W)
    n_scales = len(cfg.strides)
    stem = in_width * W + W
    downs = (n_scales - 1) * (W * W + W)
    fuse = (n_scales * W * W + W) + (W * W + W)
    return stem + sum(cfg.layers) * block + downs + fuse


def receptive_field(coords: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Inclusive base-cell bounds (rmin, rmax, cmin, cmax) that can influence each stride-1 output.

    Windows and pooling are aligned to absolute cell indices, so the bounds
    depend on where the cell sits, not only on the configuration.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    out = []
    for axis in (0, 1):
        c = coords[:, axis]
        lo_all, hi_all = c.copy(), c.copy()
        for k, stride in enumerate(cfg.strides):
            a = np.floor_divide(c, stride)
            lo, hi = a.copy(), a.copy()
            for s in range(k, -1, -1):
                for j in reversed(range(cfg.layers[s])):
                    sh = block_shift(cfg, j)
                    lo = np.floor_divide(lo + sh, cfg.window) * cfg.window - sh
                    hi = np.floor_divide(hi + sh, cfg.window) * cfg.window - sh + cfg.window - 1
                if s > 0:
                    ratio = cfg.strides[s] // cfg.strides[s - 1]
                    lo, hi = lo * ratio, hi * ratio + ratio - 1
            lo_all, hi_all = np.minimum(lo_all, lo), np.maximum(hi_all, hi)
        out.append((lo_all, hi_all))
    return np.stack([out[0][0], out[0][1], out[1][0], out[1][1]], axis=1)
