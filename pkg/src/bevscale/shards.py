"""Deterministic on-disk sample shards with a checksummed manifest.

Each shard is a sequence of records: u64 little-endian length, then the
record body. A body is a u32 header length, a JSON header naming the arrays
(dtype, shape, byte offset) and the raw little-endian array bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .data import Sample
from .world import Polyline

SHARD_MAGIC = b"BEVSHARD"
MANIFEST = "manifest.json"


class CorruptShardError(ValueError):
    pass


_ARRAYS = ("points", "image", "intrinsics", "cam_to_ego", "radar", "surfels", "boxes", "obstacles", "autolabels")


def encode_sample(s: Sample) -> bytes:
    arrays = {k: np.ascontiguousarray(getattr(s, k), dtype="<f8") for k in _ARRAYS}
    for i, line in enumerate(s.roadgraph):
        arrays[f"road{i}"] = np.ascontiguousarray(line.points, dtype="<f8")
    entries, offset = {}, 0
    for k, a in arrays.items():
        entries[k] = {"shape": list(a.shape), "offset": offset}
        offset += a.nbytes
    header = json.dumps({"scene_id": int(s.scene_id), "radar_geom": [float(v) for v in s.radar_geom],
                         "road_kinds": [line.kind for line in s.roadgraph], "arrays": entries},
                        sort_keys=True).encode()
    return struct.pack("<I", len(header)) + header + b"".join(a.tobytes() for a in arrays.values())


def decode_sample(body: bytes) -> Sample:
    try:
        (hlen,) = struct.unpack_from("<I", body, 0)
        header = json.loads(body[4:4 + hlen])
        base = 4 + hlen
        arrays = {}
        for k, e in header["arrays"].items():
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            start = base + e["offset"]
            if start + 8 * n > len(body):
                raise CorruptShardError(f"array {k} runs past the end of its record")
            arrays[k] = np.frombuffer(body, dtype="<f8", count=n, offset=start).reshape(e["shape"]).copy()
        road = [Polyline(arrays[f"road{i}"], kind) for i, kind in enumerate(header["road_kinds"])]
        return Sample(header["scene_id"], arrays["points"], arrays["image"], arrays["intrinsics"], arrays["cam_to_ego"],
                      arrays["radar"], tuple(header["radar_geom"]), arrays["surfels"], arrays["boxes"],
                      arrays["obstacles"], arrays["autolabels"], road)
    except CorruptShardError:
        raise
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptShardError(f"undecodable record: {exc}") from None


def write_shards(samples, out_dir: str | Path, shard_size: int = 256, meta: dict | None = None) -> Path:
    """Write samples into numbered shard files plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shards, buf, count, n_total = [], [SHARD_MAGIC], 0, 0

    def flush():
        nonlocal buf, count
        if count == 0:
            return
        name = f"shard-{len(shards):05d}.bin"
        data = b"".join(buf)
        (out / name).write_bytes(data)
        shards.append({"file": name, "count": count, "sha256": hashlib.sha256(data).hexdigest()})
        buf, count = [SHARD_MAGIC], 0

    for s in samples:
        body = encode_sample(s)
        buf.append(struct.pack("<Q", len(body)) + body)
        count += 1
        n_total += 1
        if count == shard_size:
            flush()
    flush()
    manifest = {"version": 1, "num_samples": n_total, "shards": shards, "meta": meta or {}}
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_shard(path: str | Path, expected_sha: str | None = None) -> list[Sample]:
    data = Path(path).read_bytes()
    if expected_sha is not None and hashlib.sha256(data).hexdigest() != expected_sha:
        raise CorruptShardError(f"{path}: checksum mismatch")
    if data[:8] != SHARD_MAGIC:
        raise CorruptShardError(f"{path}: bad magic")
    out, pos = [], 8
    while pos < len(data):
        if pos + 8 > len(data):
            raise CorruptShardError(f"{path}: truncated record length at byte {pos}")
        (n,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if pos + n > len(data):
            raise CorruptShardError(f"{path}: truncated record at byte {pos}")
        out.append(decode_sample(data[pos:pos + n]))
        pos += n
    return out


class ShardSource:
    """Indexable view over a shard directory; shards are loaded on first access."""

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        mpath = self.dir / MANIFEST
        if not mpath.exists():
            raise FileNotFoundError(f"{mpath} not found")
        try:
            self.manifest = json.loads(mpath.read_text())
            self.shards = self.manifest["shards"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise CorruptShardError(f"{mpath}: invalid manifest ({exc})") from None
        self.offsets = np.cumsum([0] + [s["count"] for s in self.shards])
        if self.offsets[-1] == 0:
            raise ValueError(f"{self.dir}: data source is empty")
        self._loaded: dict[int, list[Sample]] = {}

    def __len__(self) -> int:
        return int(self.offsets[-1])

    def __getitem__(self, i: int) -> Sample:
        if not 0 <= i < len(self):
            raise IndexError(i)
        k = int(np.searchsorted(self.offsets, i, side="right") - 1)
        if k not in self._loaded:
            info = self.shards[k]
            samples = read_shard(self.dir / info["file"], info.get("sha256"))
            if len(samples) != info["count"]:
                raise CorruptShardError(f"{info['file']}: expected {info['count']} records, found {len(samples)}")
            self._loaded[k] = samples
        return self._loaded[k][i - int(self.offsets[k])]

    def verify(self) -> None:
        for k in range(len(self.shards)):
            self[int(self.offsets[k])]
