"""Parameter containers and the versioned parameter file."""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PARAM_FILE_MAGIC = b"BEVPARAM"
PARAM_FILE_VERSION = 1


class Module:
    """Holds parameters as Tensor attributes and child modules.

    Parameter names follow attribute paths, e.g. ``blocks.3.attn.qkv.weight``.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{full}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{full}.{i}"] = item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{full}.{key}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self._modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _modules(self):
        yield self
        for value in vars(self).values():
            items = value.values() if isinstance(value, dict) else value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item._modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def param(arr) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.weight = glorot(rng, n_in, n_out)
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Linear expects width {self.n_in}, got {x.shape}")
        y = ad.matmul(x, self.weight) if x.ndim >= 2 else ad.matmul(ad.reshape(x, (1, -1)), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gamma = param(np.ones(width))
        self.beta = param(np.zeros(width))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Linear layers with an activation between them (none after the last)."""

    def __init__(self, rng: np.random.Generator, sizes: list[int], activation: str = "relu",
                 final_activation: bool = False, bias: bool = True):
        self.layers = [Linear(rng, a, b, bias=bias) for a, b in zip(sizes[:-1], sizes[1:])]
        self.activation = activation
        self.final_activation = final_activation

    def __call__(self, x: Tensor) -> Tensor:
        act = ad.relu if self.activation == "relu" else ad.gelu
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_activation:
                x = act(x)
        return x


class Conv3x3(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, bias: bool = True):
        self.weight = glorot(rng, 9 * c_in, c_out, shape=(3, 3, c_in, c_out))
        self.bias = param(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d_3x3(x, self.weight, self.bias)


# ------------------------------------------------------------ serialization


def save_params(path: str | Path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write parameters as one binary file: magic, version, JSON manifest, raw float64 blobs."""
    manifest = {
        "version": PARAM_FILE_VERSION,
        "meta": meta or {},
        "params": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    header = json.dumps(manifest, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(PARAM_FILE_MAGIC)
    buf.write(struct.pack("<II", PARAM_FILE_VERSION, len(header)))
    buf.write(header)
    for v in state.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != PARAM_FILE_MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != PARAM_FILE_VERSION:
        raise ValueError(f"{path}: unsupported parameter file version {version}")
    manifest = json.loads(raw[16:16 + hlen])
    offset = 16 + hlen
    state: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(entry["shape"])
        state[entry["name"]] = arr.astype(np.float64)
        offset += 8 * n
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return state, manifest.get("meta", {})
