"""LoRA adapters, per-block scale maps, plug-and-play weight offsets, and the
binary adapter checkpoint container.

Adapters never mutate base weights: LoRA deltas are composed at projection
time and weight offsets are exact additive edits with an exact inverse.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, DimensionError, FormatError

LORA_PROJECTIONS = ("to_q", "to_k", "to_v", "to_out")

CHECKPOINT_MAGIC = b"OPT1"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_DTYPE = {torch.float32: 0, torch.float64: 1}


class LoraParam(nn.Module):
    """One low-rank pair: delta = (alpha/rank) * B @ A.

    A is gaussian with std 1/rank, B starts at zero so a fresh adapter is an
    exact no-op.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float | None = None,
                 generator: torch.Generator | None = None, dtype: torch.dtype = torch.float64):
        super().__init__()
        if rank < 1:
            raise ConfigurationError("LoRA rank must be >= 1")
        self.rank = rank
        self.alpha = float(rank) if alpha is None else float(alpha)
        A = torch.empty(rank, d_in, dtype=dtype)
        A.normal_(0.0, 1.0 / rank, generator=generator)
        self.A = nn.Parameter(A)
        self.B = nn.Parameter(torch.zeros(d_out, rank, dtype=dtype))

    def delta(self, scale: float = 1.0) -> torch.Tensor:
        return scale * (self.alpha / self.rank) * (self.B @ self.A)


def effective_weight(W: torch.Tensor, lora: LoraParam, scale: float) -> torch.Tensor:
    """W + scale * (alpha/rank) * B @ A."""
    if lora.B.shape[0] != W.shape[0] or lora.A.shape[1] != W.shape[1]:
        raise DimensionError(
            f"LoRA ({tuple(lora.B.shape[0:1])}x{tuple(lora.A.shape[1:2])}) does not match weight {tuple(W.shape)}"
        )
    return W + lora.delta(scale)


@dataclass
class LoraEntry:
    path: str
    projection: str
    module: LoraParam


class LoraSet:
    """All adapters attached to one context, ordered by block then projection."""

    def __init__(self, entries: list[LoraEntry], rank: int):
        self.entries = entries
        self.rank = rank

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for e in self.entries:
            out[f"{e.path}:{e.projection}:A"] = e.module.A
            out[f"{e.path}:{e.projection}:B"] = e.module.B
        return out

    def parameters(self):
        for e in self.entries:
            yield e.module.A
            yield e.module.B

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def attach_lora(ctx, rank: int = 32, targets=LORA_PROJECTIONS, alpha: float | None = None,
                seed: int = 0) -> LoraSet:
    """Attach zero-initialized LoRA adapters to attention projections.

    The forward pass is unchanged immediately after attachment (B = 0).
    Attaching twice to the same context is an error.
    """
    generator = torch.Generator().manual_seed(seed)
    entries = []
    for path, block in ctx.unet.block_registry.items():
        if block.lora is not None:
            raise ConfigurationError(f"LoRA already attached at {path}")
        adapters = nn.ModuleDict()
        for name in targets:
            if name not in LORA_PROJECTIONS:
                raise ConfigurationError(f"unknown LoRA target projection {name!r}")
            proj = getattr(block, name)
            d_out, d_in = proj.weight.shape
            adapters[name] = LoraParam(d_in, d_out, rank, alpha=alpha,
                                       generator=generator, dtype=proj.weight.dtype)
            entries.append(LoraEntry(path, name, adapters[name]))
        block.lora = adapters
    lora_set = LoraSet(entries, rank)
    ctx.lora = lora_set
    return lora_set


@dataclass
class ScaleMap:
    """Per-block LoRA composition scales with a default for unlisted blocks."""

    entries: dict = field(default_factory=dict)
    default_scale: float = 1.0

    def lookup(self, path: str) -> float:
        return self.entries.get(path, self.default_scale)

    def validate(self, registry_paths) -> None:
        known = set(registry_paths)
        for path in self.entries:
            if path not in known:
                raise ConfigurationError(f"scale map entry {path!r} does not resolve to an attention block")

    def to_dict(self) -> dict:
        return {"entries": dict(self.entries), "default_scale": self.default_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleMap":
        return cls(entries=dict(d["entries"]), default_scale=float(d["default_scale"]))


def default_scale_map() -> ScaleMap:
    """Composition scale 1.0 at up.blocks.0.attentions.1, 0.2 everywhere else."""
    return ScaleMap(entries={"up.blocks.0.attentions.1": 1.0}, default_scale=0.2)


@dataclass
class WeightOffset:
    """Additive parameter deltas keyed by context parameter name (w' in w + w')."""

    deltas: dict

    def __add__(self, other: "WeightOffset") -> "WeightOffset":
        merged = {k: v.clone() for k, v in self.deltas.items()}
        for k, v in other.deltas.items():
            merged[k] = merged[k] + v if k in merged else v.clone()
        return WeightOffset(merged)


def _check_offset(ctx, offset: WeightOffset) -> dict:
    params = ctx.parameter_map()
    for name, delta in offset.deltas.items():
        if name not in params:
            raise ConfigurationError(f"offset key {name!r} not found in context parameters")
        if tuple(delta.shape) != tuple(params[name].shape):
            raise ConfigurationError(
                f"offset {name!r} shape {tuple(delta.shape)} != parameter shape {tuple(params[name].shape)}"
            )
    return params


def apply_weight_offset(ctx, offset: WeightOffset) -> None:
    """In-place w <- w + w'. Validates every key first; never partially applies."""
    params = _check_offset(ctx, offset)
    with torch.no_grad():
        for name, delta in offset.deltas.items():
            params[name].add_(delta.to(params[name].dtype))


def remove_weight_offset(ctx, offset: WeightOffset) -> None:
    """In-place w <- w - w', the exact inverse of apply_weight_offset."""
    params = _check_offset(ctx, offset)
    with torch.no_grad():
        for name, delta in offset.deltas.items():
            params[name].sub_(delta.to(params[name].dtype))


def random_weight_offset(ctx, std: float = 1e-3, seed: int = 0, prefix: str = "unet.") -> WeightOffset:
    """Seeded small-norm offset over the matching base parameters; stands in
    for an externally trained plug-and-play offset."""
    generator = torch.Generator().manual_seed(seed)
    deltas = {}
    for name, p in ctx.parameter_map().items():
        if name.startswith(prefix):
            deltas[name] = torch.empty_like(p).normal_(0.0, std, generator=generator)
    return WeightOffset(deltas)


def save_weight_offset(offset: WeightOffset, path) -> None:
    torch.save({k: v.detach().cpu() for k, v in offset.deltas.items()}, path)


def load_weight_offset(path) -> WeightOffset:
    return WeightOffset(torch.load(path, weights_only=True))


@dataclass
class AdapterCheckpoint:
    """Everything one-shot tuning produces: LoRA tensors, VCM tensors, the
    scale map, and run metadata (model config, seeds, loss curve)."""

    loras: dict
    vcm: dict
    scale_map: ScaleMap
    meta: dict


def _write_record(fh, name: str, tensor: torch.Tensor) -> None:
    arr = tensor.detach().cpu().numpy()
    tag = _TAG_FOR_DTYPE[tensor.dtype]
    arr = np.ascontiguousarray(arr.astype(_DTYPE_TAGS[tag], copy=False))
    name_bytes = name.encode("utf-8")
    fh.write(struct.pack("<H", len(name_bytes)))
    fh.write(name_bytes)
    fh.write(struct.pack("<BB", tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_record(fh):
    head = fh.read(2)
    if not head:
        return None
    (name_len,) = struct.unpack("<H", head)
    name = fh.read(name_len).decode("utf-8")
    tag, ndim = struct.unpack("<BB", fh.read(2))
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag} in record {name!r}")
    dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"truncated payload for record {name!r}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return name, torch.from_numpy(arr.copy())


def save_checkpoint(ckpt: AdapterCheckpoint, path) -> None:
    header = {
        "scale_map": ckpt.scale_map.to_dict(),
        "lora_names": sorted(ckpt.loras),
        "vcm_names": sorted(ckpt.vcm),
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in header["lora_names"]:
            _write_record(fh, f"lora/{name}", ckpt.loras[name])
        for name in header["vcm_names"]:
            _write_record(fh, f"vcm/{name}", ckpt.vcm[name])


def load_checkpoint(path) -> AdapterCheckpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint metadata: {exc}") from exc
        loras, vcm = {}, {}
        while True:
            rec = _read_record(fh)
            if rec is None:
                break
            name, tensor = rec
            if name.startswith("lora/"):
                loras[name[len("lora/"):]] = tensor
            elif name.startswith("vcm/"):
                vcm[name[len("vcm/"):]] = tensor
            else:
                raise FormatError(f"unknown record section in {name!r}")
    missing = (set(header["lora_names"]) - set(loras)) | (set(header["vcm_names"]) - set(vcm))
    if missing:
        raise FormatError(f"checkpoint missing records: {sorted(missing)[:4]}")
    return AdapterCheckpoint(
        loras=loras,
        vcm=vcm,
        scale_map=ScaleMap.from_dict(header["scale_map"]),
        meta=header["meta"],
    )
