"""Toy UNet with SDXL-style named attention blocks.

Three resolution levels, cross-attention only, every attention sublayer
addressable by a dot-separated block path (e.g. "up.blocks.0.attentions.1")
through the context's block registry. Conditioning mechanisms (LoRA scales,
style injection, face token replacement, control residuals) are all routed
per block and audited through event hooks.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from ..adapters import ScaleMap, effective_weight
from ..audit import AuditLog
from ..errors import ConfigurationError, DimensionError
from ..torchinit import init_conv, init_linear
from ..vcm import (
    FaceConditioning,
    FaceProjector,
    IdentityStrategy,
    InjectionConfig,
    StyleEncoder,
    TokenSequence,
    apply_attention,
    attend,
    attention_probs,
    key_value_sequences,
    style_injection,
)
from .codec import LatentCodec
from .schedule import NoiseSchedule

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    """Geometry and seeding of one model context.

    The default is the 64x64 toy scale; ``mini`` is a shrunken variant used
    for finite-difference gradient checks and fast tests.
    """

    image_size: int = 64
    codec_factor: int = 4
    channels: tuple = (64, 96, 128)
    groups: int = 4
    heads: int = 4
    d_text: int = 64
    time_dim: int = 128
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    d_face: int = 64
    d_mid: int = 64
    n_face_tokens: int = 4
    style_channels: tuple = (16, 32)
    style_pool: tuple = (2, 4)
    out_gain: float = 3.0
    style_proj_gain: float = 1.0
    dtype: str = "float64"
    seed: int = 0

    @property
    def latent_channels(self) -> int:
        return 4 * self.codec_factor * self.codec_factor

    @property
    def latent_size(self) -> int:
        return self.image_size // self.codec_factor

    @property
    def n_style_tokens(self) -> int:
        return self.style_pool[0] * self.style_pool[1]

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def mini(cls, **overrides) -> "ModelConfig":
        base = dict(
            image_size=16, codec_factor=2, channels=(8, 8, 8), groups=2, heads=2,
            d_text=16, time_dim=16, d_face=16, d_mid=16, n_face_tokens=2,
            style_channels=(4, 8), style_pool=(2, 2),
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "codec_factor": self.codec_factor,
            "channels": list(self.channels), "groups": self.groups, "heads": self.heads,
            "d_text": self.d_text, "time_dim": self.time_dim, "T": self.T,
            "beta_start": self.beta_start, "beta_end": self.beta_end,
            "d_face": self.d_face, "d_mid": self.d_mid, "n_face_tokens": self.n_face_tokens,
            "style_channels": list(self.style_channels), "style_pool": list(self.style_pool),
            "out_gain": self.out_gain, "style_proj_gain": self.style_proj_gain,
            "dtype": self.dtype, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("channels", "style_channels", "style_pool"):
            d[key] = tuple(d[key])
        return cls(**d)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, time_dim, groups, generator, dtype):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in, dtype=dtype)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1, dtype=dtype)
        self.time_proj = nn.Linear(time_dim, c_out, dtype=dtype)
        self.norm2 = nn.GroupNorm(groups, c_out, dtype=dtype)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, dtype=dtype)
        self.skip = nn.Conv2d(c_in, c_out, 1, dtype=dtype) if c_in != c_out else nn.Identity()
        init_conv(self.conv1, generator)
        init_linear(self.time_proj, generator)
        init_conv(self.conv2, generator)
        if isinstance(self.skip, nn.Conv2d):
            init_conv(self.skip, generator)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """One cross-attention sublayer owning q/k/v/out plus dedicated style
    projections. ``path`` is assigned when the block registry is built."""

    def __init__(self, channels, d_text, heads, groups, generator, dtype, style_gain=1.0):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels, dtype=dtype)
        self.to_q = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.to_k = nn.Linear(d_text, channels, bias=False, dtype=dtype)
        self.to_v = nn.Linear(d_text, channels, bias=False, dtype=dtype)
        self.to_out = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.style_to_k = nn.Linear(d_text, channels, bias=False, dtype=dtype)
        self.style_to_v = nn.Linear(d_text, channels, bias=False, dtype=dtype)
        self.heads = heads
        self.path: str | None = None
        self.lora = None  # nn.ModuleDict once LoRA is attached
        for layer in (self.to_q, self.to_k, self.to_v, self.to_out):
            init_linear(layer, generator)
        init_linear(self.style_to_k, generator, gain=style_gain)
        init_linear(self.style_to_v, generator, gain=style_gain)

    def _weight(self, name: str, scale: float) -> torch.Tensor:
        W = getattr(self, name).weight
        if self.lora is not None and name in self.lora:
            W = effective_weight(W, self.lora[name], scale)
        return W

    def _prepare(self, x, tokens: TokenSequence, cond):
        """Shared front half of the forward pass: LoRA scale resolution,
        query projection, key/value token selection, attention probabilities."""
        events = []
        scale = 1.0
        if self.lora is not None:
            if cond is not None and cond.lora_scales is not None:
                scale = cond.lora_scales.lookup(self.path)
            events.append({"event": "lora_scale", "scale": scale})
        B, C, H, W = x.shape
        h = self.norm(x).reshape(B, C, H * W).transpose(1, 2)
        q = F.linear(h, self._weight("to_q", scale))
        face = cond.face if cond is not None else None
        keys_emb, values_emb = key_value_sequences(tokens, face)
        k = F.linear(keys_emb, self._weight("to_k", scale))
        probs = attention_probs(q, k, self.heads)
        return q, probs, values_emb, scale, events

    def probabilities(self, x, tokens: TokenSequence, cond=None) -> torch.Tensor:
        """Attention probability tensor for this block on input x."""
        return self._prepare(x, tokens, cond)[1]

    def forward(self, x, tokens: TokenSequence, cond=None, hooks=None):
        q, probs, values_emb, scale, events = self._prepare(x, tokens, cond)
        B, C, H, W = x.shape
        face = cond.face if cond is not None else None
        v = F.linear(values_emb, self._weight("to_v", scale))
        out = apply_attention(probs, v, self.heads)

        if face is not None:
            if face.strategy is IdentityStrategy.ADDED_CROSS_ATTENTION:
                if face.lambda_face != 0.0:
                    kf = F.linear(face.face_tokens, self._weight("to_k", scale))
                    vf = F.linear(face.face_tokens, self._weight("to_v", scale))
                    out = out + face.lambda_face * attend(q, kf, vf, self.heads)
                    events.append({"event": "face_attention", "lambda": face.lambda_face})
            else:
                events.append({"event": "face_replacement", "strategy": face.strategy.value})

        inj = cond.injection if cond is not None else None
        if (cond is not None and cond.style_tokens is not None and inj is not None
                and inj.lambda_style != 0.0 and self.path in inj.whitelist):
            out = out + style_injection(q, cond.style_tokens, self.style_to_k.weight,
                                        self.style_to_v.weight, inj.lambda_style, self.heads)
            events.append({"event": "style_injection", "lambda": inj.lambda_style})

        y = F.linear(out, self._weight("to_out", scale))
        y = y.transpose(1, 2).reshape(B, C, H, W)

        if hooks:
            for observer in hooks.get(self.path, ()):
                observer(self.path, events)
        if cond is not None and cond.audit is not None:
            for ev in events:
                fields = {kk: vv for kk, vv in ev.items() if kk != "event"}
                cond.audit.emit(self.path, ev["event"], **fields)
        return x + y


class Downsample(nn.Module):
    def __init__(self, channels, generator, dtype):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1, dtype=dtype)
        init_conv(self.conv, generator)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels, generator, dtype):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, dtype=dtype)
        init_conv(self.conv, generator)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class DownBlock(nn.Module):
    def __init__(self, c_in, c_out, cfg, generator, attend_here, downsample, dtype):
        super().__init__()
        self.res = ResBlock(c_in, c_out, cfg.time_dim, cfg.groups, generator, dtype)
        self.attentions = nn.ModuleList(
            [AttentionBlock(c_out, cfg.d_text, cfg.heads, cfg.groups, generator, dtype,
                            cfg.style_proj_gain)
             for _ in range(2)] if attend_here else []
        )
        self.down = Downsample(c_out, generator, dtype) if downsample else None


class MidBlock(nn.Module):
    def __init__(self, channels, cfg, generator, dtype):
        super().__init__()
        self.res1 = ResBlock(channels, channels, cfg.time_dim, cfg.groups, generator, dtype)
        self.attentions = nn.ModuleList(
            [AttentionBlock(channels, cfg.d_text, cfg.heads, cfg.groups, generator, dtype,
                            cfg.style_proj_gain)
             for _ in range(2)]
        )
        self.res2 = ResBlock(channels, channels, cfg.time_dim, cfg.groups, generator, dtype)


class UpBlock(nn.Module):
    def __init__(self, c_in, c_out, cfg, generator, attend_here, upsample, dtype):
        super().__init__()
        self.res = ResBlock(c_in, c_out, cfg.time_dim, cfg.groups, generator, dtype)
        self.attentions = nn.ModuleList(
            [AttentionBlock(c_out, cfg.d_text, cfg.heads, cfg.groups, generator, dtype,
                            cfg.style_proj_gain)
             for _ in range(2)] if attend_here else []
        )
        self.up = Upsample(c_out, generator, dtype) if upsample else None


@dataclass
class ControlResiduals:
    """Additive features matching the UNet skip shapes per level, plus mid."""

    down: tuple  # tensors at levels (hi, mid, lo)
    mid: torch.Tensor


@dataclass
class ConditioningBundle:
    """Optional conditioning mechanisms for one forward pass.

    Absent entries leave the corresponding mechanism inactive. ``control``
    may be precomputed ControlResiduals or any object with a
    ``compute(z_t, t, tokens)`` method (evaluated per call).
    """

    style_tokens: torch.Tensor | None = None
    injection: InjectionConfig | None = None
    face: FaceConditioning | None = None
    lora_scales: ScaleMap | None = None
    control: object | None = None
    audit: AuditLog | None = None


class ToyUNet(nn.Module):
    def __init__(self, cfg: ModelConfig, generator: torch.Generator):
        super().__init__()
        dtype = cfg.torch_dtype
        c0, c1, c2 = cfg.channels
        self.cfg = cfg
        self.conv_in = nn.Conv2d(cfg.latent_channels, c0, 3, padding=1, dtype=dtype)
        init_conv(self.conv_in, generator)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim, dtype=dtype),
            nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim, dtype=dtype),
        )
        init_linear(self.time_mlp[0], generator)
        init_linear(self.time_mlp[2], generator)
        self.down_blocks = nn.ModuleList([
            DownBlock(c0, c0, cfg, generator, attend_here=False, downsample=True, dtype=dtype),
            DownBlock(c0, c1, cfg, generator, attend_here=True, downsample=True, dtype=dtype),
            DownBlock(c1, c2, cfg, generator, attend_here=True, downsample=False, dtype=dtype),
        ])
        self.mid_block = MidBlock(c2, cfg, generator, dtype)
        self.up_blocks = nn.ModuleList([
            UpBlock(c2 + c2, c2, cfg, generator, attend_here=True, upsample=True, dtype=dtype),
            UpBlock(c2 + c1, c1, cfg, generator, attend_here=True, upsample=True, dtype=dtype),
            UpBlock(c1 + c0, c0, cfg, generator, attend_here=False, upsample=False, dtype=dtype),
        ])
        self.out_norm = nn.GroupNorm(cfg.groups, c0, dtype=dtype)
        self.conv_out = nn.Conv2d(c0, cfg.latent_channels, 3, padding=1, dtype=dtype)
        init_conv(self.conv_out, generator, gain=cfg.out_gain)

        self.block_registry = OrderedDict()
        for i, blk in enumerate(self.down_blocks):
            for j, attn in enumerate(blk.attentions):
                self._register(f"down.blocks.{i}.attentions.{j}", attn)
        for j, attn in enumerate(self.mid_block.attentions):
            self._register(f"mid.block.attentions.{j}", attn)
        for i, blk in enumerate(self.up_blocks):
            for j, attn in enumerate(blk.attentions):
                self._register(f"up.blocks.{i}.attentions.{j}", attn)

    def _register(self, path: str, attn: AttentionBlock) -> None:
        attn.path = path
        self.block_registry[path] = attn

    def _resolve_control(self, cond, z, t, tokens):
        if cond is None or cond.control is None:
            return None
        ctrl = cond.control
        if hasattr(ctrl, "compute"):
            ctrl = ctrl.compute(z, t, tokens)
        expected = self._control_shapes(z.shape[0])
        got = [tuple(r.shape) for r in ctrl.down] + [tuple(ctrl.mid.shape)]
        if got != expected:
            raise DimensionError(f"control residual shapes {got} != expected {expected}")
        return ctrl

    def _control_shapes(self, batch: int) -> list:
        c0, c1, c2 = self.cfg.channels
        s = self.cfg.latent_size
        return [
            (batch, c0, s, s),
            (batch, c1, s // 2, s // 2),
            (batch, c2, s // 4, s // 4),
            (batch, c2, s // 4, s // 4),
        ]

    def forward(self, z, t, tokens: TokenSequence, cond: ConditioningBundle | None = None,
                hooks=None):
        if cond is not None:
            if cond.lora_scales is not None:
                cond.lora_scales.validate(self.block_registry)
            if cond.injection is not None:
                for path in cond.injection.whitelist:
                    if path not in self.block_registry:
                        raise ConfigurationError(f"whitelisted path {path!r} not in block registry")
        B = z.shape[0]
        dtype = self.conv_in.weight.dtype
        t_tensor = torch.as_tensor(t, dtype=dtype).reshape(-1)
        if t_tensor.numel() == 1:
            t_tensor = t_tensor.expand(B)
        temb = self.time_mlp(sinusoidal_embedding(t_tensor, self.cfg.time_dim))

        residuals = self._resolve_control(cond, z, t, tokens)
        audit = cond.audit if cond is not None else None

        h = self.conv_in(z.to(dtype))
        skips = []
        for blk in self.down_blocks:
            h = blk.res(h, temb)
            for attn in blk.attentions:
                h = attn(h, tokens, cond, hooks)
            skips.append(h)
            if blk.down is not None:
                h = blk.down(h)

        h = self.mid_block.res1(h, temb)
        for attn in self.mid_block.attentions:
            h = attn(h, tokens, cond, hooks)
        h = self.mid_block.res2(h, temb)

        if residuals is not None:
            skips = [s + r for s, r in zip(skips, residuals.down)]
            h = h + residuals.mid
            if audit is not None:
                for i in range(len(residuals.down)):
                    audit.emit(f"control.down.{i}", "control_residual")
                audit.emit("control.mid", "control_residual")

        for blk, skip in zip(self.up_blocks, reversed(skips)):
            h = blk.res(torch.cat([h, skip], dim=1), temb)
            for attn in blk.attentions:
                h = attn(h, tokens, cond, hooks)
            if blk.up is not None:
                h = blk.up(h)

        return self.conv_out(F.silu(self.out_norm(h)))


class HookHandle:
    def __init__(self, hooks: dict, path: str, observer):
        self._hooks = hooks
        self._path = path
        self._observer = observer

    def remove(self) -> None:
        try:
            self._hooks[self._path].remove(self._observer)
        except (KeyError, ValueError):
            pass


class ModelContext:
    """One self-contained model: codec, schedule, UNet, and VCM modules.

    A context is rebuilt bit-identically from (config, seed); forward passes
    are deterministic. A context must not be mutated concurrently.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        generator = torch.Generator().manual_seed(config.seed)
        self.codec = LatentCodec(config.image_size, config.codec_factor, config.torch_dtype)
        self.schedule = NoiseSchedule(config.T, config.beta_start, config.beta_end)
        self.unet = ToyUNet(config, generator)
        self.face_projector = FaceProjector(config.d_face, config.d_mid, config.n_face_tokens,
                                            config.d_text, generator, config.torch_dtype)
        self.style_encoder = StyleEncoder(config.d_text, config.style_channels,
                                          config.style_pool, generator, config.torch_dtype)
        self.lora = None
        self._hooks: dict = {}

    @classmethod
    def build(cls, config: ModelConfig | None = None) -> "ModelContext":
        return cls(config or ModelConfig())

    def parameter_map(self) -> "OrderedDict[str, torch.Tensor]":
        """Named map of base weights (LoRA adapter tensors excluded)."""
        out = OrderedDict()
        for name, p in self.unet.named_parameters():
            if ".lora." not in name:
                out[f"unet.{name}"] = p
        for name, p in self.face_projector.named_parameters():
            out[f"vcm.face_projector.{name}"] = p
        for name, p in self.style_encoder.named_parameters():
            out[f"vcm.style_encoder.{name}"] = p
        return out

    def list_blocks(self) -> list:
        return list(self.unet.block_registry)

    def register_hook(self, path: str, observer) -> HookHandle:
        if path not in self.unet.block_registry:
            raise ConfigurationError(f"no attention sublayer registered at {path!r}")
        self._hooks.setdefault(path, []).append(observer)
        return HookHandle(self._hooks, path, observer)

    # Convenience passthroughs used across the package.
    def encode_image(self, img):
        return self.codec.encode_image(img)

    def decode_rgba(self, z):
        return self.codec.decode_rgba(z)

    def decode_rgb(self, z):
        return self.codec.decode_rgb(z)

    def add_noise(self, z0, t, eps):
        return self.schedule.add_noise(z0, t, eps)


def unet_forward(ctx: ModelContext, z_t, t, tokens: TokenSequence,
                 cond: ConditioningBundle | None = None) -> torch.Tensor:
    """Predict the noise for one (batched) latent at timestep t."""
    return ctx.unet(z_t, t, tokens, cond, hooks=ctx._hooks or None)


def list_blocks(ctx: ModelContext) -> list:
    return ctx.list_blocks()


def register_hook(ctx: ModelContext, path: str, observer) -> HookHandle:
    return ctx.register_hook(path, observer)
