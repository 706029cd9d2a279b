"""Full pose-transfer inference and the control-free refiner.

``transfer`` assembles every mechanism around a deterministic DDIM run:
weight offset, LoRA with its per-block scale map, style injection, face
token replacement, and control residuals from a rendered pose. ``refine``
re-noises the composited result partway and denoises it again without the
control branch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch

from .adapters import AdapterCheckpoint, ScaleMap, WeightOffset, apply_weight_offset, default_scale_map
from .audit import AuditLog
from .backbone.sampler import ddim_sample
from .backbone.unet import ConditioningBundle, ModelContext
from .control import ControlBranch, ControlSource, PoseSpec, render_pose
from .errors import ConfigurationError
from .oneshot import context_from_checkpoint
from .vcm import (
    FaceConditioning,
    IdentityStrategy,
    InjectionConfig,
    TokenSequence,
    embed_description,
    wrap_face_token,
)


@dataclass
class PipelineConfig:
    ddim_steps: int = 20
    scale_map: ScaleMap = field(default_factory=default_scale_map)
    injection: InjectionConfig = field(default_factory=InjectionConfig)
    refine_strength: float = 0.3
    seed: int = 0
    use_control: bool = True
    weight_offset: WeightOffset | None = None
    audit: bool = True

    def __post_init__(self):
        if not 0.0 <= self.refine_strength <= 1.0:
            raise ConfigurationError("refine_strength must lie in [0, 1]")
        if self.ddim_steps < 1:
            raise ConfigurationError("ddim_steps must be >= 1")


@dataclass
class TransferResult:
    image: torch.Tensor  # [4, H, W] RGBA in [0, 1]
    manifest: dict
    audit: AuditLog | None


@dataclass
class RefineResult:
    image: torch.Tensor
    audit: AuditLog | None


def _tokens_for(description, ctx: ModelContext) -> TokenSequence:
    if isinstance(description, TokenSequence):
        return description
    return embed_description(description, ctx.config.d_text, ctx.config.torch_dtype)


def _face_conditioning(ctx, tokens, face, cfg: PipelineConfig,
                       identity_neutral: bool) -> FaceConditioning | None:
    inj = cfg.injection
    if face is None and not identity_neutral:
        return None
    needs_slot = inj.strategy in (IdentityStrategy.VALUE_ONLY, IdentityStrategy.FULL_REPLACEMENT)
    if needs_slot and tokens.face_slot is None:
        raise ConfigurationError(
            f"strategy {inj.strategy.value} needs a <face> token in the description"
        )
    if identity_neutral:
        # No-op identity settings: the wrapped token equals the original slot
        # row and the added-attention term is switched off.
        v_star = tokens.embeddings[tokens.face_slot].clone() if tokens.face_slot is not None \
            else torch.zeros(ctx.config.d_text, dtype=ctx.config.torch_dtype)
        face_tokens = torch.zeros(ctx.config.n_face_tokens, ctx.config.d_text,
                                  dtype=ctx.config.torch_dtype)
        return FaceConditioning(v_star, face_tokens, inj.strategy, lambda_face=0.0)
    face_tokens = ctx.face_projector(torch.as_tensor(face).reshape(-1))
    v_star = wrap_face_token(face_tokens, inj.s)
    return FaceConditioning(v_star, face_tokens, inj.strategy, inj.lambda_face)


def prepare_context(checkpoint: AdapterCheckpoint, cfg: PipelineConfig) -> ModelContext:
    """Rebuild the tuned context and apply the weight offset (w <- w + w')."""
    ctx = context_from_checkpoint(checkpoint)
    if cfg.weight_offset is not None:
        apply_weight_offset(ctx, cfg.weight_offset)
    cfg.scale_map.validate(ctx.unet.block_registry)
    return ctx


def transfer(checkpoint: AdapterCheckpoint, source_fg: torch.Tensor, description,
             pose, face, cfg: PipelineConfig | None = None,
             control: ControlBranch | None = None,
             identity_neutral: bool = False) -> TransferResult:
    """Generate the RGBA foreground for a new pose (deterministic per seed)."""
    cfg = cfg or PipelineConfig()
    started = time.perf_counter()
    ctx = prepare_context(checkpoint, cfg)
    tokens = _tokens_for(description, ctx)
    audit = AuditLog() if cfg.audit else None
    with torch.no_grad():
        face_cond = _face_conditioning(ctx, tokens, face, cfg, identity_neutral)
        style = ctx.style_encoder(source_fg)
        control_src = None
        if cfg.use_control:
            pose_img = render_pose(pose, ctx.config.image_size) if isinstance(pose, PoseSpec) else pose
            branch = control if control is not None else ControlBranch(ctx, seed=ctx.config.seed)
            control_src = ControlSource(branch, pose_img.to(ctx.config.torch_dtype))
        cond = ConditioningBundle(
            style_tokens=style,
            injection=cfg.injection,
            face=face_cond,
            lora_scales=cfg.scale_map,
            control=control_src,
            audit=audit,
        )
        generator = torch.Generator().manual_seed(cfg.seed)
        z_init = torch.randn(
            (1, ctx.config.latent_channels, ctx.config.latent_size, ctx.config.latent_size),
            generator=generator, dtype=ctx.config.torch_dtype,
        )
        z0 = ddim_sample(ctx, z_init, cfg.ddim_steps, tokens, cond)
        image = ctx.codec.decode_rgba(z0)[0]
    manifest = {
        "stage": "transfer",
        "seed": cfg.seed,
        "ddim_steps": cfg.ddim_steps,
        "scale_map": cfg.scale_map.to_dict(),
        "injection": {
            "whitelist": sorted(cfg.injection.whitelist),
            "lambda_style": cfg.injection.lambda_style,
            "s": cfg.injection.s,
            "strategy": cfg.injection.strategy.value,
            "lambda_face": cfg.injection.lambda_face,
        },
        "use_control": cfg.use_control,
        "weight_offset": cfg.weight_offset is not None,
        "model": ctx.config.to_dict(),
        "elapsed_s": time.perf_counter() - started,
        "audit": audit.summary() if audit is not None else None,
    }
    return TransferResult(image=image, manifest=manifest, audit=audit)


def composite(fg: torch.Tensor, bg: torch.Tensor) -> torch.Tensor:
    """Alpha-over: alpha * fg_rgb + (1 - alpha) * bg, per pixel."""
    if fg.shape[0] != 4 or bg.shape[0] != 3 or fg.shape[1:] != bg.shape[1:]:
        raise ConfigurationError(
            f"composite expects fg [4,H,W] and bg [3,H,W], got {tuple(fg.shape)} and {tuple(bg.shape)}"
        )
    alpha = fg[3:4]
    return alpha * fg[:3] + (1.0 - alpha) * bg.to(fg.dtype)


def opaque_rgba(rgb: torch.Tensor) -> torch.Tensor:
    alpha = torch.ones((1,) + tuple(rgb.shape[1:]), dtype=rgb.dtype)
    return torch.cat([rgb, alpha], dim=0)


def refine(composited: torch.Tensor, description, checkpoint: AdapterCheckpoint,
           cfg: PipelineConfig | None = None, face=None) -> RefineResult:
    """Control-free second pass: encode the composited image, re-noise it to
    round(strength * T), and denoise deterministically with the VCM active.

    strength 0 returns the input unchanged.
    """
    cfg = cfg or PipelineConfig()
    if composited.shape[0] == 3:
        composited = opaque_rgba(composited)
    if cfg.refine_strength == 0.0:
        return RefineResult(image=composited, audit=None)
    ctx = prepare_context(checkpoint, cfg)
    t_star = int(round(cfg.refine_strength * ctx.schedule.T))
    if t_star < 1:
        raise ConfigurationError(
            f"refine_strength {cfg.refine_strength} rounds to timestep 0 on T={ctx.schedule.T}"
        )
    steps = min(max(1, round(cfg.ddim_steps * cfg.refine_strength)), t_star)
    tokens = _tokens_for(description, ctx)
    audit = AuditLog() if cfg.audit else None
    with torch.no_grad():
        face_cond = _face_conditioning(ctx, tokens, face, cfg, identity_neutral=False) \
            if face is not None else None
        style = ctx.style_encoder(composited)
        cond = ConditioningBundle(
            style_tokens=style,
            injection=cfg.injection,
            face=face_cond,
            lora_scales=cfg.scale_map,
            control=None,
            audit=audit,
        )
        z = ctx.codec.encode_image(composited.unsqueeze(0))
        generator = torch.Generator().manual_seed(cfg.seed)
        eps = torch.randn(z.shape, generator=generator, dtype=z.dtype)
        z_t = ctx.schedule.add_noise(z, t_star, eps)
        z0 = ddim_sample(ctx, z_t, steps, tokens, cond, t_start=t_star)
        image = ctx.codec.decode_rgba(z0)[0]
    return RefineResult(image=image, audit=audit)
