"""One-shot test-time tuning: reconstruct the segmented source foreground
from noise, updating only the LoRA adapters and the trainable VCM portion.

Pose conditioning and the face embedding play no part here; the tuning loss
sees only the source image (as reconstruction target and as style tokens)
and the text description.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .adapters import AdapterCheckpoint, attach_lora, default_scale_map
from .backbone.unet import ConditioningBundle, ModelConfig, ModelContext
from .errors import ConfigurationError, NumericError, PreconditionError
from .vcm import DEFAULT_WHITELIST, InjectionConfig, TokenSequence, embed_description


@dataclass
class TuneConfig:
    rank: int = 32
    iterations: int = 60
    batch_size: int = 2
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    train_face_modules: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.rank < 1:
            raise ConfigurationError("rank must be >= 1")

    def to_dict(self) -> dict:
        return {
            "rank": self.rank, "iterations": self.iterations, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "beta1": self.beta1, "beta2": self.beta2,
            "seed": self.seed, "train_face_modules": self.train_face_modules,
        }


def style_projection_tensors(ctx: ModelContext, paths=None) -> "OrderedDict[str, torch.Tensor]":
    """Dedicated style K'/V' projection weights keyed by block path."""
    out = OrderedDict()
    for path, block in ctx.unet.block_registry.items():
        if paths is not None and path not in paths:
            continue
        out[f"style:{path}:to_k"] = block.style_to_k.weight
        out[f"style:{path}:to_v"] = block.style_to_v.weight
    return out


def build_trainable_set(ctx: ModelContext, whitelist=DEFAULT_WHITELIST,
                        train_face_modules: bool = False) -> "OrderedDict[str, torch.Tensor]":
    """Named parameters updated during one-shot tuning: all LoRA A/B tensors,
    the style encoder, and the style projections of the whitelisted blocks.
    Base UNet weights, codec, control branch, and the face projector stay
    frozen (the face projector joins only with train_face_modules)."""
    if ctx.lora is None:
        raise PreconditionError("attach LoRA before building the trainable set")
    out = OrderedDict()
    for name, tensor in ctx.lora.named_tensors().items():
        out[f"lora:{name}"] = tensor
    for name, p in ctx.style_encoder.named_parameters():
        out[f"vcm.style_encoder.{name}"] = p
    out.update(style_projection_tensors(ctx, paths=frozenset(whitelist)))
    if train_face_modules:
        for name, p in ctx.face_projector.named_parameters():
            out[f"vcm.face_projector.{name}"] = p
    return out


def reconstruction_loss(ctx: ModelContext, source_fg: torch.Tensor, tokens: TokenSequence,
                        t, eps: torch.Tensor, injection: InjectionConfig) -> torch.Tensor:
    """Noise-prediction MSE for one batch: the quantity minimized by tune()."""
    if source_fg.dim() == 3:
        source_fg = source_fg.unsqueeze(0)
    z0 = ctx.codec.encode_image(source_fg)
    batch = eps.shape[0]
    z0 = z0.expand(batch, -1, -1, -1)
    z_t = ctx.schedule.add_noise(z0, t, eps)
    style = ctx.style_encoder(source_fg)
    cond = ConditioningBundle(style_tokens=style, injection=injection)
    eps_hat = ctx.unet(z_t, t, tokens, cond)
    return F.mse_loss(eps_hat, eps)


def _checkpoint_from_context(ctx: ModelContext, cfg: TuneConfig, losses,
                             injection: InjectionConfig) -> AdapterCheckpoint:
    loras = {name: t.detach().clone() for name, t in ctx.lora.named_tensors().items()}
    vcm = {}
    for name, p in ctx.style_encoder.named_parameters():
        vcm[f"style_encoder.{name}"] = p.detach().clone()
    for name, p in ctx.face_projector.named_parameters():
        vcm[f"face_projector.{name}"] = p.detach().clone()
    for name, t in style_projection_tensors(ctx).items():
        vcm[name] = t.detach().clone()
    meta = {
        "model": ctx.config.to_dict(),
        "tune": cfg.to_dict(),
        "rank": ctx.lora.rank,
        "alpha": ctx.lora.entries[0].module.alpha if ctx.lora.entries else float(ctx.lora.rank),
        "whitelist": sorted(injection.whitelist),
        "lambda_style": injection.lambda_style,
        "loss_curve": [float(x) for x in losses],
        "seed": cfg.seed,
    }
    return AdapterCheckpoint(loras=loras, vcm=vcm, scale_map=default_scale_map(), meta=meta)


def tune(ctx: ModelContext, source_fg: torch.Tensor, description,
         cfg: TuneConfig | None = None, injection: InjectionConfig | None = None) -> AdapterCheckpoint:
    """Run the one-shot tuning loop and return an adapter checkpoint.

    Each step samples a uniform timestep and gaussian noise, noises the
    encoded source foreground, and takes one Adam step on the prediction MSE
    over the trainable set only.
    """
    cfg = cfg or TuneConfig()
    injection = injection or InjectionConfig()
    tokens = embed_description(description, ctx.config.d_text, ctx.config.torch_dtype) \
        if isinstance(description, str) else description
    if ctx.lora is None:
        attach_lora(ctx, rank=cfg.rank, seed=cfg.seed)
    trainable = build_trainable_set(ctx, injection.whitelist, cfg.train_face_modules)
    optimizer = torch.optim.Adam(trainable.values(), lr=cfg.learning_rate,
                                 betas=(cfg.beta1, cfg.beta2))
    generator = torch.Generator().manual_seed(cfg.seed)
    if source_fg.dim() == 3:
        source_fg = source_fg.unsqueeze(0)
    latent_shape = (cfg.batch_size, ctx.config.latent_channels,
                    ctx.config.latent_size, ctx.config.latent_size)
    losses = []
    for step in range(cfg.iterations):
        t = torch.randint(1, ctx.schedule.T + 1, (cfg.batch_size,), generator=generator)
        eps = torch.randn(latent_shape, generator=generator, dtype=ctx.config.torch_dtype)
        loss = reconstruction_loss(ctx, source_fg, tokens, t, eps, injection)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite tuning loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    return _checkpoint_from_context(ctx, cfg, losses, injection)


def restore_checkpoint(ctx: ModelContext, ckpt: AdapterCheckpoint) -> None:
    """Load checkpoint tensors into a freshly built context (attaches LoRA)."""
    if ctx.lora is None:
        attach_lora(ctx, rank=int(ckpt.meta["rank"]), alpha=float(ckpt.meta["alpha"]))
    lora_tensors = ctx.lora.named_tensors()
    with torch.no_grad():
        for name, tensor in ckpt.loras.items():
            if name not in lora_tensors:
                raise ConfigurationError(f"checkpoint LoRA record {name!r} has no target")
            lora_tensors[name].copy_(tensor)
        targets = {}
        for name, p in ctx.style_encoder.named_parameters():
            targets[f"style_encoder.{name}"] = p
        for name, p in ctx.face_projector.named_parameters():
            targets[f"face_projector.{name}"] = p
        targets.update(style_projection_tensors(ctx))
        for name, tensor in ckpt.vcm.items():
            if name not in targets:
                raise ConfigurationError(f"checkpoint VCM record {name!r} has no target")
            targets[name].copy_(tensor)


def context_from_checkpoint(ckpt: AdapterCheckpoint) -> ModelContext:
    """Rebuild the tuned model deterministically from checkpoint metadata."""
    ctx = ModelContext.build(ModelConfig.from_dict(ckpt.meta["model"]))
    restore_checkpoint(ctx, ckpt)
    return ctx


def eval_reconstruction(ctx: ModelContext, checkpoint: AdapterCheckpoint | None,
                        source_fg: torch.Tensor, description,
                        heldout_timesteps=(10, 30, 50, 70, 90),
                        fixed_eps_seed: int = 0,
                        injection: InjectionConfig | None = None) -> float:
    """Mean noise-prediction loss on a fixed probe set of timesteps with
    seeded noise; comparable across tuned/untuned checkpoints. Never mutates
    the given context (evaluation runs on a rebuilt copy)."""
    injection = injection or InjectionConfig()
    eval_ctx = ModelContext.build(ctx.config)
    if checkpoint is not None:
        restore_checkpoint(eval_ctx, checkpoint)
    tokens = embed_description(description, eval_ctx.config.d_text, eval_ctx.config.torch_dtype) \
        if isinstance(description, str) else description
    if source_fg.dim() == 3:
        source_fg = source_fg.unsqueeze(0)
    generator = torch.Generator().manual_seed(fixed_eps_seed)
    latent_shape = (1, eval_ctx.config.latent_channels,
                    eval_ctx.config.latent_size, eval_ctx.config.latent_size)
    total = 0.0
    with torch.no_grad():
        for t in heldout_timesteps:
            eps = torch.randn(latent_shape, generator=generator, dtype=eval_ctx.config.torch_dtype)
            total += float(reconstruction_loss(eval_ctx, source_fg, tokens, int(t), eps, injection))
    return total / len(heldout_timesteps)
