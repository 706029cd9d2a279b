"""Deterministic DDIM sampler (eta = 0)."""

from __future__ import annotations

import numpy as np
import torch

from ..errors import ConfigurationError
from .unet import ConditioningBundle, ModelContext, unet_forward


def ddim_timesteps(t_start: int, steps: int) -> list:
    """Descending (t, t_prev) pairs on an evenly spaced integer grid from
    t_start down to 0."""
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    if steps > t_start:
        raise ConfigurationError(f"steps={steps} exceeds available timesteps {t_start}")
    grid = np.round(np.linspace(0.0, float(t_start), steps + 1)).astype(int)
    pairs = list(zip(grid[1:][::-1].tolist(), grid[:-1][::-1].tolist()))
    return pairs


def ddim_step(schedule, z, eps_hat, t: int, t_prev: int) -> torch.Tensor:
    abar_t = float(schedule.alphas_bar[t - 1])
    abar_prev = 1.0 if t_prev == 0 else float(schedule.alphas_bar[t_prev - 1])
    z0 = (z - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
    return np.sqrt(abar_prev) * z0 + np.sqrt(1.0 - abar_prev) * eps_hat


def ddim_sample(ctx: ModelContext, z_init: torch.Tensor, steps: int,
                tokens, cond: ConditioningBundle | None = None,
                t_start: int | None = None, eps_fn=None) -> torch.Tensor:
    """Run deterministic DDIM from t_start (default T) down to 0.

    Identical (context, inputs) produce identical outputs; all stochasticity
    lives in the caller-seeded z_init. ``eps_fn`` overrides the noise model
    (used by tests with stub predictors).
    """
    t_start = ctx.schedule.T if t_start is None else t_start
    if t_start > ctx.schedule.T:
        raise ConfigurationError(f"t_start={t_start} exceeds schedule T={ctx.schedule.T}")
    pairs = ddim_timesteps(t_start, steps)
    audit = cond.audit if cond is not None else None
    z = z_init
    for t, t_prev in pairs:
        if audit is not None:
            audit.step = t
        eps_hat = eps_fn(z, t) if eps_fn is not None else unet_forward(ctx, z, t, tokens, cond)
        z = ddim_step(ctx.schedule, z, eps_hat, t, t_prev)
    if audit is not None:
        audit.step = None
    return z
