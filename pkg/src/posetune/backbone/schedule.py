"""DDPM-style noise schedule with 1-indexed timesteps."""

from __future__ import annotations

import torch


class NoiseSchedule:
    """Linear beta schedule; timestep t runs from 1 to T inclusive.

    ``alphas_bar[t-1]`` is the cumulative product of (1 - beta_s) for s <= t,
    so alphas_bar[0] == 1 - beta_1.
    """

    def __init__(self, T: int = 100, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if T < 1:
            raise ValueError("T must be >= 1")
        self.T = T
        self.betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        self.alphas_bar = torch.cumprod(1.0 - self.betas, dim=0)

    def _alpha_bar(self, t, device, dtype):
        t = torch.as_tensor(t, device=device)
        if torch.any(t < 1) or torch.any(t > self.T):
            raise IndexError(f"timestep {t} outside [1, {self.T}]")
        return self.alphas_bar.to(device=device, dtype=dtype)[t - 1]

    def add_noise(self, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        """Forward diffusion: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.

        ``t`` may be a python int or a [B] tensor of per-sample timesteps.
        """
        if eps.shape != z0.shape:
            raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
        abar = self._alpha_bar(t, z0.device, z0.dtype)
        while abar.dim() < z0.dim():
            abar = abar.unsqueeze(-1)
        return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps
