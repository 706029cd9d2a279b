"""Invertible RGBA <-> latent codec.

The codec is a fixed linear bijection: space-to-depth rearrangement followed
by an orthogonal mixing of the latent channels. Because the mix is orthogonal
the inverse is its transpose, so encode/decode round-trips are exact up to
floating point and the L2 norm is preserved.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import DimensionError

# Seed of the orthogonal channel-mixing matrix. Fixed forever: latents and
# checkpoints are only meaningful relative to this basis.
_MIX_SEED = 7141


def _orthogonal_mix(channels: int) -> torch.Tensor:
    rng = np.random.RandomState(_MIX_SEED)
    gauss = rng.standard_normal((channels, channels))
    q, r = np.linalg.qr(gauss)
    # Fix the sign convention so Q is unique regardless of the QR backend.
    q = q * np.sign(np.diag(r))
    return torch.from_numpy(np.ascontiguousarray(q))  # float64


class LatentCodec:
    """Exact invertible codec between [B,4,H,W] RGBA images and latents.

    With space-to-depth factor ``f`` the latent is [B, 4*f*f, H/f, W/f];
    the default f=4 on 64x64 images gives [B, 64, 16, 16].
    """

    def __init__(self, image_size: int = 64, factor: int = 4, dtype: torch.dtype = torch.float64):
        if image_size % (4 if factor == 4 else factor) != 0 or image_size % 4 != 0:
            raise DimensionError(f"image size {image_size} must be divisible by 4")
        if image_size % factor != 0:
            raise DimensionError(f"image size {image_size} not divisible by factor {factor}")
        self.image_size = image_size
        self.factor = factor
        self.latent_channels = 4 * factor * factor
        self.latent_size = image_size // factor
        self.dtype = dtype
        self._mix = _orthogonal_mix(self.latent_channels)  # float64 [C, C]

    def _check_image(self, img: torch.Tensor) -> None:
        if img.dim() != 4 or img.shape[1] != 4 or img.shape[2] != self.image_size or img.shape[3] != self.image_size:
            raise DimensionError(
                f"expected image [B,4,{self.image_size},{self.image_size}], got {tuple(img.shape)}"
            )

    def _check_latent(self, z: torch.Tensor) -> None:
        expect = (self.latent_channels, self.latent_size, self.latent_size)
        if z.dim() != 4 or tuple(z.shape[1:]) != expect:
            raise DimensionError(f"expected latent [B,{expect[0]},{expect[1]},{expect[2]}], got {tuple(z.shape)}")

    def encode_image(self, img: torch.Tensor) -> torch.Tensor:
        """Deterministic linear encode: space-to-depth then orthogonal channel mix."""
        self._check_image(img)
        x = F.pixel_unshuffle(img.to(torch.float64), self.factor)
        z = torch.einsum("dc,bchw->bdhw", self._mix, x)
        return z.to(self.dtype)

    def decode_rgba(self, z: torch.Tensor) -> torch.Tensor:
        """Full inverse of encode_image, clamped to [0,1] at the image boundary."""
        self._check_latent(z)
        x = torch.einsum("cd,bchw->bdhw", self._mix, z.to(torch.float64))
        img = F.pixel_shuffle(x, self.factor)
        return img.clamp(0.0, 1.0).to(self.dtype)

    def decode_rgb(self, z: torch.Tensor) -> torch.Tensor:
        """RGB channels of decode_rgba (alpha dropped)."""
        return self.decode_rgba(z)[:, :3]
