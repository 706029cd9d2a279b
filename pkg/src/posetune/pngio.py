"""PNG IO: 8-bit-per-channel files converted to/from [0,1] float tensors."""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image

from .errors import FormatError


def _open(path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except FileNotFoundError:
        raise
    except Exception as exc:  # PIL raises a zoo of decode errors
        raise FormatError(f"cannot read image {path}: {exc}") from exc


def read_rgba(path) -> torch.Tensor:
    arr = _open(path, "RGBA").astype(np.float64) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def read_rgb(path) -> torch.Tensor:
    arr = _open(path, "RGB").astype(np.float64) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def read_mask(path) -> torch.Tensor:
    """Grayscale (or alpha-channel) mask as [H, W] in [0, 1]."""
    with Image.open(path) as im:
        if "A" in im.getbands():
            arr = np.asarray(im.convert("RGBA"))[:, :, 3]
        else:
            arr = np.asarray(im.convert("L"))
    return torch.from_numpy(arr.astype(np.float64) / 255.0)


def _to_uint8(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_rgba(path, img: torch.Tensor) -> None:
    if img.dim() != 3 or img.shape[0] != 4:
        raise FormatError(f"expected [4,H,W] RGBA tensor, got {tuple(img.shape)}")
    Image.fromarray(_to_uint8(img).transpose(1, 2, 0), mode="RGBA").save(path)


def write_rgb(path, img: torch.Tensor) -> None:
    if img.dim() != 3 or img.shape[0] != 3:
        raise FormatError(f"expected [3,H,W] RGB tensor, got {tuple(img.shape)}")
    Image.fromarray(_to_uint8(img).transpose(1, 2, 0), mode="RGB").save(path)


def write_mask(path, mask: torch.Tensor) -> None:
    Image.fromarray(_to_uint8(mask), mode="L").save(path)
