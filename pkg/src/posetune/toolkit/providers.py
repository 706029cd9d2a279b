"""Provider interface for externally supplied inputs: segmentation masks,
face embeddings, and text descriptions. Toy implementations ship for desk
use; real models can substitute behind the same file formats."""

from __future__ import annotations

import json
import math

import numpy as np
import torch

from ..errors import FormatError
from ..pngio import read_mask


def load_mask(path) -> torch.Tensor:
    return read_mask(path)


def apply_mask(rgb: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Segmented RGBA foreground: RGB kept, alpha = mask (background 0)."""
    return torch.cat([rgb.to(torch.float64), mask.to(torch.float64).unsqueeze(0)], dim=0)


def save_face_embedding(vec: torch.Tensor, path) -> None:
    """fp32 little-endian binary, or a JSON array for .json paths."""
    arr = np.asarray(vec.detach().cpu().numpy(), dtype="<f4").reshape(-1)
    path = str(path)
    if path.endswith(".json"):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump([float(x) for x in arr], fh)
    else:
        with open(path, "wb") as fh:
            fh.write(arr.tobytes())


def load_face_embedding(path) -> torch.Tensor:
    path = str(path)
    try:
        if path.endswith(".json"):
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
            arr = np.asarray(data, dtype="<f4")
        else:
            with open(path, "rb") as fh:
                arr = np.frombuffer(fh.read(), dtype="<f4")
    except (json.JSONDecodeError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot parse face embedding {path}: {exc}") from exc
    if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
        raise FormatError(f"face embedding {path} must be a non-empty finite vector")
    return torch.from_numpy(arr.copy())


def _nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = img.shape
    ys = np.minimum((np.arange(out_h) * h) // out_h, h - 1)
    xs = np.minimum((np.arange(out_w) * w) // out_w, w - 1)
    return img[:, ys][:, :, xs]


def toy_face_embed(rgba: torch.Tensor, d_face: int = 64, seed: int = 99) -> torch.Tensor:
    """Deterministic stand-in for a face recognition model.

    Takes the top quarter of the alpha bounding box (the head region),
    resizes it, projects through fixed seeded conv-style features, and
    L2-normalizes. Returns a float32 unit vector.
    """
    arr = rgba.detach().cpu().numpy().astype(np.float64)
    alpha = arr[3]
    ys, xs = np.nonzero(alpha > 0)
    if ys.size == 0:
        face = np.zeros((3, 8, 8))
    else:
        y0, y1 = ys.min(), ys.max() + 1
        x0, x1 = xs.min(), xs.max() + 1
        y_face = y0 + max(1, (y1 - y0) // 4)
        crop = (arr[:3] * alpha[None])[:, y0:y_face, x0:x1]
        face = _nearest_resize(crop, 8, 8)
    rng = np.random.RandomState(seed)
    proj = rng.standard_normal((d_face, face.size)) / math.sqrt(face.size)
    feat = proj @ face.reshape(-1)
    norm = np.linalg.norm(feat)
    if norm > 0:
        feat = feat / norm
    return torch.from_numpy(feat.astype(np.float32))


def load_description(path) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read().strip()
    except UnicodeDecodeError as exc:
        raise FormatError(f"description {path} is not UTF-8 text: {exc}") from exc
    if not text:
        raise FormatError(f"description {path} is empty")
    return text
