"""Image quality metrics: PSNR, uniform-window SSIM, and cosine similarity
over pluggable feature extractors.

The perceptual and self-supervised-feature columns of the eval reports both
reduce to ``feature_similarity``; the shipped "toy-randproj" extractor is a
fixed seeded strided convolution stack, and real backends can be registered
through the same interface.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from ..errors import ConfigurationError, DimensionError

PSNR_CAP_DB = 100.0


def _to_array(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    return np.asarray(img, dtype=np.float64)


def psnr(a, b) -> float:
    """10 * log10(1 / MSE) for [0,1] images; identical images hit the 100 dB cap."""
    a, b = _to_array(a), _to_array(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _grayscale(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return img.mean(axis=0)
    if img.ndim == 2:
        return img
    raise DimensionError(f"expected [C,H,W] or [H,W], got {img.shape}")


def ssim(a, b, window: int = 8, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """Mean local SSIM over all valid windows; uniform window, channel-mean
    grayscale conversion, biased (1/N) moments."""
    ga, gb = _grayscale(_to_array(a)), _grayscale(_to_array(b))
    if ga.shape != gb.shape:
        raise DimensionError(f"ssim shapes differ: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < window:
        raise ConfigurationError(f"image {ga.shape} smaller than the {window}x{window} window")
    wa = np.lib.stride_tricks.sliding_window_view(ga, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(gb, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = (wa ** 2).mean(axis=(-1, -2)) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=(-1, -2)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def _conv2d_strided(x: np.ndarray, weight: np.ndarray, stride: int = 2) -> np.ndarray:
    # x: [C, H, W], weight: [O, C, k, k]
    k = weight.shape[-1]
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # [C, H', W', k, k]
    return np.einsum("cHWkl,ockl->oHW", windows, weight)


class _RandProjExtractor:
    """Two fixed seeded stride-2 convolutions, bias-free; deterministic
    across processes because the weights come from a seeded numpy RNG."""

    def __init__(self, seed: int = 2024, widths=(8, 16)):
        self.seed = seed
        self.widths = widths
        self._weights: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _weights_for(self, channels: int):
        if channels not in self._weights:
            rng = np.random.RandomState(self.seed + channels)
            w1 = rng.standard_normal((self.widths[0], channels, 3, 3)) / math.sqrt(channels * 9)
            w2 = rng.standard_normal((self.widths[1], self.widths[0], 3, 3)) / math.sqrt(self.widths[0] * 9)
            self._weights[channels] = (w1, w2)
        return self._weights[channels]

    def __call__(self, img) -> np.ndarray:
        x = _to_array(img)
        if x.ndim == 2:
            x = x[None]
        w1, w2 = self._weights_for(x.shape[0])
        h = _conv2d_strided(x, w1)
        h = _conv2d_strided(h, w2)
        return h.reshape(-1)


_EXTRACTORS: dict = {"toy-randproj": _RandProjExtractor()}


def register_extractor(name: str, fn) -> None:
    _EXTRACTORS[name] = fn


def get_extractor(name: str):
    if name not in _EXTRACTORS:
        raise ConfigurationError(f"unknown feature extractor {name!r}; registered: {sorted(_EXTRACTORS)}")
    return _EXTRACTORS[name]


def feature_similarity(a, b, extractor: str = "toy-randproj") -> float:
    """Cosine similarity of flattened extractor features, in [-1, 1]."""
    fn = get_extractor(extractor) if isinstance(extractor, str) else extractor
    fa = np.asarray(fn(a), dtype=np.float64).reshape(-1)
    fb = np.asarray(fn(b), dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(fa, fb) / (na * nb), -1.0, 1.0))


def pair_metrics(a, b, extractor: str = "toy-randproj") -> dict:
    """All report columns for one (generated, target) pair."""
    cos = feature_similarity(a, b, extractor)
    return {
        "psnr": psnr(a, b),
        "ssim": ssim(a, b),
        "perceptual": 1.0 - cos,
        "feature_cos": cos,
    }
