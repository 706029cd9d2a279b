"""Pose conditioning: deterministic skeleton rendering from COCO-17 keypoints
and a zero-initialized control branch that feeds additive residuals into the
UNet skip connections and mid block."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone.unet import ConditioningBundle, ControlResiduals, ModelContext, sinusoidal_embedding
from .errors import ConfigurationError, DimensionError
from .torchinit import init_conv
from .vcm import TokenSequence, embed_description

# COCO-17 keypoint order: nose, eyes, ears, shoulders, elbows, wrists, hips,
# knees, ankles (left before right).
N_KEYPOINTS = 17

COCO_EDGES = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12),
    (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
    (1, 3), (2, 4), (3, 5), (4, 6),
)

# One fixed color per skeleton edge, [0,1] RGB.
EDGE_COLORS = (
    (1.00, 0.00, 0.00), (1.00, 0.33, 0.00), (1.00, 0.66, 0.00), (1.00, 1.00, 0.00),
    (0.66, 1.00, 0.00), (0.33, 1.00, 0.00), (0.00, 1.00, 0.00), (0.00, 1.00, 0.33),
    (0.00, 1.00, 0.66), (0.00, 1.00, 1.00), (0.00, 0.66, 1.00), (0.00, 0.33, 1.00),
    (0.00, 0.00, 1.00), (0.33, 0.00, 1.00), (0.66, 0.00, 1.00), (1.00, 0.00, 1.00),
    (1.00, 0.00, 0.66), (1.00, 0.00, 0.33), (0.66, 0.66, 0.66),
)

JOINT_COLOR = (1.0, 1.0, 1.0)


@dataclass
class PoseSpec:
    """17 keypoints as (x, y, visibility) in normalized [0,1] coordinates."""

    keypoints: np.ndarray  # [17, 3] float

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64)
        if kp.shape != (N_KEYPOINTS, 3):
            raise DimensionError(f"keypoints must be [{N_KEYPOINTS}, 3], got {kp.shape}")
        vis = kp[:, 2]
        if not np.all(np.isin(vis, (0.0, 1.0))):
            raise ConfigurationError("keypoint visibility must be 0 or 1")
        visible = kp[vis == 1.0]
        if visible.size and (visible[:, :2].min() < 0.0 or visible[:, :2].max() > 1.0):
            raise ConfigurationError("visible keypoint coordinates must lie in [0, 1]")
        self.keypoints = kp

    def to_json(self) -> str:
        return json.dumps({"keypoints": self.keypoints.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "PoseSpec":
        data = json.loads(text)
        return cls(np.asarray(data["keypoints"], dtype=np.float64))

    @classmethod
    def load(cls, path) -> "PoseSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list:
    """Integer line rasterization; returns the (x, y) pixels inclusive."""
    points = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        points.append((x, y))
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy
    return points


def render_pose(pose: PoseSpec, size: int = 64) -> torch.Tensor:
    """Rasterize the skeleton: Bresenham segments per COCO edge (fixed color
    per edge) plus 3x3 joint squares. Pure function of the PoseSpec."""
    canvas = np.zeros((3, size, size), dtype=np.float64)
    kp = pose.keypoints
    px = np.rint(kp[:, 0] * (size - 1)).astype(int)
    py = np.rint(kp[:, 1] * (size - 1)).astype(int)
    vis = kp[:, 2] > 0.5
    for (a, b), color in zip(COCO_EDGES, EDGE_COLORS):
        if vis[a] and vis[b]:
            for x, y in bresenham(px[a], py[a], px[b], py[b]):
                canvas[:, y, x] = color
    for j in range(N_KEYPOINTS):
        if vis[j]:
            y0, y1 = max(0, py[j] - 1), min(size, py[j] + 2)
            x0, x1 = max(0, px[j] - 1), min(size, px[j] + 2)
            canvas[:, y0:y1, x0:x1] = np.asarray(JOINT_COLOR)[:, None, None]
    return torch.from_numpy(canvas)


class PoseEmbedding(nn.Module):
    """Strided convs bringing the pose image down to the latent resolution."""

    def __init__(self, cfg, generator, dtype):
        super().__init__()
        layers = []
        c_in, width, spatial = 3, 16, cfg.image_size
        while spatial > cfg.latent_size:
            layers.append(nn.Conv2d(c_in, width, 3, stride=2, padding=1, dtype=dtype))
            layers.append(nn.SiLU())
            c_in, width, spatial = width, width * 2, spatial // 2
        layers.append(nn.Conv2d(c_in, cfg.channels[0], 1, dtype=dtype))
        self.net = nn.Sequential(*layers)
        for layer in self.net:
            if isinstance(layer, nn.Conv2d):
                init_conv(layer, generator)

    def forward(self, pose_img):
        return self.net(pose_img)


class ControlBranch(nn.Module):
    """Encoder copy of the UNet down path with zero-conv residual outputs.

    Parameters are initialized by copying the backbone encoder; the 1x1
    output projections start at zero so a fresh branch is an exact no-op.
    """

    def __init__(self, ctx: ModelContext, seed: int = 0):
        super().__init__()
        cfg = ctx.config
        dtype = cfg.torch_dtype
        self.cfg = cfg
        generator = torch.Generator().manual_seed(seed)
        self.conv_in = copy.deepcopy(ctx.unet.conv_in)
        self.time_mlp = copy.deepcopy(ctx.unet.time_mlp)
        self.down_blocks = copy.deepcopy(ctx.unet.down_blocks)
        self.mid_block = copy.deepcopy(ctx.unet.mid_block)
        self.pose_embed = PoseEmbedding(cfg, generator, dtype)
        c0, c1, c2 = cfg.channels
        self.zero_convs = nn.ModuleList(
            [nn.Conv2d(c, c, 1, dtype=dtype) for c in (c0, c1, c2, c2)]
        )
        for conv in self.zero_convs:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, pose_img, z_t, t, tokens: TokenSequence) -> ControlResiduals:
        dtype = self.conv_in.weight.dtype
        pose_img = pose_img.to(dtype)
        if pose_img.dim() == 3:
            pose_img = pose_img.unsqueeze(0)
        B = z_t.shape[0]
        if pose_img.shape[0] == 1 and B > 1:
            pose_img = pose_img.expand(B, -1, -1, -1)
        if pose_img.shape[2] != self.cfg.image_size or pose_img.shape[3] != self.cfg.image_size:
            raise DimensionError(f"pose image must be [3,{self.cfg.image_size},{self.cfg.image_size}]")
        t_tensor = torch.as_tensor(t, dtype=dtype).reshape(-1)
        if t_tensor.numel() == 1:
            t_tensor = t_tensor.expand(B)
        temb = self.time_mlp(sinusoidal_embedding(t_tensor, self.cfg.time_dim))

        h = self.conv_in(z_t.to(dtype)) + self.pose_embed(pose_img)
        feats = []
        for blk in self.down_blocks:
            h = blk.res(h, temb)
            for attn in blk.attentions:
                h = attn(h, tokens, None, None)
            feats.append(h)
            if blk.down is not None:
                h = blk.down(h)
        h = self.mid_block.res1(h, temb)
        for attn in self.mid_block.attentions:
            h = attn(h, tokens, None, None)
        h = self.mid_block.res2(h, temb)

        down = tuple(zc(f) for zc, f in zip(self.zero_convs[:3], feats))
        mid = self.zero_convs[3](h)
        return ControlResiduals(down=down, mid=mid)


@dataclass
class ControlSource:
    """Pairs a control branch with one pose image; the sampler evaluates it
    once per denoising step."""

    branch: ControlBranch
    pose_image: torch.Tensor

    def compute(self, z_t, t, tokens) -> ControlResiduals:
        return self.branch(self.pose_image, z_t, t, tokens)


def control_forward(branch: ControlBranch, pose_img, z_t, t, tokens) -> ControlResiduals:
    return branch(pose_img, z_t, t, tokens)


PRETRAIN_PROMPT = "a sprite person"


def pretrain_control(ctx: ModelContext, branch: ControlBranch, dataset,
                     steps: int, lr: float, batch_size: int = 8, seed: int = 0):
    """Train the control branch on (pose image, RGBA image) pairs with the
    standard noise-prediction loss; the backbone stays frozen.

    Returns the per-step loss curve. steps=0 leaves the branch untouched.
    """
    if not dataset:
        raise ConfigurationError("control pretraining needs a non-empty dataset")
    tokens = embed_description(PRETRAIN_PROMPT, ctx.config.d_text, ctx.config.torch_dtype)
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(branch.parameters(), lr=lr)
    poses = torch.stack([torch.as_tensor(p) for p, _ in dataset])
    images = torch.stack([torch.as_tensor(img) for _, img in dataset])
    z0_all = ctx.codec.encode_image(images)
    losses = []
    for _ in range(steps):
        idx = torch.randint(0, len(dataset), (batch_size,), generator=generator)
        t = torch.randint(1, ctx.schedule.T + 1, (batch_size,), generator=generator)
        z0 = z0_all[idx]
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        z_t = ctx.schedule.add_noise(z0, t, eps)
        cond = ConditioningBundle(control=ControlSource(branch, poses[idx]))
        eps_hat = ctx.unet(z_t, t, tokens, cond)
        loss = F.mse_loss(eps_hat, eps)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    return losses


def save_control(branch: ControlBranch, path) -> None:
    torch.save(branch.state_dict(), path)


def load_control(ctx: ModelContext, path, seed: int = 0) -> ControlBranch:
    branch = ControlBranch(ctx, seed=seed)
    branch.load_state_dict(torch.load(path, weights_only=True))
    return branch
