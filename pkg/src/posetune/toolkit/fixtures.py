"""Procedural sprite fixtures: deterministic stick-figure people with known
poses, colors, and alpha masks. These stand in for person/pose photo pairs
at desk scale; everything is integer/float arithmetic off seeded numpy RNGs,
so fixtures are identical across processes and platforms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..control import PoseSpec, bresenham, render_pose
from ..errors import ConfigurationError

# Named garment palette; description text references these color names.
PALETTE = (
    ("red", (0.85, 0.10, 0.10)),
    ("blue", (0.15, 0.25, 0.85)),
    ("green", (0.10, 0.65, 0.20)),
    ("yellow", (0.90, 0.85, 0.10)),
    ("purple", (0.55, 0.15, 0.75)),
    ("orange", (0.95, 0.55, 0.10)),
    ("teal", (0.10, 0.65, 0.65)),
    ("pink", (0.95, 0.45, 0.65)),
)

SKIN_TONES = ((0.95, 0.80, 0.65), (0.80, 0.60, 0.45), (0.55, 0.40, 0.30))
HAIR_COLORS = ((0.15, 0.10, 0.05), (0.45, 0.30, 0.10), (0.85, 0.75, 0.30), (0.25, 0.25, 0.25))

# Canonical standing pose in normalized coordinates, COCO-17 order.
_BASE_POSE = np.array([
    [0.50, 0.12, 1], [0.47, 0.10, 1], [0.53, 0.10, 1], [0.44, 0.11, 1], [0.56, 0.11, 1],
    [0.38, 0.28, 1], [0.62, 0.28, 1], [0.30, 0.44, 1], [0.70, 0.44, 1],
    [0.26, 0.60, 1], [0.74, 0.60, 1], [0.42, 0.55, 1], [0.58, 0.55, 1],
    [0.40, 0.74, 1], [0.60, 0.74, 1], [0.38, 0.92, 1], [0.62, 0.92, 1],
])


def make_pose(pose_seed: int) -> PoseSpec:
    """Canonical standing pose with bounded seeded jitter on the limbs."""
    rng = np.random.RandomState(pose_seed)
    kp = _BASE_POSE.copy()
    jitter = rng.uniform(-0.05, 0.05, size=(17, 2))
    jitter[:5] *= 0.3  # keep the head stable
    kp[:, :2] = np.clip(kp[:, :2] + jitter, 0.03, 0.97)
    return PoseSpec(kp)


@dataclass
class SpriteSpec:
    identity_seed: int
    pose: PoseSpec
    size: int = 64


@dataclass
class SpriteIdentity:
    shirt: tuple
    pants: tuple
    skin: tuple
    hair: tuple
    shirt_name: str
    pants_name: str
    has_hat: bool
    hat: tuple


def identity_for(identity_seed: int) -> SpriteIdentity:
    rng = np.random.RandomState(identity_seed)
    shirt_i = rng.randint(len(PALETTE))
    pants_i = (shirt_i + 1 + rng.randint(len(PALETTE) - 1)) % len(PALETTE)
    return SpriteIdentity(
        shirt=PALETTE[shirt_i][1],
        pants=PALETTE[pants_i][1],
        skin=SKIN_TONES[rng.randint(len(SKIN_TONES))],
        hair=HAIR_COLORS[rng.randint(len(HAIR_COLORS))],
        shirt_name=PALETTE[shirt_i][0],
        pants_name=PALETTE[pants_i][0],
        has_hat=bool(rng.randint(2)),
        hat=PALETTE[rng.randint(len(PALETTE))][1],
    )


def _thick_line(canvas, alpha, p0, p1, color, thickness, size):
    half = thickness // 2
    for x, y in bresenham(p0[0], p0[1], p1[0], p1[1]):
        y0, y1 = max(0, y - half), min(size, y + half + 1)
        x0, x1 = max(0, x - half), min(size, x + half + 1)
        canvas[:, y0:y1, x0:x1] = np.asarray(color)[:, None, None]
        alpha[y0:y1, x0:x1] = 1.0


def _rect(canvas, alpha, y0, y1, x0, x1, color, size):
    y0, y1 = max(0, y0), min(size, y1)
    x0, x1 = max(0, x0), min(size, x1)
    if y1 > y0 and x1 > x0:
        canvas[:, y0:y1, x0:x1] = np.asarray(color)[:, None, None]
        alpha[y0:y1, x0:x1] = 1.0


def generate_sprite(spec: SpriteSpec):
    """Render the sprite; returns (RGBA tensor [4,size,size], ground-truth PoseSpec).

    Alpha is exactly the set of drawn body pixels.
    """
    size = spec.size
    ident = identity_for(spec.identity_seed)
    kp = spec.pose.keypoints
    px = np.rint(kp[:, 0] * (size - 1)).astype(int)
    py = np.rint(kp[:, 1] * (size - 1)).astype(int)
    pt = lambda j: (px[j], py[j])

    canvas = np.zeros((3, size, size), dtype=np.float64)
    alpha = np.zeros((size, size), dtype=np.float64)
    thick = max(2, size // 24)

    # legs (pants): hips -> knees -> ankles
    for a, b in ((11, 13), (13, 15), (12, 14), (14, 16)):
        _thick_line(canvas, alpha, pt(a), pt(b), ident.pants, thick, size)
    # arms (skin): shoulders -> elbows -> wrists
    for a, b in ((5, 7), (7, 9), (6, 8), (8, 10)):
        _thick_line(canvas, alpha, pt(a), pt(b), ident.skin, thick, size)
    # torso (shirt): bounding box of shoulders and hips
    ty0 = min(py[5], py[6])
    ty1 = max(py[11], py[12]) + 1
    tx0 = min(px[5], px[11])
    tx1 = max(px[6], px[12]) + 1
    _rect(canvas, alpha, ty0, ty1, tx0, tx1, ident.shirt, size)
    # head (skin) around the nose, hair strip on top
    r = max(2, size // 16)
    _rect(canvas, alpha, py[0] - r, py[0] + r + 1, px[0] - r, px[0] + r + 1, ident.skin, size)
    _rect(canvas, alpha, py[0] - r, py[0] - r + max(1, r // 2), px[0] - r, px[0] + r + 1,
          ident.hair, size)
    if ident.has_hat:
        _rect(canvas, alpha, py[0] - r - 2, py[0] - r, px[0] - r - 1, px[0] + r + 2,
              ident.hat, size)

    rgba = np.concatenate([canvas, alpha[None]], axis=0)
    return torch.from_numpy(rgba), spec.pose


def description_for(identity_seed: int) -> str:
    ident = identity_for(identity_seed)
    hat = " and a hat" if ident.has_hat else ""
    return (f"a sprite person with <face> wearing a {ident.shirt_name} shirt "
            f"and {ident.pants_name} pants{hat}")


@dataclass
class FixturePair:
    pair_id: str
    identity_seed: int
    source: torch.Tensor  # [4, S, S]
    source_pose: PoseSpec
    target: torch.Tensor
    target_pose: PoseSpec
    description: str


def make_fixture_pair(index: int, seed: int = 0, size: int = 64) -> FixturePair:
    """One (source sprite, target sprite) pair sharing an identity."""
    rng = np.random.RandomState(seed * 100003 + index)
    identity_seed = int(rng.randint(0, 2 ** 31 - 1))
    source_pose = make_pose(int(rng.randint(0, 2 ** 31 - 1)))
    target_pose = make_pose(int(rng.randint(0, 2 ** 31 - 1)))
    source, _ = generate_sprite(SpriteSpec(identity_seed, source_pose, size))
    target, _ = generate_sprite(SpriteSpec(identity_seed, target_pose, size))
    return FixturePair(
        pair_id=f"pair_{index:03d}",
        identity_seed=identity_seed,
        source=source,
        source_pose=source_pose,
        target=target,
        target_pose=target_pose,
        description=description_for(identity_seed),
    )


def make_control_dataset(count: int, seed: int = 0, size: int = 64):
    """(pose image, sprite RGBA) pairs for control-branch pretraining."""
    if count < 1:
        raise ConfigurationError("control dataset needs at least one pair")
    pairs = []
    rng = np.random.RandomState(seed)
    for _ in range(count):
        identity_seed = int(rng.randint(0, 2 ** 31 - 1))
        pose = make_pose(int(rng.randint(0, 2 ** 31 - 1)))
        sprite, _ = generate_sprite(SpriteSpec(identity_seed, pose, size))
        pairs.append((render_pose(pose, size), sprite))
    return pairs
