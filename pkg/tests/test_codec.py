import numpy as np
import pytest
import torch

from posetune.backbone import LatentCodec
from posetune.backbone.codec import _orthogonal_mix
from posetune.errors import DimensionError
from posetune.toolkit.fixtures import SpriteSpec, generate_sprite, make_pose


def seeded_images(n, size=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((n, 4, size, size), generator=g, dtype=torch.float64)


def test_zero_image_gives_zero_latent():
    codec = LatentCodec()
    z = codec.encode_image(torch.zeros(1, 4, 64, 64, dtype=torch.float64))
    assert torch.count_nonzero(z) == 0
    assert tuple(z.shape) == (1, 64, 16, 16)


def test_roundtrip_on_seeded_images():
    codec = LatentCodec()
    x = seeded_images(10)
    back = codec.decode_rgba(codec.encode_image(x))
    assert float((back - x).abs().max()) <= 1e-6


def test_mixing_matrix_is_orthogonal():
    # independent oracle: multiply the matrix against its transpose directly
    q = _orthogonal_mix(64).numpy()
    err = np.abs(q @ q.T - np.eye(64)).max()
    assert err <= 1e-12


def test_norm_preservation():
    codec = LatentCodec()
    x = seeded_images(5, seed=3)
    z = codec.encode_image(x)
    nx = torch.linalg.vector_norm(x)
    nz = torch.linalg.vector_norm(z)
    assert abs(float(nx - nz)) / float(nx) <= 1e-6


def test_decode_rgb_matches_rgba_channels():
    codec = LatentCodec()
    g = torch.Generator().manual_seed(7)
    z = torch.randn((3, 64, 16, 16), generator=g, dtype=torch.float64) * 0.1
    rgba = codec.decode_rgba(z)
    rgb = codec.decode_rgb(z)
    assert torch.equal(rgb, rgba[:, :3])


def test_decode_rgb_inverts_rgb_channels():
    codec = LatentCodec()
    x = seeded_images(4, seed=11)
    rgb = codec.decode_rgb(codec.encode_image(x))
    assert float((rgb - x[:, :3]).abs().max()) <= 1e-6


def test_zero_latent_gives_zero_rgb():
    codec = LatentCodec()
    rgb = codec.decode_rgb(torch.zeros(1, 64, 16, 16, dtype=torch.float64))
    assert torch.count_nonzero(rgb) == 0


def test_opaque_alpha_preserved():
    codec = LatentCodec()
    x = seeded_images(2, seed=5)
    x[:, 3] = 1.0
    back = codec.decode_rgba(codec.encode_image(x))
    assert float((back[:, 3] - 1.0).abs().max()) <= 1e-6


def test_sprite_alpha_mask_roundtrip():
    # fixture generator is the oracle for the expected alpha mask
    sprite, _ = generate_sprite(SpriteSpec(identity_seed=42, pose=make_pose(1)))
    codec = LatentCodec()
    back = codec.decode_rgba(codec.encode_image(sprite.unsqueeze(0)))[0]
    assert float((back[3] - sprite[3]).abs().max()) <= 1e-6


def test_codec_bijectivity_invariant():
    codec = LatentCodec()
    x = seeded_images(100, seed=2024)
    back = codec.decode_rgba(codec.encode_image(x))
    assert float((back - x).abs().max()) <= 1e-6


def test_factor_two_variant_roundtrip():
    codec = LatentCodec(image_size=16, factor=2)
    g = torch.Generator().manual_seed(13)
    x = torch.rand((6, 4, 16, 16), generator=g, dtype=torch.float64)
    z = codec.encode_image(x)
    assert tuple(z.shape) == (6, 16, 8, 8)
    assert float((codec.decode_rgba(z) - x).abs().max()) <= 1e-6


def test_shape_errors():
    codec = LatentCodec()
    with pytest.raises(DimensionError):
        codec.encode_image(torch.zeros(1, 3, 64, 64, dtype=torch.float64))
    with pytest.raises(DimensionError):
        codec.encode_image(torch.zeros(1, 4, 32, 64, dtype=torch.float64))
    with pytest.raises(DimensionError):
        codec.decode_rgba(torch.zeros(1, 63, 16, 16, dtype=torch.float64))
