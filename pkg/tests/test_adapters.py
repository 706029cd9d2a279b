import numpy as np
import pytest
import torch

from posetune.adapters import (
    LORA_PROJECTIONS,
    LoraParam,
    ScaleMap,
    WeightOffset,
    apply_weight_offset,
    attach_lora,
    default_scale_map,
    effective_weight,
    load_checkpoint,
    random_weight_offset,
    remove_weight_offset,
    save_checkpoint,
)
from posetune.backbone import ModelContext, unet_forward
from posetune.errors import ConfigurationError, DimensionError, FormatError
from posetune.oneshot import TuneConfig, tune
from posetune.vcm import embed_description


def forward_once(ctx, cfg, seed=0):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn((1, cfg.latent_channels, cfg.latent_size, cfg.latent_size),
                    generator=g, dtype=torch.float64)
    tokens = embed_description("a sprite person with <face>", cfg.d_text)
    return unet_forward(ctx, z, 33, tokens)


def test_attach_is_transparent_bitwise(mini_ctx, mini_cfg):
    before = [forward_once(mini_ctx, mini_cfg, seed=s) for s in range(10)]
    attach_lora(mini_ctx, rank=32)
    after = [forward_once(mini_ctx, mini_cfg, seed=s) for s in range(10)]
    for b, a in zip(before, after):
        assert torch.equal(b, a)


def test_double_attach_rejected(mini_ctx):
    attach_lora(mini_ctx, rank=4)
    with pytest.raises(ConfigurationError):
        attach_lora(mini_ctx, rank=4)


def test_one_adapter_per_projection_and_count(mini_ctx):
    lora = attach_lora(mini_ctx, rank=32)
    n_blocks = len(mini_ctx.unet.block_registry)
    assert len(lora.entries) == n_blocks * len(LORA_PROJECTIONS)
    # by-hand parameter count: sum r*(d_in + d_out) over the registry
    expected = 0
    for block in mini_ctx.unet.block_registry.values():
        for name in LORA_PROJECTIONS:
            d_out, d_in = getattr(block, name).weight.shape
            expected += 32 * (d_in + d_out)
    assert lora.parameter_count() == expected


def test_lora_init_distribution():
    g = torch.Generator().manual_seed(0)
    p = LoraParam(64, 64, rank=32, generator=g)
    assert torch.count_nonzero(p.B) == 0
    assert p.alpha == 32.0
    assert abs(float(p.A.detach().std()) - 1 / 32) < 0.01


def test_effective_weight_trivial_cases():
    g = torch.Generator().manual_seed(1)
    W = torch.randn(8, 8, generator=g, dtype=torch.float64)
    lora = LoraParam(8, 8, rank=2, generator=g)
    with torch.no_grad():
        lora.B.normal_(0, 1, generator=g)
    assert torch.equal(effective_weight(W, lora, 0.0), W)
    zero = LoraParam(8, 8, rank=2, generator=g)
    assert torch.equal(effective_weight(W, zero, 1.0), W)


def test_effective_weight_hand_case():
    # r=1, alpha=1, A=[[1,0]], B=[[2],[0]] -> delta = [[2,0],[0,0]]
    lora = LoraParam(2, 2, rank=1, alpha=1.0)
    with torch.no_grad():
        lora.A.copy_(torch.tensor([[1.0, 0.0]], dtype=torch.float64))
        lora.B.copy_(torch.tensor([[2.0], [0.0]], dtype=torch.float64))
    W = torch.zeros(2, 2, dtype=torch.float64)
    out = effective_weight(W, lora, 1.0)
    assert torch.equal(out, torch.tensor([[2.0, 0.0], [0.0, 0.0]], dtype=torch.float64))


def test_scale_linearity_exact():
    # integer-valued tensors make the fp arithmetic exact
    lora = LoraParam(4, 4, rank=2, alpha=2.0)
    with torch.no_grad():
        lora.A.copy_(torch.arange(8, dtype=torch.float64).reshape(2, 4))
        lora.B.copy_(torch.arange(8, dtype=torch.float64).reshape(4, 2))
    W = torch.zeros(4, 4, dtype=torch.float64)
    full = effective_weight(W, lora, 1.0) - W
    for s in (0.25, 0.5, 2.0, 4.0):
        assert torch.equal(effective_weight(W, lora, s) - W, s * full)


def test_effective_weight_shape_mismatch():
    lora = LoraParam(4, 4, rank=1)
    with pytest.raises(DimensionError):
        effective_weight(torch.zeros(3, 3, dtype=torch.float64), lora, 1.0)


def test_default_scale_map_values():
    sm = default_scale_map()
    assert sm.lookup("up.blocks.0.attentions.1") == 1.0
    assert sm.lookup("down.blocks.2.attentions.1") == 0.2
    assert sm.lookup("mid.block.attentions.0") == 0.2


def test_uniform_scale_map_equals_full_merge(mini_ctx, mini_cfg):
    attach_lora(mini_ctx, rank=2, seed=3)
    # give B nonzero content so scales matter
    with torch.no_grad():
        for e in mini_ctx.lora.entries:
            e.module.B.normal_(0, 0.05, generator=torch.Generator().manual_seed(7))
    from posetune.backbone import ConditioningBundle
    g = torch.Generator().manual_seed(2)
    z = torch.randn((1, mini_cfg.latent_channels, mini_cfg.latent_size, mini_cfg.latent_size),
                    generator=g, dtype=torch.float64)
    tokens = embed_description("a sprite person", mini_cfg.d_text)
    uniform = unet_forward(mini_ctx, z, 5, tokens,
                           ConditioningBundle(lora_scales=ScaleMap({}, 1.0)))
    implicit = unet_forward(mini_ctx, z, 5, tokens)
    assert torch.equal(uniform, implicit)


def test_scale_map_validation(mini_ctx):
    sm = ScaleMap({"up.blocks.9.attentions.0": 1.0})
    with pytest.raises(ConfigurationError):
        sm.validate(mini_ctx.unet.block_registry)


def test_weight_offset_zero_is_identity(mini_ctx):
    params = mini_ctx.parameter_map()
    snapshot = {k: v.detach().clone() for k, v in params.items()}
    offset = WeightOffset({k: torch.zeros_like(v) for k, v in params.items()})
    apply_weight_offset(mini_ctx, offset)
    for k, v in mini_ctx.parameter_map().items():
        assert torch.equal(v, snapshot[k])


def test_weight_offset_apply_remove_restores(mini_ctx):
    snapshot = {k: v.detach().clone() for k, v in mini_ctx.parameter_map().items()}
    offset = random_weight_offset(mini_ctx, std=1e-2, seed=5)
    apply_weight_offset(mini_ctx, offset)
    remove_weight_offset(mini_ctx, offset)
    for k, v in mini_ctx.parameter_map().items():
        assert float((v.detach() - snapshot[k]).abs().max()) <= 1e-6


def test_weight_offset_double_apply(mini_ctx):
    snapshot = {k: v.detach().clone() for k, v in mini_ctx.parameter_map().items()}
    offset = random_weight_offset(mini_ctx, std=1e-2, seed=6)
    apply_weight_offset(mini_ctx, offset)
    apply_weight_offset(mini_ctx, offset)
    params = mini_ctx.parameter_map()
    assert offset.deltas
    for k, delta in offset.deltas.items():
        expect = snapshot[k] + 2.0 * delta
        assert float((params[k].detach() - expect).abs().max()) <= 1e-6


def test_weight_offset_group_property(mini_cfg):
    from posetune.backbone import ModelContext
    ctx_a = ModelContext.build(mini_cfg)
    ctx_b = ModelContext.build(mini_cfg)
    o1 = random_weight_offset(ctx_a, std=1e-2, seed=7)
    o2 = random_weight_offset(ctx_a, std=1e-2, seed=8)
    apply_weight_offset(ctx_a, o1)
    apply_weight_offset(ctx_a, o2)
    apply_weight_offset(ctx_b, o1 + o2)
    pa, pb = ctx_a.parameter_map(), ctx_b.parameter_map()
    for k in pa:
        assert float((pa[k].detach() - pb[k].detach()).abs().max()) <= 1e-6


def test_weight_offset_unknown_key_no_partial_application(mini_ctx):
    snapshot = {k: v.detach().clone() for k, v in mini_ctx.parameter_map().items()}
    known = next(iter(snapshot))
    offset = WeightOffset({
        known: torch.ones_like(snapshot[known]),
        "not.a.parameter": torch.zeros(1, dtype=torch.float64),
    })
    with pytest.raises(ConfigurationError):
        apply_weight_offset(mini_ctx, offset)
    for k, v in mini_ctx.parameter_map().items():
        assert torch.equal(v, snapshot[k])


def test_weight_offset_shape_mismatch(mini_ctx):
    known = next(iter(mini_ctx.parameter_map()))
    offset = WeightOffset({known: torch.zeros(1, 1, dtype=torch.float64)})
    with pytest.raises(ConfigurationError):
        apply_weight_offset(mini_ctx, offset)


def test_checkpoint_roundtrip_bit_exact(mini_cfg, mini_pair, tmp_path):
    ctx = ModelContext.build(mini_cfg)
    ckpt = tune(ctx, mini_pair.source, mini_pair.description, TuneConfig(rank=2, iterations=2, seed=1))
    path = tmp_path / "adapter.opt1"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert set(loaded.loras) == set(ckpt.loras)
    for name in ckpt.loras:
        assert torch.equal(loaded.loras[name], ckpt.loras[name])
    for name in ckpt.vcm:
        assert torch.equal(loaded.vcm[name], ckpt.vcm[name])
    assert loaded.scale_map.to_dict() == ckpt.scale_map.to_dict()
    assert loaded.meta == ckpt.meta


def test_checkpoint_tampered_magic(mini_checkpoint, tmp_path):
    path = tmp_path / "adapter.opt1"
    save_checkpoint(mini_checkpoint, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_truncated_payload(mini_checkpoint, tmp_path):
    path = tmp_path / "adapter.opt1"
    save_checkpoint(mini_checkpoint, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-16])
    with pytest.raises(FormatError):
        load_checkpoint(path)
