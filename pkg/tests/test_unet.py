import pytest
import torch

from posetune.backbone import (
    ConditioningBundle,
    ControlResiduals,
    ModelConfig,
    ModelContext,
    list_blocks,
    register_hook,
    unet_forward,
)
from posetune.errors import ConfigurationError, DimensionError
from posetune.adapters import ScaleMap
from posetune.oneshot import reconstruction_loss
from posetune.vcm import InjectionConfig, embed_description

REQUIRED_PATHS = [
    "down.blocks.1.attentions.0", "down.blocks.1.attentions.1",
    "down.blocks.2.attentions.0", "down.blocks.2.attentions.1",
    "mid.block.attentions.0", "mid.block.attentions.1",
    "up.blocks.0.attentions.0", "up.blocks.0.attentions.1",
    "up.blocks.1.attentions.0", "up.blocks.1.attentions.1",
]


def mini_inputs(cfg, batch=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn((batch, cfg.latent_channels, cfg.latent_size, cfg.latent_size),
                    generator=g, dtype=torch.float64)
    tokens = embed_description("a sprite person with <face> in a red shirt", cfg.d_text)
    return z, tokens


def test_registry_contains_required_paths(mini_ctx):
    blocks = list_blocks(mini_ctx)
    assert blocks == REQUIRED_PATHS
    assert "up.blocks.0.attentions.1" in blocks


def test_forward_shape_and_determinism(mini_ctx, mini_cfg):
    z, tokens = mini_inputs(mini_cfg)
    e1 = unet_forward(mini_ctx, z, 50, tokens)
    e2 = unet_forward(mini_ctx, z, 50, tokens)
    assert e1.shape == z.shape
    assert torch.equal(e1, e2)


def test_zeroed_output_projection_baseline(mini_cfg):
    ctx = ModelContext.build(mini_cfg)
    with torch.no_grad():
        ctx.unet.conv_out.weight.zero_()
        ctx.unet.conv_out.bias.zero_()
    z, tokens = mini_inputs(mini_cfg, seed=4)
    e1 = unet_forward(ctx, z, 10, tokens, ConditioningBundle())
    e2 = unet_forward(ctx, z, 10, tokens, ConditioningBundle())
    assert torch.equal(e1, e2)
    assert torch.count_nonzero(e1) == 0


def test_zero_control_residuals_match_no_control(mini_ctx, mini_cfg):
    z, tokens = mini_inputs(mini_cfg, seed=1)
    base = unet_forward(mini_ctx, z, 30, tokens)
    c0, c1, c2 = mini_cfg.channels
    s = mini_cfg.latent_size
    zeros = ControlResiduals(
        down=(torch.zeros(2, c0, s, s, dtype=torch.float64),
              torch.zeros(2, c1, s // 2, s // 2, dtype=torch.float64),
              torch.zeros(2, c2, s // 4, s // 4, dtype=torch.float64)),
        mid=torch.zeros(2, c2, s // 4, s // 4, dtype=torch.float64),
    )
    with_zeros = unet_forward(mini_ctx, z, 30, tokens, ConditioningBundle(control=zeros))
    assert torch.equal(base, with_zeros)


def test_control_residual_shape_check(mini_ctx, mini_cfg):
    z, tokens = mini_inputs(mini_cfg, seed=2)
    bad = ControlResiduals(
        down=(torch.zeros(2, 1, 1, 1, dtype=torch.float64),) * 3,
        mid=torch.zeros(2, 1, 1, 1, dtype=torch.float64),
    )
    with pytest.raises(DimensionError):
        unet_forward(mini_ctx, z, 30, tokens, ConditioningBundle(control=bad))


def test_unknown_block_path_in_cond(mini_ctx, mini_cfg):
    z, tokens = mini_inputs(mini_cfg, seed=3)
    with pytest.raises(ConfigurationError):
        unet_forward(mini_ctx, z, 10, tokens,
                     ConditioningBundle(lora_scales=ScaleMap({"down.blocks.0.attentions.0": 1.0})))
    with pytest.raises(ConfigurationError):
        unet_forward(mini_ctx, z, 10, tokens,
                     ConditioningBundle(style_tokens=torch.zeros(4, mini_cfg.d_text),
                                        injection=InjectionConfig(whitelist={"nope"})))


def test_hooks_fire_in_topological_order(mini_ctx, mini_cfg):
    z, tokens = mini_inputs(mini_cfg, seed=5)
    log1, log2 = [], []
    handles = [register_hook(mini_ctx, p, lambda path, ev, log=log1: log.append(path))
               for p in REQUIRED_PATHS]
    unet_forward(mini_ctx, z, 20, tokens)
    for h in handles:
        h.remove()
    for p in REQUIRED_PATHS:
        register_hook(mini_ctx, p, lambda path, ev, log=log2: log.append(path))
    unet_forward(mini_ctx, z, 20, tokens)
    assert log1 == REQUIRED_PATHS
    assert log1 == log2


def test_hook_observer_receives_events_once_per_pass(mini_ctx, mini_cfg):
    z, tokens = mini_inputs(mini_cfg, seed=6)
    calls = []
    register_hook(mini_ctx, "mid.block.attentions.0", lambda path, ev: calls.append((path, ev)))
    unet_forward(mini_ctx, z, 20, tokens)
    unet_forward(mini_ctx, z, 20, tokens)
    assert len(calls) == 2
    assert calls[0][0] == "mid.block.attentions.0"
    assert calls[0][1] == []  # no mechanisms active


def test_hook_on_attention_free_path_errors(mini_ctx):
    with pytest.raises(ConfigurationError):
        register_hook(mini_ctx, "down.blocks.0.attentions.0", lambda p, e: None)
    with pytest.raises(ConfigurationError):
        register_hook(mini_ctx, "up.blocks.2.attentions.0", lambda p, e: None)


def test_hook_handle_remove(mini_ctx, mini_cfg):
    z, tokens = mini_inputs(mini_cfg, seed=7)
    calls = []
    handle = register_hook(mini_ctx, "up.blocks.0.attentions.1", lambda p, e: calls.append(p))
    unet_forward(mini_ctx, z, 20, tokens)
    handle.remove()
    unet_forward(mini_ctx, z, 20, tokens)
    assert len(calls) == 1


def central_difference(fn, param, h=1e-3):
    grad = torch.zeros_like(param)
    flat = param.detach().reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        with torch.no_grad():
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def test_gradient_matches_finite_differences_on_chosen_parameters(mini_cfg, mini_pair):
    # backbone invariant: analytic gradient of the noise-prediction MSE
    # matches fp64 central differences for arbitrarily chosen parameters
    ctx = ModelContext.build(mini_cfg)
    tokens = embed_description(mini_pair.description, mini_cfg.d_text)
    g = torch.Generator().manual_seed(0)
    eps = torch.randn((1, mini_cfg.latent_channels, mini_cfg.latent_size, mini_cfg.latent_size),
                      generator=g, dtype=torch.float64)
    injection = InjectionConfig()

    def loss_value():
        return float(reconstruction_loss(ctx, mini_pair.source, tokens, 40, eps, injection).detach())

    chosen = {
        "time_bias": ctx.unet.time_mlp[0].bias,
        "attn_q": ctx.unet.block_registry["up.blocks.0.attentions.1"].to_q.weight,
        "out_norm": ctx.unet.out_norm.weight,
    }
    for p in chosen.values():
        p.grad = None
    loss = reconstruction_loss(ctx, mini_pair.source, tokens, 40, eps, injection)
    loss.backward()
    for name, p in chosen.items():
        numeric = central_difference(loss_value, p)
        analytic = p.grad
        rel = float(torch.linalg.vector_norm(analytic - numeric)
                    / torch.linalg.vector_norm(numeric))
        assert rel <= 1e-6, f"{name}: relative gradient error {rel}"
