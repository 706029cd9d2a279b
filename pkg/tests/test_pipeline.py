import copy
import dataclasses

import pytest
import torch

from posetune.adapters import ScaleMap, WeightOffset, random_weight_offset
from posetune.backbone import ModelContext, ddim_sample
from posetune.control import ControlBranch
from posetune.errors import ConfigurationError
from posetune.oneshot import context_from_checkpoint
from posetune.pipeline import PipelineConfig, composite, opaque_rgba, refine, transfer
from posetune.toolkit.providers import toy_face_embed
from posetune.vcm import IdentityStrategy, InjectionConfig, embed_description


def mini_pipe_cfg(**over):
    inj = over.pop("injection", InjectionConfig())
    return PipelineConfig(ddim_steps=4, injection=inj, seed=0, **over)


def noisy_control(ckpt, seed=17):
    """Control branch with non-zero output projections, so residuals bite."""
    ctx = context_from_checkpoint(ckpt)
    branch = ControlBranch(ctx, seed=0)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for conv in branch.zero_convs:
            conv.weight.normal_(0, 0.05, generator=g)
    return branch


class TestTransfer:
    def test_all_inactive_equals_bare_backbone(self, mini_cfg, mini_pair,
                                               mini_untuned_checkpoint):
        cfg = mini_pipe_cfg(injection=InjectionConfig(lambda_style=0.0, s=0.0))
        result = transfer(mini_untuned_checkpoint, mini_pair.source, mini_pair.description,
                          mini_pair.target_pose, None, cfg)
        # bare backbone: fresh context, seeded noise, no conditioning at all
        ctx = ModelContext.build(mini_cfg)
        tokens = embed_description(mini_pair.description, mini_cfg.d_text)
        g = torch.Generator().manual_seed(cfg.seed)
        z_init = torch.randn((1, mini_cfg.latent_channels, mini_cfg.latent_size,
                              mini_cfg.latent_size), generator=g, dtype=torch.float64)
        with torch.no_grad():
            z0 = ddim_sample(ctx, z_init, cfg.ddim_steps, tokens)
            bare = ctx.codec.decode_rgba(z0)[0]
        assert torch.equal(result.image, bare)

    def test_deterministic_per_seed(self, mini_pair, mini_checkpoint, tmp_path):
        from posetune import pngio
        face = toy_face_embed(mini_pair.source, d_face=16)
        cfg = mini_pipe_cfg()
        for name in ("a.png", "b.png"):
            res = transfer(mini_checkpoint, mini_pair.source, mini_pair.description,
                           mini_pair.target_pose, face, cfg)
            pngio.write_rgba(tmp_path / name, res.image)
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_output_is_valid_rgba(self, mini_pair, mini_checkpoint, mini_cfg):
        res = transfer(mini_checkpoint, mini_pair.source, mini_pair.description,
                       mini_pair.target_pose, None, mini_pipe_cfg())
        img = res.image
        assert tuple(img.shape) == (4, mini_cfg.image_size, mini_cfg.image_size)
        assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0

    def test_missing_face_slot_rejected(self, mini_pair, mini_checkpoint, mini_cfg):
        face = toy_face_embed(mini_pair.source, d_face=16)
        with pytest.raises(ConfigurationError):
            transfer(mini_checkpoint, mini_pair.source, "a sprite person without slot",
                     mini_pair.target_pose, face, mini_pipe_cfg())

    def test_lora_scale_audit(self, mini_pair, mini_checkpoint):
        res = transfer(mini_checkpoint, mini_pair.source, mini_pair.description,
                       mini_pair.target_pose, None, mini_pipe_cfg())
        scales = {}
        for rec in res.audit.events("lora_scale"):
            scales.setdefault(rec["path"], set()).add(rec["scale"])
        assert scales["up.blocks.0.attentions.1"] == {1.0}
        for path, vals in scales.items():
            if path != "up.blocks.0.attentions.1":
                assert vals == {0.2}, path


class TestMechanismIsolation:
    """Disabling one mechanism via config must equal the pipeline built
    without it, with every other mechanism active."""

    @pytest.fixture()
    def setup(self, mini_pair, mini_checkpoint):
        face = toy_face_embed(mini_pair.source, d_face=16)
        offset = random_weight_offset(context_from_checkpoint(mini_checkpoint),
                                      std=5e-3, seed=21)
        control = noisy_control(mini_checkpoint)
        return mini_pair, mini_checkpoint, face, offset, control

    def run(self, pair, ckpt, face, cfg, control):
        res = transfer(ckpt, pair.source, pair.description, pair.target_pose,
                       face, cfg, control=control)
        return res.image

    def test_style_off(self, setup):
        pair, ckpt, face, offset, control = setup
        a = self.run(pair, ckpt, face,
                     mini_pipe_cfg(weight_offset=offset,
                                   injection=InjectionConfig(lambda_style=0.0)), control)
        b = self.run(pair, ckpt, face,
                     mini_pipe_cfg(weight_offset=offset,
                                   injection=InjectionConfig(whitelist=frozenset())), control)
        assert float((a - b).abs().max()) <= 1e-6

    def test_offset_off(self, setup):
        pair, ckpt, face, offset, control = setup
        zero = WeightOffset({k: torch.zeros_like(v) for k, v in offset.deltas.items()})
        a = self.run(pair, ckpt, face, mini_pipe_cfg(weight_offset=None), control)
        b = self.run(pair, ckpt, face, mini_pipe_cfg(weight_offset=zero), control)
        assert float((a - b).abs().max()) <= 1e-6

    def test_lora_off(self, setup):
        pair, ckpt, face, offset, control = setup
        zero_scale = ScaleMap({}, 0.0)
        a = self.run(pair, ckpt, face,
                     mini_pipe_cfg(weight_offset=offset, scale_map=zero_scale), control)
        inert = copy.deepcopy(ckpt)
        for name in inert.loras:
            if name.endswith(":B"):
                inert.loras[name] = torch.zeros_like(inert.loras[name])
        b = self.run(pair, inert, face, mini_pipe_cfg(weight_offset=offset), control)
        assert float((a - b).abs().max()) <= 1e-6

    def test_face_off(self, setup):
        pair, ckpt, face, offset, control = setup
        a = self.run(pair, ckpt, None, mini_pipe_cfg(weight_offset=offset), control)
        b = transfer(ckpt, pair.source, pair.description, pair.target_pose, face,
                     mini_pipe_cfg(weight_offset=offset), control=control,
                     identity_neutral=True).image
        assert float((a - b).abs().max()) <= 1e-6

    def test_control_off(self, setup):
        pair, ckpt, face, offset, control = setup
        a = self.run(pair, ckpt, face,
                     mini_pipe_cfg(weight_offset=offset, use_control=False), None)
        quiet = noisy_control(ckpt)
        with torch.no_grad():
            for conv in quiet.zero_convs:
                conv.weight.zero_()
                conv.bias.zero_()
        b = self.run(pair, ckpt, face, mini_pipe_cfg(weight_offset=offset), quiet)
        assert float((a - b).abs().max()) <= 1e-6


class TestComposite:
    def test_opaque_foreground(self):
        g = torch.Generator().manual_seed(0)
        fg = torch.rand((4, 8, 8), generator=g, dtype=torch.float64)
        bg = torch.rand((3, 8, 8), generator=g, dtype=torch.float64)
        fg[3] = 1.0
        assert torch.equal(composite(fg, bg), fg[:3])

    def test_transparent_foreground(self):
        g = torch.Generator().manual_seed(1)
        fg = torch.rand((4, 8, 8), generator=g, dtype=torch.float64)
        bg = torch.rand((3, 8, 8), generator=g, dtype=torch.float64)
        fg[3] = 0.0
        assert torch.equal(composite(fg, bg), bg)

    def test_half_alpha(self):
        fg = torch.ones((4, 4, 4), dtype=torch.float64)
        fg[3] = 0.5
        bg = torch.zeros((3, 4, 4), dtype=torch.float64)
        out = composite(fg, bg)
        assert torch.equal(out, torch.full((3, 4, 4), 0.5, dtype=torch.float64))

    def test_shape_check(self):
        with pytest.raises(ConfigurationError):
            composite(torch.zeros(3, 4, 4), torch.zeros(3, 4, 4))


class TestRefine:
    def test_zero_strength_is_identity(self, mini_pair, mini_checkpoint):
        comped = opaque_rgba(composite(mini_pair.source, torch.zeros(3, 16, 16,
                                                                     dtype=torch.float64)))
        res = refine(comped, mini_pair.description, mini_checkpoint,
                     mini_pipe_cfg(refine_strength=0.0))
        assert torch.equal(res.image, comped)

    def test_no_control_events_during_refine(self, mini_pair, mini_checkpoint):
        comped = opaque_rgba(composite(mini_pair.source, torch.full((3, 16, 16), 0.3,
                                                                    dtype=torch.float64)))
        res = refine(comped, mini_pair.description, mini_checkpoint,
                     mini_pipe_cfg(refine_strength=0.3))
        assert res.audit is not None
        assert res.audit.events("control_residual") == []
        assert len(res.audit.records) > 0  # other mechanisms did run

    def test_deterministic(self, mini_pair, mini_checkpoint):
        comped = opaque_rgba(composite(mini_pair.source, torch.full((3, 16, 16), 0.6,
                                                                    dtype=torch.float64)))
        a = refine(comped, mini_pair.description, mini_checkpoint,
                   mini_pipe_cfg(refine_strength=0.4))
        b = refine(comped, mini_pair.description, mini_checkpoint,
                   mini_pipe_cfg(refine_strength=0.4))
        assert torch.equal(a.image, b.image)

    def test_strength_rounding_to_zero_rejected(self, mini_pair, mini_checkpoint):
        comped = opaque_rgba(composite(mini_pair.source, torch.zeros(3, 16, 16,
                                                                     dtype=torch.float64)))
        with pytest.raises(ConfigurationError):
            refine(comped, mini_pair.description, mini_checkpoint,
                   mini_pipe_cfg(refine_strength=0.004))

    def test_strength_bounds(self):
        with pytest.raises(ConfigurationError):
            PipelineConfig(refine_strength=1.5)


class TestReplayAndAblation:
    def test_checkpoint_replay_after_save_load(self, mini_pair, mini_checkpoint, tmp_path):
        from posetune.adapters import load_checkpoint, save_checkpoint
        face = toy_face_embed(mini_pair.source, d_face=16)
        before = transfer(mini_checkpoint, mini_pair.source, mini_pair.description,
                          mini_pair.target_pose, face, mini_pipe_cfg()).image
        path = tmp_path / "ck.opt1"
        save_checkpoint(mini_checkpoint, path)
        reloaded = load_checkpoint(path)
        after = transfer(reloaded, mini_pair.source, mini_pair.description,
                         mini_pair.target_pose, face, mini_pipe_cfg()).image
        assert float((before - after).abs().max()) <= 1e-6

    def test_neutral_identity_strategies_coincide(self, mini_pair, mini_checkpoint):
        face = toy_face_embed(mini_pair.source, d_face=16)
        images = []
        for strategy in IdentityStrategy:
            cfg = mini_pipe_cfg(injection=InjectionConfig(strategy=strategy))
            images.append(transfer(mini_checkpoint, mini_pair.source, mini_pair.description,
                                   mini_pair.target_pose, face, cfg,
                                   identity_neutral=True).image)
        assert float((images[0] - images[1]).abs().max()) <= 1e-6
        assert float((images[0] - images[2]).abs().max()) <= 1e-6

    def test_live_strategies_diverge(self, mini_pair, mini_checkpoint):
        face = toy_face_embed(mini_pair.source, d_face=16)
        images = {}
        for strategy in (IdentityStrategy.VALUE_ONLY, IdentityStrategy.FULL_REPLACEMENT):
            cfg = mini_pipe_cfg(injection=InjectionConfig(strategy=strategy))
            images[strategy] = transfer(mini_checkpoint, mini_pair.source,
                                        mini_pair.description, mini_pair.target_pose,
                                        face, cfg).image
        diff = float((images[IdentityStrategy.VALUE_ONLY]
                      - images[IdentityStrategy.FULL_REPLACEMENT]).abs().max())
        assert diff > 0
