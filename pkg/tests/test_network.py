import numpy as np
import pytest
import torch

from slicescan.errors import ConfigError, DivisibilityError, ShapeError
from slicescan.network import (
    ModelConfig,
    PatchEmbed,
    PatchExpand,
    PatchMerge,
    S3Block,
    bss_forward,
    build_model,
    depth_to_space,
    desk_config,
    forward,
    init_weights,
    parameter_count,
    s3_block_forward,
    space_to_depth,
    ss2d_forward,
    tiny_config,
    zero_non_residual,
)
from slicescan.scan_geometry import SliceConfig

SEARCH_SPACE = [SliceConfig(2, 2), SliceConfig(2, 4), SliceConfig(4, 2), SliceConfig(4, 4)]
DESK_PARAMS = 442090


def seeded(module, seed=0, dtype=torch.float64):
    return init_weights(module, seed).to(dtype)


class TestPatchEmbed:
    def test_shape_256(self):
        pe = seeded(PatchEmbed(3, 16), dtype=torch.float32)
        assert pe(torch.randn(1, 3, 256, 256)).shape == (1, 16, 64, 64)

    def test_zero_weights(self):
        pe = PatchEmbed(3, 8)
        with torch.no_grad():
            pe.proj.weight.zero_()
            pe.proj.bias.zero_()
        out = pe(torch.randn(2, 3, 8, 8))
        assert torch.all(out == 0)

    def test_single_patch_by_hand(self):
        pe = seeded(PatchEmbed(2, 3), seed=3)
        x = torch.arange(32, dtype=torch.float64).reshape(1, 2, 4, 4) / 10
        w = pe.proj.weight.detach().numpy()
        b = pe.proj.bias.detach().numpy()
        conv = np.array([(w[k] * x[0].numpy()).sum() + b[k] for k in range(3)])
        mu = conv.mean()
        var = ((conv - mu) ** 2).mean()
        expected = (conv - mu) / np.sqrt(var + 1e-5)
        np.testing.assert_allclose(pe(x)[0, :, 0, 0].detach().numpy(), expected, rtol=1e-12)

    def test_indivisible(self):
        with pytest.raises(DivisibilityError):
            PatchEmbed(3, 4)(torch.zeros(1, 3, 6, 8))


class TestS3Block:
    def test_residual_identity(self):
        blk = S3Block(8, 4)
        with torch.no_grad():
            for p in blk.parameters():
                p.zero_()
        x = torch.randn(2, 8, 8, 8)
        assert torch.equal(blk(x, SliceConfig(2, 2)), x)

    @pytest.mark.parametrize("sc", SEARCH_SPACE, ids=str)
    def test_shape_preserved(self, sc):
        blk = seeded(S3Block(8, 4), dtype=torch.float32)
        x = torch.randn(2, 8, 16, 16)
        assert s3_block_forward(x, sc, blk).shape == x.shape

    def test_divisibility_reported(self):
        blk = seeded(S3Block(4, 2))
        with pytest.raises(DivisibilityError, match="6x8"):
            s3_block_forward(torch.zeros(1, 4, 6, 8, dtype=torch.float64), SliceConfig(4, 4), blk)

    def test_global_receptive_field(self):
        blk = seeded(S3Block(4, 4), seed=1)
        H = W = 16
        base = torch.randn(1, 4, H, W, dtype=torch.float64)
        impulse = torch.zeros_like(base)
        impulse[0, :, 5, 9] = 1.0

        def f(alpha):
            return blk(base + alpha * impulse, SliceConfig(2, 4)).sum(1)

        _, jvp = torch.autograd.functional.jvp(f, torch.zeros((), dtype=torch.float64), torch.ones((), dtype=torch.float64))
        assert jvp.shape == (1, H, W)
        assert torch.all(jvp.abs() > 0)

    def test_per_direction_s6(self):
        blk = seeded(S3Block(4, 2, shared_directions=False), dtype=torch.float32)
        assert len(blk.s6) == 4
        assert blk(torch.randn(1, 4, 8, 8), SliceConfig(2, 2)).shape == (1, 4, 8, 8)


class TestBSS:
    def _s6(self, d=4, seed=0):
        blk = seeded(S3Block(d // 2, 4), seed=seed)
        return blk.s6

    def test_identity_branch(self):
        s6s = self._s6()
        with torch.no_grad():
            s6s[0].w_C.zero_()
            s6s[0].b_C.zero_()
            s6s[0].D.fill_(1.0)
        x = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        assert torch.equal(bss_forward(x, SliceConfig(2, 4), s6s), 4 * x)

    def test_zero_input(self):
        out = bss_forward(torch.zeros(1, 4, 8, 8, dtype=torch.float64), SliceConfig(4, 2), self._s6())
        assert torch.all(out == 0)

    def test_ss2d_special_case_bit_identical(self):
        s6s = self._s6(seed=2)
        x = torch.randn(2, 4, 8, 16, dtype=torch.float64)
        assert torch.equal(bss_forward(x, SliceConfig(8, 16), s6s), ss2d_forward(x, s6s))
        x32 = x.float()
        s32 = s6s.float()
        assert torch.equal(bss_forward(x32, SliceConfig(8, 16), s32), ss2d_forward(x32, s32))

    def test_slicing_changes_output(self):
        s6s = self._s6(seed=3)
        x = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        assert not torch.allclose(bss_forward(x, SliceConfig(2, 2), s6s), ss2d_forward(x, s6s))


class TestMergeExpand:
    def test_merge_shape(self):
        pm = seeded(PatchMerge(16), dtype=torch.float32)
        assert pm(torch.randn(2, 16, 64, 64)).shape == (2, 32, 32, 32)

    def test_merge_constant_map(self):
        pm = PatchMerge(2)
        with torch.no_grad():
            pm.norm.weight.fill_(1.0)
            pm.norm.bias.fill_(0.5)
            pm.reduction.weight.fill_(1.0)
        out = pm(torch.full((1, 2, 4, 4), 3.0))
        assert out.shape == (1, 4, 2, 2)
        assert torch.allclose(out, torch.full_like(out, 4.0))

    def test_merge_average_before_norm(self):
        x = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        s2d = space_to_depth(x)
        assert s2d.flatten().tolist() == [1.0, 2.0, 3.0, 4.0]
        assert s2d.mean(1).item() == 2.5

    def test_merge_full_with_averaging_projection(self):
        pm = PatchMerge(1)
        with torch.no_grad():
            pm.norm.weight.fill_(1.0)
            pm.norm.bias.zero_()
            pm.reduction.weight.fill_(0.25)
        out = pm(torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.shape == (1, 2, 1, 1)
        assert torch.allclose(out, torch.zeros_like(out), atol=1e-6)

    def test_merge_odd(self):
        with pytest.raises(ShapeError):
            PatchMerge(2)(torch.zeros(1, 2, 5, 4))

    def test_expand_shape_and_zero(self):
        pe = seeded(PatchExpand(32), dtype=torch.float32)
        assert pe(torch.randn(2, 32, 32, 32)).shape == (2, 16, 64, 64)
        with torch.no_grad():
            pe.expand.weight.zero_()
        assert torch.all(pe(torch.randn(1, 32, 4, 4)) == 0)

    def test_expand_odd(self):
        with pytest.raises(ShapeError):
            PatchExpand(3)

    def test_roundtrip_shape(self):
        pm = seeded(PatchMerge(8), dtype=torch.float32)
        pe = seeded(PatchExpand(16), dtype=torch.float32)
        x = torch.randn(2, 8, 16, 16)
        assert pe(pm(x)).shape == x.shape

    def test_depth_to_space_inverts_space_to_depth(self):
        x = torch.randn(2, 3, 8, 6)
        assert torch.equal(depth_to_space(space_to_depth(x)), x)


class TestForward:
    def test_logits_shape(self):
        cfg = desk_config()
        model = build_model(cfg, seed=0)
        with torch.no_grad():
            out = forward(torch.randn(2, 3, 64, 64), cfg, model)
        assert out.shape == (2, 2, 64, 64)

    def test_zero_weights_zero_logits(self):
        cfg = tiny_config()
        model = build_model(cfg)
        zero_non_residual(model)
        with torch.no_grad():
            assert torch.all(model(torch.randn(1, 3, 32, 32)) == 0)

    def test_deterministic_build_and_forward(self):
        cfg = tiny_config()
        x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            a = build_model(cfg, seed=11)(x)
            b = build_model(cfg, seed=11)(x)
            c = build_model(cfg, seed=12)(x)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_ss2d_equivalence_end_to_end(self):
        cfg = tiny_config(genotype=[SliceConfig(8, 8)] * 8)
        model = build_model(cfg, seed=4)
        x = torch.randn(2, 3, 32, 32)
        with torch.no_grad():
            assert torch.equal(model(x), model(x, scan="ss2d"))

    def test_genotype_changes_output_not_parameters(self):
        cfg = desk_config()
        model = build_model(cfg, seed=1)
        shapes = [p.shape for p in model.parameters()]
        x = torch.randn(1, 3, 64, 64)
        with torch.no_grad():
            a = model(x, genotype=[SliceConfig(2, 2)] * cfg.num_blocks)
            b = model(x, genotype=[SliceConfig(4, 4)] * cfg.num_blocks)
        assert not torch.equal(a, b)
        assert [p.shape for p in model.parameters()] == shapes

    def test_input_shape_error(self):
        cfg = tiny_config()
        model = build_model(cfg)
        with pytest.raises(ShapeError):
            model(torch.zeros(1, 3, 64, 64))
        with pytest.raises(ConfigError):
            model(torch.zeros(1, 3, 32, 32), genotype=[SliceConfig(2, 2)])

    def test_forward_rejects_foreign_config(self):
        model = build_model(tiny_config())
        with pytest.raises(ConfigError):
            forward(torch.zeros(1, 3, 32, 32), tiny_config(num_classes=3), model)


class TestConfig:
    def test_genotype_length_and_order(self):
        cfg = desk_config()
        assert cfg.num_blocks == 9 == len(cfg.genotype)
        stages = cfg.block_stages()
        assert stages[:5] == [("encoder", 0, 0), ("encoder", 1, 1), ("encoder", 2, 2), ("encoder", 2, 2), ("encoder", 3, 3)]
        assert stages[5:] == [("decoder", 0, 3), ("decoder", 1, 2), ("decoder", 2, 1), ("decoder", 3, 0)]

    def test_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(encoder_depths=(1, 1, 1))
        with pytest.raises(DivisibilityError):
            ModelConfig(input_resolution=(48, 64))
        with pytest.raises(ConfigError):
            ModelConfig(genotype=[SliceConfig(2, 2)] * 3)
        with pytest.raises(DivisibilityError, match=r"block 4 \(encoder stage 3, map 3x3\)"):
            ModelConfig(input_resolution=(96, 96))
        with pytest.raises(ConfigError):
            ModelConfig(base_width=6)

    def test_json_roundtrip(self):
        cfg = desk_config(genotype=["2x4"] * 9)
        again = ModelConfig.from_json(cfg.to_json())
        assert again == cfg
        assert again.genotype[0] == SliceConfig(2, 4)
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"bogus": 1})

    def test_parameter_count(self):
        assert parameter_count(desk_config()) == DESK_PARAMS
        assert parameter_count(desk_config()) == sum(p.numel() for p in build_model(desk_config()).parameters())
        # slice choices never change the parameter count
        assert parameter_count(desk_config(genotype=["4x4"] * 9)) == DESK_PARAMS
