"""Neck tests: the macro-block x sequential-module grid, pyramid shapes,
identity at initialization, and mask hygiene under padding."""

import math

import pytest
import torch

from minitad.neck import (
    DEFAULT_MODULE,
    MACRO_BLOCKS,
    SEQUENTIAL_MODULES,
    FeaturePyramid,
    GatedBlock,
    LSTMModule,
    Neck,
    NeckConfig,
    SSMModule,
    TransformerBlock,
    expected_level_lengths,
)

torch.manual_seed(0)


def make_inputs(batch=2, length=64, dim=48, valid=None, seed=0):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, length, dim, generator=gen)
    mask = torch.ones(batch, length, dtype=torch.bool)
    if valid is not None:
        for i, v in enumerate(valid):
            mask[i, v:] = False
            x[i, v:] = 0.0
    return x, mask


def randomize(module, seed=1):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.uniform_(-0.2, 0.2, generator=gen)


class TestShapeGrid:
    @pytest.mark.parametrize("macro", [m for m in MACRO_BLOCKS if m != "mix"])
    @pytest.mark.parametrize("module", SEQUENTIAL_MODULES)
    def test_every_combination_builds_and_runs(self, macro, module):
        cfg = NeckConfig(macro_block=macro, sequential_module=module,
                         width=32, depth=2, levels=3, attn_heads=4, graph_k=4)
        neck = Neck(cfg, in_dim=48)
        x, mask = make_inputs(valid=(64, 41))
        pyr = neck(x, mask)
        assert pyr.level_lengths() == expected_level_lengths(64, 3)
        assert pyr.strides == (1, 2, 4)
        for lvl, m in zip(pyr.levels, pyr.masks):
            assert lvl.shape[0] == 2 and lvl.shape[2] == 32
            assert torch.all(lvl[~m] == 0)

    def test_mix_runs(self):
        cfg = NeckConfig(macro_block="mix", width=32, depth=4, levels=2,
                         attn_heads=4)
        neck = Neck(cfg, in_dim=32)
        x, mask = make_inputs(dim=32)
        pyr = neck(x, mask)
        assert pyr.level_lengths() == [64, 32]

    def test_mix_alternates_block_types_and_defaults_to_ssm_lstm(self):
        cfg = NeckConfig(macro_block="mix", width=32, depth=4, levels=1,
                         attn_heads=4)
        blocks = list(Neck(cfg, in_dim=32).stages[0])
        assert isinstance(blocks[0], GatedBlock)
        assert isinstance(blocks[1], TransformerBlock)
        assert isinstance(blocks[2], GatedBlock)
        assert isinstance(blocks[3], TransformerBlock)
        assert isinstance(blocks[0].module, SSMModule)
        assert isinstance(blocks[1].module, LSTMModule)

    def test_valid_lengths_halve_with_ceil(self):
        cfg = NeckConfig(macro_block="conv", width=32, depth=1, levels=4)
        neck = Neck(cfg, in_dim=32)
        x, mask = make_inputs(length=40, dim=32, valid=(40, 11))
        pyr = neck(x, mask)
        sample_valid = [[int(m[i].sum()) for m in pyr.masks] for i in range(2)]
        assert sample_valid[0] == [40, 20, 10, 5]
        assert sample_valid[1] == [11, 6, 3, 2]

    def test_single_level_keeps_input_length(self):
        cfg = NeckConfig(macro_block="gcn", width=32, depth=1, levels=1)
        pyr = Neck(cfg, in_dim=48)(*make_inputs())
        assert pyr.level_lengths() == [64]
        assert pyr.strides == (1,)

    def test_conv_downsample_matches_maxpool_lengths(self):
        for length in (64, 41):
            cfg = NeckConfig(macro_block="conv", width=32, depth=1, levels=3,
                             downsample="conv")
            pyr = Neck(cfg, in_dim=32)(*make_inputs(length=length, dim=32))
            assert pyr.level_lengths() == expected_level_lengths(length, 3)


class TestIdentityAtInit:
    @pytest.mark.parametrize("macro", [m for m in MACRO_BLOCKS if m != "mix"])
    def test_fresh_neck_is_identity_up_to_downsampling(self, macro):
        cfg = NeckConfig(macro_block=macro, width=32, depth=2, levels=3,
                         attn_heads=4)
        neck = Neck(cfg, in_dim=32)  # identity input projection
        x, mask = make_inputs(dim=32, valid=(64, 37))
        pyr = neck(x, mask)
        ref, rmask = x, mask
        for lvl in range(3):
            if lvl > 0:
                neg = torch.full_like(ref, float("-inf"))
                h = torch.where(rmask.unsqueeze(-1), ref, neg)
                pooled = torch.nn.functional.max_pool1d(
                    h.transpose(1, 2), 2, stride=2, ceil_mode=True).transpose(1, 2)
                rmask = torch.nn.functional.max_pool1d(
                    rmask.float().unsqueeze(1), 2, stride=2,
                    ceil_mode=True).squeeze(1) > 0
                ref = torch.where(rmask.unsqueeze(-1), pooled,
                                  torch.zeros_like(pooled))
            torch.testing.assert_close(pyr.levels[lvl], ref, atol=1e-6, rtol=0)
            assert torch.equal(pyr.masks[lvl], rmask)

    def test_mix_is_identity_at_init_too(self):
        cfg = NeckConfig(macro_block="mix", width=32, depth=2, levels=1,
                         attn_heads=4)
        x, mask = make_inputs(dim=32, valid=(64, 50))
        pyr = Neck(cfg, in_dim=32)(x, mask)
        torch.testing.assert_close(pyr.levels[0], x, atol=1e-6, rtol=0)


class TestMaskHygiene:
    @pytest.mark.parametrize("module", SEQUENTIAL_MODULES)
    def test_padding_length_cannot_change_valid_rows(self, module):
        macro = next(m for m, d in DEFAULT_MODULE.items() if d == module) \
            if module in DEFAULT_MODULE.values() else "transformer"
        cfg = NeckConfig(macro_block=macro, sequential_module=module,
                         width=32, depth=2, levels=3, attn_heads=4, graph_k=4)
        neck = Neck(cfg, in_dim=32)
        randomize(neck)  # zero-init projections would make this vacuous
        valid = 41
        base = torch.randn(2, valid, 32, generator=torch.Generator().manual_seed(7))

        outputs = []
        for total in (48, 57):
            x = torch.zeros(2, total, 32)
            x[:, :valid] = base
            mask = torch.zeros(2, total, dtype=torch.bool)
            mask[:, :valid] = True
            outputs.append(neck(x, mask))
        a, b = outputs
        v = valid
        for lvl in range(3):
            torch.testing.assert_close(a.levels[lvl][:, :v],
                                       b.levels[lvl][:, :v],
                                       atol=1e-5, rtol=1e-5)
            v = math.ceil(v / 2)

    def test_masked_rows_are_exactly_zero_after_randomized_weights(self):
        cfg = NeckConfig(macro_block="transformer", width=32, depth=2,
                         levels=2, attn_heads=4)
        neck = Neck(cfg, in_dim=48)
        randomize(neck)
        x, mask = make_inputs(valid=(64, 29))
        pyr = neck(x, mask)
        for lvl, m in zip(pyr.levels, pyr.masks):
            assert torch.all(lvl[~m] == 0)

    def test_gradients_do_not_flow_from_masked_rows(self):
        cfg = NeckConfig(macro_block="conv", width=16, depth=1, levels=2)
        neck = Neck(cfg, in_dim=16)
        randomize(neck)
        x, mask = make_inputs(batch=1, length=16, dim=16, valid=(10,))
        x = x.clone().requires_grad_(True)
        pyr = neck(x, mask)
        loss = sum(lvl.sum() for lvl in pyr.levels)
        loss.backward()
        assert torch.all(x.grad[0, 10:] == 0)


class TestSSM:
    def test_zero_transition_collapses_to_per_position_linear_map(self):
        cfg = NeckConfig(width=16, attn_heads=4)
        ssm = SSMModule(16, cfg, zero_init=False)
        randomize(ssm, seed=3)
        with torch.no_grad():
            ssm.decay.weight.zero_()
            ssm.decay.bias.fill_(-40.0)  # sigmoid -> 0: no state is carried
        x = torch.randn(2, 12, 16, generator=torch.Generator().manual_seed(9))
        mask = torch.ones(2, 12, dtype=torch.bool)
        got = ssm(x, mask)
        # h_t = u_t in both directions, so out = W_o (2 * W_i x + 2 b_i) + b_o
        u = x @ ssm.in_proj.weight.T + ssm.in_proj.bias
        want = 2.0 * u @ ssm.out_proj.weight.T + ssm.out_proj.bias
        torch.testing.assert_close(got, want, atol=1e-5, rtol=1e-5)

    def test_full_memory_transition_ignores_later_inputs_in_causal_half(self):
        cfg = NeckConfig(width=8, attn_heads=4)
        ssm = SSMModule(8, cfg, zero_init=False)
        with torch.no_grad():
            ssm.decay.weight.zero_()
            ssm.decay.bias.fill_(40.0)  # sigmoid -> 1: h stays at h_0 = 0
            ssm.out_proj.weight.copy_(torch.eye(8))
            ssm.out_proj.bias.zero_()
        x = torch.randn(1, 6, 8)
        out = ssm(x, torch.ones(1, 6, dtype=torch.bool))
        assert torch.all(out.abs() < 1e-5)


class TestConfigAndErrors:
    def test_too_short_input_raises_with_minimum(self):
        cfg = NeckConfig(macro_block="conv", width=16, depth=1, levels=5)
        neck = Neck(cfg, in_dim=16)
        assert neck.min_input_length == 16
        x, mask = make_inputs(length=15, dim=16)
        with pytest.raises(ValueError, match="at least 16"):
            neck(x, mask)

    def test_rejects_unknown_names(self):
        with pytest.raises(ValueError, match="macro_block"):
            NeckConfig(macro_block="dense")
        with pytest.raises(ValueError, match="sequential module"):
            NeckConfig(sequential_module="fft")
        with pytest.raises(ValueError, match="downsample"):
            NeckConfig(downsample="avg")

    def test_rejects_module_pair_outside_mix(self):
        with pytest.raises(ValueError, match="mix"):
            NeckConfig(macro_block="conv", sequential_module=("conv", "ssm"))

    def test_rejects_odd_width_and_bad_heads(self):
        with pytest.raises(ValueError, match="even"):
            NeckConfig(width=33)
        with pytest.raises(ValueError, match="heads"):
            NeckConfig(width=32, attn_heads=5)

    def test_parameter_count_is_deterministic(self):
        def count():
            cfg = NeckConfig(macro_block="mamba", width=32, depth=2, levels=3)
            return sum(p.numel() for p in Neck(cfg, in_dim=48).parameters())
        assert count() == count()

    def test_pyramid_container_validates_alignment(self):
        x = torch.zeros(1, 4, 8)
        m = torch.ones(1, 4, dtype=torch.bool)
        with pytest.raises(ValueError, match="align"):
            FeaturePyramid([x], [m, m], (1,))
