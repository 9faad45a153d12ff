import numpy as np
import pytest

import maillab.tensor as T
from maillab.mamba import (MambaBlock, MambaBlockConfig, MambaStack, block_parameter_count,
                           mamba_block_forward, mamba_stack_forward)
from maillab.nn import LayerNorm
from maillab.tensor import grad_check

from conftest import perturb_parameters


@pytest.fixture
def cfg():
    return MambaBlockConfig(model_dim=6, state_dim=4, conv_width=3)


class TestConfig:
    def test_inner_dim(self, cfg):
        assert cfg.inner_dim == 12

    def test_expand_factor_fixed(self):
        with pytest.raises(ValueError):
            MambaBlockConfig(model_dim=4, expand_factor=3)

    @pytest.mark.parametrize("dm,n,w", [(6, 4, 3), (8, 8, 4), (16, 2, 1), (3, 16, 5)])
    def test_closed_form_count(self, rng, dm, n, w):
        c = MambaBlockConfig(dm, n, w)
        enumerated = sum(p.size for p in MambaBlock(c, rng).parameters())
        assert enumerated == block_parameter_count(c)


class TestBlock:
    def test_zero_input_zero_output(self, cfg, rng):
        blk = MambaBlock(cfg, rng)
        perturb_parameters(blk, rng)
        for lin in (blk.in_proj_u, blk.in_proj_g, blk.out_proj):
            lin.bias.data[:] = 0.0
        blk.conv_bias.data[:] = 0.0
        assert not mamba_block_forward(np.zeros((5, 6)), blk).data.any()

    @pytest.mark.parametrize("L", [1, 7, 32])
    def test_shape(self, cfg, rng, L):
        assert mamba_block_forward(rng.normal(size=(L, 6)), MambaBlock(cfg, rng)).shape == (L, 6)

    def test_zero_init_output_projection(self, cfg, rng):
        assert not MambaBlock(cfg, rng)(rng.normal(size=(4, 6))).data.any()

    def test_causality(self, cfg, rng):
        blk = MambaBlock(cfg, rng)
        perturb_parameters(blk, rng)
        x = rng.normal(size=(10, 6))
        y0 = blk(x).data
        x[6] += 1.0
        y1 = blk(x).data
        np.testing.assert_array_equal(y0[:6], y1[:6])

    def test_gradient(self, cfg, rng):
        blk = MambaBlock(cfg, rng)
        perturb_parameters(blk, rng, 0.2)
        w = rng.normal(size=(5, 6))
        assert grad_check(lambda x: (blk(x) * w).sum(), rng.normal(size=(5, 6))) <= 1e-4


class TestStack:
    def test_depth_zero_is_final_norm(self, cfg, rng):
        x = rng.normal(size=(4, 6))
        out = mamba_stack_forward(x, MambaStack(cfg, 0, rng))
        np.testing.assert_array_equal(out.data, LayerNorm(6)(x).data)

    def test_deep_stack_stays_finite(self, cfg, rng):
        stack = MambaStack(cfg, 12, rng)
        perturb_parameters(stack, rng, 0.1)
        out = stack(rng.normal(size=(16, 6))).data
        assert np.all(np.isfinite(out)) and np.abs(out).max() < 1e3

    def test_causality(self, cfg, rng):
        stack = MambaStack(cfg, 3, rng)
        perturb_parameters(stack, rng)
        x = rng.normal(size=(2, 9, 6))
        y0 = stack(x).data
        x[:, 4] += 1.0
        y1 = stack(x).data
        np.testing.assert_array_equal(y0[:, :4], y1[:, :4])

    def test_deterministic(self, cfg, rng):
        stack = MambaStack(cfg, 2, rng)
        perturb_parameters(stack, rng)
        x = rng.normal(size=(5, 6))
        np.testing.assert_array_equal(stack(x).data, stack(x.copy()).data)

    def test_split_run_matches_full(self, cfg, rng):
        stack = MambaStack(cfg, 3, rng)
        perturb_parameters(stack, rng)
        x = rng.normal(size=(5, 6))
        part = stack(stack(x, 0, 1, final_norm=False), 1, None)
        np.testing.assert_array_equal(part.data, stack(x).data)

    @pytest.mark.parametrize("mode", ["sequential", "parallel"])
    def test_gradient_depth3(self, cfg, rng, mode):
        stack = MambaStack(cfg, 3, rng, scan_mode=mode)
        perturb_parameters(stack, rng, 0.2)
        w = rng.normal(size=(4, 6))
        assert grad_check(lambda x: (stack(x) * w).sum(), rng.normal(size=(4, 6))) <= 1e-4
