import numpy as np
import pytest
import torch

from hifidiff.denoiser import (
    CondResBlock,
    DenoiserConfig,
    HiFiDiff,
    cond_residual_block,
    eps_theta,
    eps_theta_ablated,
)
from hifidiff.errors import ConfigurationError, DimensionError
from hifidiff.schedule import make_linear_schedule
from hifidiff.trainer import Batch, compute_loss

from conftest import finite_difference_check, small_model

D64 = torch.float64


def inputs(B=1, H=16, W=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    x_t, lo, up = (torch.randn(B, 1, H, W, generator=g, dtype=D64) for _ in range(3))
    return x_t, lo, up


@pytest.fixture
def block():
    torch.manual_seed(0)
    return CondResBlock(8, 8, 128, 6, groups=4).double()


class TestCondResBlock:
    def test_shape_preserved(self, block):
        h = torch.randn(2, 8, 8, 8, dtype=D64)
        out = cond_residual_block(h, torch.randn(2, 128, dtype=D64), torch.randn(2, 6, 8, 8, dtype=D64), block)
        assert out.shape == h.shape

    def test_zero_lateral_removes_cond_dependence(self, block):
        with torch.no_grad():
            block.lateral.weight.zero_()
            block.lateral.bias.zero_()
        h = torch.randn(1, 8, 8, 8, dtype=D64)
        emb = torch.randn(1, 128, dtype=D64)
        a = block(h, emb, torch.randn(1, 6, 8, 8, dtype=D64))
        b = block(h, emb, torch.randn(1, 6, 8, 8, dtype=D64))
        assert torch.equal(a, b)

    def test_cond_gradient_nonzero(self, block):
        h = torch.randn(1, 8, 8, 8, dtype=D64)
        emb = torch.randn(1, 128, dtype=D64)
        cond = torch.randn(1, 6, 8, 8, dtype=D64)
        step = 1e-6
        probes = []
        for idx in [(0, 0, 3, 3), (0, 5, 0, 7), (0, 2, 6, 1)]:
            up, down = cond.clone(), cond.clone()
            up[idx] += step
            down[idx] -= step
            probes.append((block(h, emb, up).sum() - block(h, emb, down).sum()).item() / (2 * step))
        assert max(abs(p) for p in probes) > 1e-6

    def test_level_mismatch(self, block):
        with pytest.raises(DimensionError):
            block(torch.randn(1, 8, 8, 8, dtype=D64), torch.randn(1, 128, dtype=D64), torch.randn(1, 6, 4, 4, dtype=D64))


class TestEpsTheta:
    def test_shape_32(self):
        model = small_model()
        x_t, lo, up = inputs(H=32, W=32)
        pyr = model.hife(lo, up, 0.5)
        assert eps_theta(x_t, 10, pyr, model).shape == x_t.shape

    @pytest.mark.parametrize("H,W", [(8, 8), (16, 24), (40, 8)])
    def test_shape_preserved_any_valid_size(self, H, W):
        model = small_model()
        x_t, lo, up = inputs(B=2, H=H, W=W)
        assert model(x_t, torch.tensor([3, 40]), lo, up, torch.tensor([0.25, 0.5], dtype=D64)).shape == x_t.shape

    def test_deterministic(self):
        model = small_model()
        x_t, lo, up = inputs()
        pyr = model.hife(lo, up, 0.5)
        assert torch.equal(eps_theta(x_t, 7, pyr, model), eps_theta(x_t, 7, pyr, model))

    def test_zero_initialised_head(self):
        model = HiFiDiff(DenoiserConfig(levels=2, channel_mults=(1, 2), base_channels=8, groups=4, T=50))
        x_t, lo, up = inputs()
        out = model(x_t.float(), 5, lo.float(), up.float(), 0.5)
        assert torch.count_nonzero(out) == 0

    def test_skip_gain_passes_image_mean(self):
        # with a zero head the output is exactly gain(t) * x_t, DC included
        model = HiFiDiff(DenoiserConfig(levels=2, channel_mults=(1, 2), base_channels=8, groups=4, T=50)).double()
        with torch.no_grad():
            model.skip_gain.bias.fill_(0.75)
        x_t, lo, up = inputs(B=2)
        x_t = x_t + 3.0
        with torch.no_grad():
            out = model(x_t, 5, lo, up, 0.5)
        assert torch.allclose(out, 0.75 * x_t, atol=1e-12)
        assert abs(float(out.mean()) - 0.75 * float(x_t.mean())) < 1e-12

    def test_pyramid_level_mismatch(self):
        model = small_model()
        x_t, lo, up = inputs()
        pyr = model.hife(lo, up, 0.5)
        with pytest.raises(DimensionError):
            eps_theta(x_t, 3, pyr[:1], model)

    def test_rejects_multichannel_input(self):
        model = small_model()
        _, lo, up = inputs()
        with pytest.raises(DimensionError):
            eps_theta(torch.randn(1, 2, 16, 16, dtype=D64), 3, model.hife(lo, up, 0.5), model)

    def test_loss_gradient_finite_differences(self, rng):
        model = small_model()
        sched = make_linear_schedule(50, 1e-4, 0.02)
        x0, lo, up = inputs(seed=3)
        batch = Batch(lo, up, torch.tensor([0.5], dtype=D64), x0)
        t = torch.tensor([17])
        eps = torch.randn(1, 1, 16, 16, dtype=D64, generator=torch.Generator().manual_seed(9))
        params = list(model.parameters())
        err = finite_difference_check(lambda: compute_loss(model, batch, t, eps, sched), params, 20, rng)
        assert err <= 1e-4


class TestAblation:
    def test_shape_and_determinism(self):
        model = small_model(ablation=True)
        x_t, lo, up = inputs()
        a = eps_theta_ablated(x_t, 4, lo, up, 0.5, model)
        assert a.shape == x_t.shape
        assert torch.equal(a, eps_theta_ablated(x_t, 4, lo, up, 0.5, model))

    def test_differs_from_full(self):
        full, abl = small_model(seed=5), small_model(ablation=True, seed=5)
        x_t, lo, up = inputs()
        assert not torch.allclose(full(x_t, 4, lo, up, 0.5), abl(x_t, 4, lo, up, 0.5))

    def test_no_hife_parameters(self):
        model = small_model(ablation=True)
        assert not any(n.startswith("hife.") for n, _ in model.named_parameters())
        assert model.main.enc[0].lateral.in_channels == 2
        assert model.main.enc[0].affine.in_features == 256

    def test_offset_still_conditions(self):
        model = small_model(ablation=True)
        x_t, lo, up = inputs()
        assert not torch.equal(model(x_t, 4, lo, up, 0.2), model(x_t, 4, lo, up, 0.8))

    def test_mode_guards(self):
        x_t, lo, up = inputs()
        with pytest.raises(ConfigurationError):
            eps_theta_ablated(x_t, 4, lo, up, 0.5, small_model())
        with pytest.raises(ConfigurationError):
            eps_theta(x_t, 4, [], small_model(ablation=True))

    def test_config_hash_distinguishes_modes(self):
        assert DenoiserConfig().hash() != DenoiserConfig(ablation=True).hash()
        assert DenoiserConfig().hash() == DenoiserConfig().hash()


@pytest.mark.parametrize("ablation", [False, True])
def test_every_parameter_receives_gradient(ablation):
    model = small_model(ablation=ablation)
    sched = make_linear_schedule(50, 1e-4, 0.02)
    seen = {n: False for n, _ in model.named_parameters()}
    g = torch.Generator().manual_seed(0)
    for trial in range(3):
        x0, lo, up = inputs(B=2, seed=trial)
        batch = Batch(lo, up, torch.tensor([0.25, 0.75], dtype=D64), x0)
        t = torch.randint(1, 51, (2,), generator=g)
        eps = torch.randn(x0.shape, generator=g, dtype=D64)
        model.zero_grad()
        compute_loss(model, batch, t, eps, sched).backward()
        for n, p in model.named_parameters():
            if p.grad is not None and p.grad.abs().max() > 0:
                seen[n] = True
    dead = [n for n, ok in seen.items() if not ok]
    assert not dead


def test_hife_parameters_receive_gradient():
    model = small_model()
    sched = make_linear_schedule(50, 1e-4, 0.02)
    x0, lo, up = inputs()
    batch = Batch(lo, up, torch.tensor([0.5], dtype=D64), x0)
    loss = compute_loss(model, batch, torch.tensor([20]), torch.randn_like(x0), sched)
    grads = torch.autograd.grad(loss, list(model.hife.parameters()))
    assert sum(float(g.abs().sum()) for g in grads) > 0


def test_config_validation():
    with pytest.raises(ConfigurationError):
        DenoiserConfig(levels=1, channel_mults=(1,))
    with pytest.raises(ConfigurationError):
        DenoiserConfig(levels=3, channel_mults=(1, 2))
