import math
from collections import Counter

import numpy as np
import pytest
import torch
import torch.nn as nn

from hifidiff.data import Volume, make_phantom_volume, normalize_volume
from hifidiff.denoiser import DenoiserConfig
from hifidiff.errors import CheckpointError, DataError, NumericalFault
from hifidiff.schedule import make_linear_schedule
from hifidiff.trainer import (
    Batch,
    SlicePairSample,
    TrainConfig,
    TrainState,
    adam_step,
    clip_gradients,
    compute_loss,
    draw_noise,
    load_checkpoint,
    loss_simple,
    sample_training_tuple,
    save_checkpoint,
    train_loop,
)

from conftest import SMALL, finite_difference_check, small_model

MODEL = DenoiserConfig(**SMALL)
D64 = torch.float64


def phantom(seed=0, D=9, H=16, W=16):
    return normalize_volume(make_phantom_volume(seed, D, H, W))


def quick_config(**kw):
    base = dict(iterations=6, T=50, log_every=2, ckpt_every=0, seed=3)
    return TrainConfig(**{**base, **kw})


class TestTupleSampling:
    def test_ratio_two_forces_half(self):
        rng = np.random.default_rng(0)
        vol = phantom()
        assert {sample_training_tuple(vol, (2,), rng).k for _ in range(50)} == {0.5}

    def test_ratio_four_offsets(self):
        rng = np.random.default_rng(0)
        vol = phantom()
        ks = {sample_training_tuple(vol, (4,), rng).k for _ in range(200)}
        assert ks == {j / 4 for j in range(1, 4)}

    def test_ratio_frequencies(self):
        # identify R from the slices: the target equals vol[i + j], lower = vol[i]
        rng = np.random.default_rng(7)
        D = 9
        vox = np.arange(D, dtype=np.float32)[:, None, None] * np.ones((1, 4, 4), np.float32)
        vol = Volume(vox, range_tag="normalized")
        counts = Counter()
        for _ in range(10_000):
            s = sample_training_tuple(vol, (2, 3, 4), rng)
            counts[int(s.upper[0, 0] - s.lower[0, 0])] += 1
        for R in (2, 3, 4):
            assert abs(counts[R] / 10_000 - 1 / 3) <= 0.02

    def test_target_between_bounds(self):
        rng = np.random.default_rng(1)
        vox = np.arange(9, dtype=np.float32)[:, None, None] * np.ones((1, 2, 2), np.float32)
        vol = Volume(vox, range_tag="normalized")
        for _ in range(100):
            s = sample_training_tuple(vol, (2, 3, 4), rng)
            lo, up, tgt = s.lower[0, 0], s.upper[0, 0], s.target[0, 0]
            assert lo < tgt < up
            assert s.k == pytest.approx((tgt - lo) / (up - lo))

    def test_volume_too_thin(self):
        thin = Volume(np.zeros((4, 8, 8), np.float32), range_tag="normalized")
        with pytest.raises(DataError):
            sample_training_tuple(thin, (2, 3, 4), np.random.default_rng(0))

    def test_sample_validation(self):
        z = np.zeros((4, 4), np.float32)
        with pytest.raises(DataError):
            SlicePairSample(z, z, 1.0, z)
        with pytest.raises(DataError):
            SlicePairSample(z, np.zeros((4, 5), np.float32), 0.5, z)


class _Oracle(nn.Module):
    """Stands in for the network: returns the injected noise, or zero."""

    def __init__(self, x0, sched, perfect=True):
        super().__init__()
        self.x0, self.sched, self.perfect = x0, sched, perfect

    def forward(self, x_t, t, lower, upper, k):
        if not self.perfect:
            return torch.zeros_like(x_t)
        ab = self.sched.coef("alpha_bars", t, x_t)
        return (x_t - ab.sqrt() * self.x0) / (1 - ab).sqrt()


class TestLoss:
    def test_perfect_predictor_zero_loss(self):
        sched = make_linear_schedule(50)
        x0 = torch.randn(2, 1, 8, 8, dtype=D64)
        batch = Batch(x0, x0, torch.tensor([0.5, 0.5], dtype=D64), x0)
        t, eps = draw_noise(batch, sched, torch.Generator().manual_seed(0))
        assert compute_loss(_Oracle(x0, sched), batch, t, eps, sched).item() == pytest.approx(0.0, abs=1e-20)

    def test_zero_predictor_unit_loss(self):
        sched = make_linear_schedule(50)
        x0 = torch.randn(1, 1, 2, 2, dtype=D64)
        batch = Batch(x0, x0, torch.tensor([0.5], dtype=D64), x0)
        g = torch.Generator().manual_seed(1)
        model = _Oracle(x0, sched, perfect=False)
        losses = [compute_loss(model, batch, *draw_noise(batch, sched, g), sched).item() for _ in range(1000)]
        assert abs(np.mean(losses) - 1.0) <= 0.1

    def test_loss_simple_gradient(self, rng):
        model = small_model()
        state = TrainState(model, quick_config())
        sched = make_linear_schedule(50)
        g = torch.Generator().manual_seed(4)
        lo, up, x0 = (torch.randn(1, 1, 16, 16, dtype=D64, generator=g) for _ in range(3))
        batch = Batch(lo, up, torch.tensor([0.25], dtype=D64), x0)
        t, eps = draw_noise(batch, sched, torch.Generator().manual_seed(5))
        # loss_simple draws from the same stream, so it must see the same (t, eps)
        value, grads = loss_simple(batch, state, sched, torch.Generator().manual_seed(5))
        assert value == pytest.approx(compute_loss(model, batch, t, eps, sched).item(), rel=1e-12)
        params = list(model.parameters())
        err = finite_difference_check(lambda: compute_loss(model, batch, t, eps, sched), params, 20, rng)
        assert err <= 1e-4
        names = [n for n, _ in model.named_parameters()]
        ref = torch.autograd.grad(compute_loss(model, batch, t, eps, sched), params)
        for n, r in zip(names, ref):
            assert torch.allclose(grads[n], r, rtol=0, atol=1e-14)

    def test_non_finite_loss_raises(self):
        model = small_model()
        state = TrainState(model, quick_config())
        x0 = torch.full((1, 1, 16, 16), float("nan"), dtype=D64)
        batch = Batch(x0, x0, torch.tensor([0.5], dtype=D64), x0)
        with pytest.raises(NumericalFault, match="step 1"):
            loss_simple(batch, state, make_linear_schedule(50), torch.Generator().manual_seed(0))


class _Scalar(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(value, dtype=D64))


def _scalar_state(value=0.5):
    state = TrainState(_Scalar(value), TrainConfig())
    state.reset_moments()
    return state


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        model = small_model()
        state = TrainState(model, TrainConfig())
        state.reset_moments()
        before = {n: p.clone() for n, p in model.named_parameters()}
        adam_step(state, {n: torch.zeros_like(p) for n, p in model.named_parameters()}, 1e-4)
        assert state.step == 1
        for n, p in model.named_parameters():
            assert torch.equal(p, before[n])

    def test_scalar_recurrence(self):
        state = _scalar_state(0.5)
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        grads_seq = [1.0, -0.3, 2.5, 0.0, 0.7]
        w, m, v = 0.5, 0.0, 0.0
        for n, g in enumerate(grads_seq, start=1):
            adam_step(state, {"w": torch.tensor(g, dtype=D64)}, lr)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1**n)) / (math.sqrt(v / (1 - b2**n)) + eps)
            assert abs(state.model.w.item() - w) <= 1e-12
            if n == 1:
                assert abs(0.5 - w) == pytest.approx(lr, rel=1e-6)

    def test_clip_global_norm(self):
        grads = {"a": torch.tensor([3.0, 0.0], dtype=D64), "b": torch.tensor([4.0], dtype=D64)}
        total = clip_gradients(grads, 1.0)
        assert total == pytest.approx(5.0)
        norm = math.sqrt(sum(float(g.pow(2).sum()) for g in grads.values()))
        assert norm == pytest.approx(1.0, abs=1e-6)
        small = {"a": torch.tensor([0.3], dtype=D64)}
        clip_gradients(small, 1.0)
        assert small["a"].item() == 0.3

    def test_default_hyperparameters(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.batch_size, cfg.T) == (1e-4, 1, 1000)
        assert cfg.ratios == (2, 3, 4)


class TestLoop:
    def test_identical_runs(self):
        data = [phantom(0), phantom(1)]
        a = train_loop(quick_config(), data, MODEL)
        b = train_loop(quick_config(), data, MODEL)
        assert a.losses == b.losses
        for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
            assert torch.equal(p, q)
            assert torch.equal(a.m[n], b.m[n]) and torch.equal(a.v[n], b.v[n])

    def test_loss_log_lines(self, tmp_path):
        log = tmp_path / "loss.log"
        train_loop(quick_config(iterations=6, log_every=2), [phantom()], MODEL, log_path=log)
        lines = log.read_text().splitlines()
        assert [int(line.split(",")[0]) for line in lines] == [2, 4, 6]
        assert all(len(line.split(",")) == 4 for line in lines)

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            train_loop(quick_config(), [], MODEL)

    @pytest.mark.parametrize("prefetch", [0, 2])
    def test_resume_matches_uninterrupted(self, tmp_path, prefetch):
        data = [phantom(0), phantom(1), phantom(2)]
        full = train_loop(quick_config(iterations=6, prefetch=prefetch), data, MODEL)
        ckpt = tmp_path / "half.ckpt"
        train_loop(quick_config(iterations=3, prefetch=prefetch), data, MODEL, out_path=ckpt)
        state = load_checkpoint(ckpt, MODEL)
        assert state.step == 3
        state.train_config = quick_config(iterations=6, prefetch=prefetch)
        resumed = train_loop(state.train_config, data, MODEL, state=state)
        assert resumed.losses == full.losses[3:]
        for (_, p), (_, q) in zip(resumed.model.named_parameters(), full.model.named_parameters()):
            assert torch.equal(p, q)


class TestCheckpoint:
    def _state(self, ablation=False):
        cfg = DenoiserConfig(**SMALL, ablation=ablation)
        state = TrainState.create(cfg, quick_config())
        g = torch.Generator().manual_seed(11)
        for n, p in state.model.named_parameters():
            state.m[n] = torch.randn(p.shape, generator=g)
            state.v[n] = torch.rand(p.shape, generator=g)
        state.step = 42
        state.data_rng.integers(100, size=5)
        torch.randn(3, generator=state.noise_rng)
        return state

    def test_round_trip(self, tmp_path):
        state = self._state()
        path = tmp_path / "s.ckpt"
        save_checkpoint(state, path)
        back = load_checkpoint(path)
        assert back.step == 42
        assert back.model.config == state.model.config
        assert back.train_config == state.train_config
        for n, p in state.model.named_parameters():
            assert torch.equal(dict(back.model.named_parameters())[n], p)
            assert torch.equal(back.m[n], state.m[n]) and torch.equal(back.v[n], state.v[n])
        assert back.data_rng.integers(1 << 30) == state.data_rng.integers(1 << 30)
        assert torch.equal(torch.randn(4, generator=back.noise_rng), torch.randn(4, generator=state.noise_rng))

    def test_corrupt_magic(self, tmp_path):
        path = tmp_path / "s.ckpt"
        save_checkpoint(self._state(), path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_flipped_payload_byte(self, tmp_path):
        path = tmp_path / "s.ckpt"
        save_checkpoint(self._state(), path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "s.ckpt"
        save_checkpoint(self._state(), path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_ablation_refuses_full_mode(self, tmp_path):
        path = tmp_path / "abl.ckpt"
        save_checkpoint(self._state(ablation=True), path)
        with pytest.raises(CheckpointError, match="different model configuration"):
            load_checkpoint(path, DenoiserConfig(**SMALL))
        assert load_checkpoint(path, DenoiserConfig(**SMALL, ablation=True)).model.config.ablation
