import numpy as np
import pytest
import torch

from hifidiff.denoiser import DenoiserConfig, HiFiDiff

torch.set_num_threads(1)

SMALL = dict(levels=2, base_channels=8, channel_mults=(1, 2), groups=4, T=50)

ACCEPTANCE_LINES = []


def small_model(ablation=False, dtype=torch.float64, seed=0, zero_out=False, **kw):
    """Tiny two-level network; random output head so every parameter carries gradient."""
    torch.manual_seed(seed)
    cfg = DenoiserConfig(**{**SMALL, **kw}, ablation=ablation, zero_init_output=zero_out)
    return HiFiDiff(cfg).to(dtype)


def finite_difference_check(loss_fn, tensors, n_coords, rng, h=1e-5):
    """Central differences on ``n_coords`` random scalar entries of ``tensors``.

    Returns the worst relative error |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    picks = []
    sizes = np.array([t.numel() for t in tensors])
    for _ in range(n_coords):
        which = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
        picks.append((which, int(rng.integers(tensors[which].numel()))))
    worst = 0.0
    for which, idx in picks:
        flat = tensors[which].data.view(-1)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + h
            up = loss_fn().item()
            flat[idx] = orig - h
            down = loss_fn().item()
            flat[idx] = orig
        numeric = (up - down) / (2 * h)
        g = analytic[which]
        a = 0.0 if g is None else g.reshape(-1)[idx].item()
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
