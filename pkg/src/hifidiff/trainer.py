"""Mixed-ratio training: tuple sampling, the noise-prediction objective,
Adam, checkpoints and the training loop.

RNG streams
-----------
Two independent streams derive from the root seed:

* ``data_rng`` (numpy) picks, in order, the volume, the ratio R, the lower
  slice index i and the in-between index j for every sample of a batch.
* ``noise_rng`` (torch) draws, in order, the batch of timesteps t and then the
  batch of noise maps eps.

Identical seeds therefore reproduce identical losses, and a checkpoint stores
both stream states so a resumed run continues bit-identically.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import math
import queue
import struct
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .data import Volume
from .denoiser import DenoiserConfig, HiFiDiff
from .errors import CheckpointError, ConfigurationError, DataError, NumericalFault
from .schedule import NoiseSchedule, make_linear_schedule, q_sample

log = logging.getLogger(__name__)

CKPT_MAGIC = b"HIFIDIFF-CKPT\n"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10000
    lr: float = 1e-4
    batch_size: int = 1
    ratios: tuple = (2, 3, 4)
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    grad_clip: float = 1.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    log_every: int = 100
    ckpt_every: int = 1000
    seed: int = 0
    prefetch: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(int(r) for r in self.ratios))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if not self.ratios or min(self.ratios) < 2:
            raise ConfigurationError(f"ratios must be integers >= 2, got {self.ratios}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigurationError("batch_size must be >= 1 and iterations >= 0")

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class SlicePairSample:
    lower: np.ndarray
    upper: np.ndarray
    k: float
    target: np.ndarray

    def __post_init__(self):
        if not (self.lower.shape == self.upper.shape == self.target.shape):
            raise DataError("slice shapes differ within a training tuple")
        if not 0.0 < self.k < 1.0:
            raise DataError(f"offset must be strictly inside (0, 1), got {self.k}")


@dataclass
class Batch:
    lower: torch.Tensor  # (B, 1, H, W)
    upper: torch.Tensor
    k: torch.Tensor  # (B,)
    target: torch.Tensor

    @classmethod
    def collate(cls, samples: Sequence[SlicePairSample], dtype=torch.float32) -> "Batch":
        def stack(attr):
            return torch.from_numpy(np.stack([getattr(s, attr) for s in samples])[:, None]).to(dtype)

        k = torch.tensor([s.k for s in samples], dtype=dtype)
        return cls(stack("lower"), stack("upper"), k, stack("target"))


def sample_training_tuple(volume: Volume, ratios: Sequence[int], rng: np.random.Generator) -> SlicePairSample:
    """Pick R from ``ratios``, then slices i, i+R and an in-between slice i+j."""
    vox = volume.voxels
    R_max = max(ratios)
    if vox.shape[0] < R_max + 1:
        raise DataError(f"volume has {vox.shape[0]} slices, need at least {R_max + 1} for ratio {R_max}")
    R = int(ratios[rng.integers(len(ratios))])
    i = int(rng.integers(0, vox.shape[0] - R))
    j = int(rng.integers(1, R))
    return SlicePairSample(vox[i], vox[i + R], j / R, vox[i + j])


@dataclass
class TrainState:
    model: HiFiDiff
    train_config: TrainConfig
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    data_rng: np.random.Generator = None
    noise_rng: torch.Generator = None
    losses: list = field(default_factory=list)

    @classmethod
    def create(cls, model_config: DenoiserConfig, train_config: TrainConfig, dtype=torch.float32):
        seed = train_config.seed
        torch.manual_seed(seed)
        model = HiFiDiff(model_config).to(dtype)
        noise_rng = torch.Generator().manual_seed(seed + 1)
        data_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        state = cls(model, train_config, data_rng=data_rng, noise_rng=noise_rng)
        state.reset_moments()
        return state

    def reset_moments(self):
        self.m = {n: torch.zeros_like(p) for n, p in self.model.named_parameters()}
        self.v = {n: torch.zeros_like(p) for n, p in self.model.named_parameters()}

    @property
    def model_config(self) -> DenoiserConfig:
        return self.model.config


def compute_loss(model: HiFiDiff, batch: Batch, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule):
    """Mean squared error between predicted and injected noise for fixed (t, eps)."""
    x_t = q_sample(batch.target, t, eps, sched)
    pred = model(x_t, t, batch.lower, batch.upper, batch.k)
    return (pred - eps).pow(2).mean()


def draw_noise(batch: Batch, sched: NoiseSchedule, rng: torch.Generator):
    B = batch.target.shape[0]
    t = torch.randint(1, sched.T + 1, (B,), generator=rng)
    eps = torch.randn(batch.target.shape, generator=rng, dtype=batch.target.dtype)
    return t, eps


def loss_simple(batch: Batch, state: TrainState, sched: NoiseSchedule, rng: Optional[torch.Generator] = None):
    """Draw t then eps, return (loss value, {param name: gradient})."""
    rng = rng if rng is not None else state.noise_rng
    t, eps = draw_noise(batch, sched, rng)
    model = state.model
    loss = compute_loss(model, batch, t, eps, sched)
    if not torch.isfinite(loss):
        raise NumericalFault(f"non-finite loss {loss.item()} at step {state.step + 1}")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}
    return loss.item(), grads


def clip_gradients(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(g.pow(2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return total


@torch.no_grad()
def adam_step(state: TrainState, grads: dict, lr: float) -> TrainState:
    """Bias-corrected Adam update of every parameter in place; advances the step counter."""
    b1, b2 = state.train_config.adam_betas
    eps = state.train_config.adam_eps
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, p in state.model.named_parameters():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        m = state.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
        v = state.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    state.step = step
    return state


class TupleStream:
    """Batches of training tuples drawn from ``state.data_rng``.

    With ``capacity > 0`` a producer thread fills a bounded queue ahead of the
    consumer. Each queued batch carries the generator state that follows it,
    and ``consumed_state`` reports the state after the last batch actually
    taken, which is what a checkpoint must record.
    """

    def __init__(self, dataset: Sequence[Volume], state: TrainState, capacity: int = 0):
        self.dataset = dataset
        self.ratios = state.train_config.ratios
        self.batch_size = state.train_config.batch_size
        self.rng = state.data_rng
        self.consumed_state = self.rng.bit_generator.state
        self.capacity = capacity
        self._queue: Optional[queue.Queue] = None
        self._stop = threading.Event()
        if capacity > 0:
            self._queue = queue.Queue(maxsize=capacity)
            self._thread = threading.Thread(target=self._produce, daemon=True)
            self._thread.start()

    def _draw(self):
        samples = []
        for _ in range(self.batch_size):
            vol = self.dataset[int(self.rng.integers(len(self.dataset)))]
            samples.append(sample_training_tuple(vol, self.ratios, self.rng))
        return Batch.collate(samples), self.rng.bit_generator.state

    def _produce(self):
        while not self._stop.is_set():
            item = self._draw()
            while not self._stop.is_set():
                try:
                    self._queue.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def next(self) -> Batch:
        batch, rng_state = self._draw() if self._queue is None else self._queue.get()
        self.consumed_state = rng_state
        return batch

    def close(self):
        self._stop.set()
        if self._queue is not None:
            self._thread.join()


# -- checkpoints ---------------------------------------------------------------

def _pack_array(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    out = [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def _read(buf: io.BytesIO, n: int) -> bytes:
    chunk = buf.read(n)
    if len(chunk) != n:
        raise CheckpointError("checkpoint truncated")
    return chunk


def save_checkpoint(state: TrainState, path, data_rng_state: Optional[dict] = None) -> None:
    """Versioned binary checkpoint; see :func:`load_checkpoint` for the layout."""
    model = state.model
    dtype = next(model.parameters()).dtype
    meta = {
        "model_config": model.config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "step": state.step,
        "dtype": str(dtype).replace("torch.", ""),
        "data_rng": data_rng_state or (state.data_rng.bit_generator.state if state.data_rng else None),
        "noise_rng": base64.b64encode(state.noise_rng.get_state().numpy().tobytes()).decode()
        if state.noise_rng is not None
        else None,
    }
    arrays = []
    for name, p in model.named_parameters():
        arrays.append(("param/" + name, p.detach().cpu().double().numpy()))
        arrays.append(("adam_m/" + name, state.m[name].detach().cpu().double().numpy()))
        arrays.append(("adam_v/" + name, state.v[name].detach().cpu().double().numpy()))
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = [
        CKPT_MAGIC,
        struct.pack("<I", CKPT_VERSION),
        model.config.hash().encode("ascii"),
        struct.pack("<I", len(meta_raw)),
        meta_raw,
        struct.pack("<I", len(arrays)),
    ]
    body.extend(_pack_array(n, a) for n, a in arrays)
    blob = b"".join(body)
    blob += hashlib.sha256(blob).digest()
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path, expected: Optional[DenoiserConfig] = None) -> TrainState:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Layout: magic, u32 version, 64 hex chars of model-config hash, u32-length
    JSON metadata, u32 array count, then per array a u32-length UTF-8 name,
    u32 ndim, ndim u64 dims and float64 little-endian data; a SHA-256 of all
    preceding bytes closes the file. Nothing is returned unless every check
    passes. ``expected`` rejects checkpoints built for another architecture
    or conditioning mode.
    """
    blob = Path(path).read_bytes()
    if not blob.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    if len(blob) < len(CKPT_MAGIC) + 32 or hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    buf = io.BytesIO(blob[len(CKPT_MAGIC):-32])
    (version,) = struct.unpack("<I", _read(buf, 4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    stored_hash = _read(buf, 64).decode("ascii")
    (n_meta,) = struct.unpack("<I", _read(buf, 4))
    meta = json.loads(_read(buf, n_meta).decode("utf-8"))
    model_config = DenoiserConfig(**meta["model_config"])
    if model_config.hash() != stored_hash:
        raise CheckpointError(f"{path}: config hash does not match stored configuration")
    if expected is not None and expected.hash() != stored_hash:
        raise CheckpointError(
            f"{path}: checkpoint was trained with a different model configuration "
            f"(ablation={model_config.ablation}) than requested (ablation={expected.ablation})"
        )
    (n_arrays,) = struct.unpack("<I", _read(buf, 4))
    arrays = {}
    for _ in range(n_arrays):
        (n_name,) = struct.unpack("<I", _read(buf, 4))
        name = _read(buf, n_name).decode("utf-8")
        (ndim,) = struct.unpack("<I", _read(buf, 4))
        shape = struct.unpack(f"<{ndim}Q", _read(buf, 8 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(_read(buf, 8 * count), dtype="<f8").reshape(shape)
    if buf.read(1):
        raise CheckpointError(f"{path}: trailing bytes after last array")

    dtype = getattr(torch, meta["dtype"])
    model = HiFiDiff(model_config).to(dtype)
    train_config = TrainConfig(**meta["train_config"])
    state = TrainState(model, train_config, step=int(meta["step"]))
    m, v = {}, {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            for prefix in ("param/", "adam_m/", "adam_v/"):
                if prefix + name not in arrays:
                    raise CheckpointError(f"{path}: missing array {prefix + name}")
                if arrays[prefix + name].shape != tuple(p.shape):
                    raise CheckpointError(f"{path}: shape mismatch for {prefix + name}")
            p.copy_(torch.from_numpy(arrays["param/" + name].copy()))
            m[name] = torch.from_numpy(arrays["adam_m/" + name].copy()).to(dtype)
            v[name] = torch.from_numpy(arrays["adam_v/" + name].copy()).to(dtype)
    expected_names = {pre + n for n, _ in model.named_parameters() for pre in ("param/", "adam_m/", "adam_v/")}
    if set(arrays) != expected_names:
        raise CheckpointError(f"{path}: unexpected arrays {sorted(set(arrays) - expected_names)[:5]}")
    state.m, state.v = m, v
    if meta.get("data_rng") is not None:
        state.data_rng = np.random.default_rng()
        state.data_rng.bit_generator.state = meta["data_rng"]
    if meta.get("noise_rng") is not None:
        state.noise_rng = torch.Generator()
        raw = np.frombuffer(base64.b64decode(meta["noise_rng"]), dtype=np.uint8).copy()
        state.noise_rng.set_state(torch.from_numpy(raw))
    return state


# -- loop -----------------------------------------------------------------------

def train_loop(
    config: TrainConfig,
    dataset: Sequence[Volume],
    model_config: DenoiserConfig = DenoiserConfig(),
    out_path=None,
    log_path=None,
    state: Optional[TrainState] = None,
) -> TrainState:
    """Sample -> loss -> clip -> Adam for ``config.iterations`` total steps.

    ``dataset`` holds volumes already normalized to [-1, 1]. Passing a loaded
    ``state`` resumes from its step counter. Loss lines ``step,loss,lr,elapsed_ms``
    are appended to ``log_path`` every ``log_every`` steps; the checkpoint at
    ``out_path`` is rewritten every ``ckpt_every`` steps and at the end.
    """
    if not dataset:
        raise DataError("training needs at least one volume")
    if state is None:
        state = TrainState.create(model_config, config)
    sched = config.schedule()
    stream = TupleStream(dataset, state, capacity=config.prefetch)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    start = time.perf_counter()
    try:
        while state.step < config.iterations:
            batch = stream.next()
            loss, grads = loss_simple(batch, state, sched)
            clip_gradients(grads, config.grad_clip)
            adam_step(state, grads, config.lr)
            state.losses.append(loss)
            if config.log_every and state.step % config.log_every == 0:
                elapsed = int((time.perf_counter() - start) * 1000)
                recent = float(np.mean(state.losses[-config.log_every:]))
                log.info("step %d loss %.5f", state.step, recent)
                if log_fh:
                    log_fh.write(f"{state.step},{recent:.8f},{config.lr:g},{elapsed}\n")
                    log_fh.flush()
            if out_path and config.ckpt_every and state.step % config.ckpt_every == 0:
                save_checkpoint(state, out_path, stream.consumed_state)
        if out_path:
            save_checkpoint(state, out_path, stream.consumed_state)
    finally:
        stream.close()
        if log_fh:
            log_fh.close()
    state.data_rng.bit_generator.state = stream.consumed_state
    return state
