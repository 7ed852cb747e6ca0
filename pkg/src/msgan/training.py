"""WGAN-GP losses, RMSProp and the alternating training loop.

Checkpoint layout (all integers little-endian)::

    b"MSGC" | u32 version=1 | u32 len | UTF-8 JSON snapshot | u32 blob_count
    per blob: u32 name_len | name | u8 rank | u32 extents[rank] | float32 data

The JSON snapshot carries the model and train configs, the step counter and
the RNG stream counters; the blobs carry parameters and optimizer state.
"""
from __future__ import annotations

import csv
import json
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import functional as F
from .autodiff.rng import RngStream
from .autodiff.tensor import Tensor, default_dtype, grad, no_grad
from .data import box_downsample, upsample_20m_nearest
from .models import (ConfigError, ModelConfig, ScaleImageSet, build_discriminator,
                     build_generator)

CKPT_MAGIC = b"MSGC"
CKPT_VERSION = 1
METRICS_HEADER = ["step", "d_loss", "g_loss", "gp", "grad_norm_median", "wall_ms"]


class TrainingError(RuntimeError):
    """Non-finite values encountered during training."""


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    lambda_gp: float = 10.0
    batch_size: int = 4
    epochs: int = 12
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    d_steps_per_g_step: int = 1
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.learning_rate < 0 or self.lambda_gp < 0:
            raise ConfigError("learning_rate and lambda_gp must be non-negative")
        if not 0 < self.rmsprop_alpha < 1 or self.rmsprop_eps <= 0:
            raise ConfigError("rmsprop_alpha must lie in (0, 1) and rmsprop_eps be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (minibatch std needs batch statistics)")
        if self.epochs < 1 or self.d_steps_per_g_step < 1:
            raise ConfigError("epochs and d_steps_per_g_step must be >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------ pyramids

def build_pyramid(sample, config):
    """Real image set for one sample, shaped like the generator output (batch of 1)."""
    top = config.top_resolution
    size = sample.size
    if size < top:
        raise ValueError(f"sample resolution {size} is below top_resolution {top}")
    shift = int(np.log2(size // top))
    if top << shift != size:
        raise ValueError(f"sample resolution {size} is not top_resolution {top} times a power of two")
    g10 = box_downsample(sample.group_10m.astype(np.float64), shift)
    g20 = box_downsample(sample.group_20m.astype(np.float64), shift)
    sources = {
        "rgb": (g10[[2, 1, 0]], top),
        "10m": (g10, top),
        "20m": (g20, top // 2),
        "all": (upsample_20m_nearest(type(sample)(g10, g20)), top),
    }
    dtype = default_dtype()
    out = ScaleImageSet()
    for res, group in config.image_keys():
        if config.variant == "tenband_hybrid" and group == "all":
            # the 20m bands are native at top/2; both groups box-averaged below that
            a = box_downsample(g10, int(np.log2(top // res)))
            b = box_downsample(g20, int(np.log2((top // 2) // res)))
            img = np.concatenate([a, b], axis=0)
        else:
            src, src_res = sources[group]
            img = box_downsample(src, int(np.log2(src_res // res)))
        out.add(res, group, Tensor(img[None].astype(dtype)))
    return out


def batch_pyramid(samples, config):
    pyramids = [build_pyramid(s, config) for s in samples]
    return ScaleImageSet(
        (r, g, Tensor(np.concatenate([p[(r, g)].data for p in pyramids], axis=0)))
        for r, g in pyramids[0].keys())


# -------------------------------------------------------------------- losses

def gradient_penalty(d, real, fake, stream, step=None, return_norms=False):
    """Mean over the batch of ``(||grad_x D(x_hat)|| - 1)^2``.

    One interpolation coefficient per sample is shared by every scale and the
    norm runs jointly over all scales. The result is differentiable with
    respect to the discriminator parameters.
    """
    n = real.batch_size
    first = real.entries()[0][2]
    eps = stream.uniform((n, 1, 1, 1), dtype=first.dtype)
    interp = ScaleImageSet(
        (r, g, Tensor(eps * real[(r, g)].data + (1.0 - eps) * fake[(r, g)].data, requires_grad=True))
        for r, g, _ in real.entries())
    xs = [t for _, _, t in interp.entries()]
    score = d(interp)
    grads = grad(F.sum(score), xs, create_graph=True)
    sq = None
    for gx in grads:
        term = F.sum(F.mul(gx, gx), axis=(1, 2, 3))
        sq = term if sq is None else F.add(sq, term)
    norms = F.sqrt(sq)
    if not np.all(np.isfinite(norms.data)):
        raise TrainingError(f"non-finite critic gradient at step {step}")
    dev = F.sub(norms, 1.0)
    gp = F.mean(F.mul(dev, dev))
    return (gp, norms.data.copy()) if return_norms else gp


def d_loss(d, real, fake, stream, lambda_gp, step=None, return_parts=False):
    """``mean D(fake) - mean D(real) + lambda * GP``."""
    fake = fake.detach()
    d_fake = F.mean(d(fake))
    d_real = F.mean(d(real))
    gp, norms = gradient_penalty(d, real, fake, stream, step, return_norms=True)
    loss = F.add(F.sub(d_fake, d_real), F.mul(gp, lambda_gp))
    if return_parts:
        return loss, {"d_fake": d_fake.item(), "d_real": d_real.item(), "gp": gp.item(), "norms": norms}
    return loss


def g_loss(d, fake):
    """``-mean D(fake)``."""
    return F.mul(F.mean(d(fake)), -1.0)


# ----------------------------------------------------------------- optimizer

def rmsprop_step(param, grad_value, state, lr, alpha=0.99, eps=1e-8):
    """One in-place RMSProp update: ``v = a v + (1-a) g^2; p -= lr g / (sqrt(v) + eps)``."""
    g = np.asarray(grad_value)
    if g.shape != param.shape or state.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {g.shape}, state {state.shape}")
    if not np.all(np.isfinite(g)):
        raise TrainingError("non-finite gradient passed to rmsprop_step")
    dt = param.dtype.type
    state *= dt(alpha)
    state += dt(1.0 - alpha) * g * g
    param -= dt(lr) * g / (np.sqrt(state) + dt(eps))
    return param, state


class RMSProp:
    def __init__(self, params, lr, alpha=0.99, eps=1e-8):
        self.params = params
        self.lr, self.alpha, self.eps = lr, alpha, eps
        self.state = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads):
        for (name, p), g in zip(self.params.items(), grads):
            rmsprop_step(p.data, g.data, self.state[name], self.lr, self.alpha, self.eps)


# ---------------------------------------------------------------- training

@dataclass
class StepMetrics:
    step: int
    d_loss: float
    g_loss: float
    gp: float
    grad_norm_median: float
    wall_ms: float
    d_grad_norm: float = 0.0
    g_grad_norm: float = 0.0
    grad_norms: tuple = ()

    def row(self):
        return [self.step, repr(self.d_loss), repr(self.g_loss), repr(self.gp),
                repr(self.grad_norm_median), f"{self.wall_ms:.1f}"]


def _global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g.data.astype(np.float64) ** 2)) for g in grads)))


class Trainer:
    """Owns both networks, their optimizers and the random streams."""

    def __init__(self, model_config, train_config, init=True):
        self.model_config = model_config
        self.cfg = train_config
        root = RngStream(train_config.seed)
        self.step_count = 0
        self.streams = {"latent": root.child("latent"), "gp": root.child("gp")}
        self.data_stream = root.child("data")
        self.g = build_generator(model_config, root.child("init/g") if init else None)
        self.d = build_discriminator(model_config, root.child("init/d") if init else None)
        if init:
            self._make_optimizers()

    def _make_optimizers(self):
        c = self.cfg
        self.opt_g = RMSProp(self.g.parameters(), c.learning_rate, c.rmsprop_alpha, c.rmsprop_eps)
        self.opt_d = RMSProp(self.d.parameters(), c.learning_rate, c.rmsprop_alpha, c.rmsprop_eps)

    def latent(self, n):
        return Tensor(self.streams["latent"].normal((n, self.model_config.latent_dim)))

    def train_step(self, batch):
        return train_step(self, batch)

    def batches(self):
        """Deterministic batch sequence; resumes at ``step_count``."""
        from .data import dataset_iter
        n_per_epoch = len(self.dataset) // self.cfg.batch_size
        if n_per_epoch == 0:
            raise ValueError("dataset smaller than one batch")
        step = self.step_count
        for epoch in range(step // n_per_epoch, self.cfg.epochs):
            it = dataset_iter(self.samples, self.cfg.batch_size, self.data_stream.child(f"epoch{epoch}"))
            for i, batch in enumerate(it):
                if epoch * n_per_epoch + i < step:
                    continue
                yield batch

    def attach(self, dataset):
        self.dataset = dataset
        self.samples = dataset.samples()
        return self

    def run(self, steps=None, metrics_path=None, checkpoint_path=None, checkpoint_every=None):
        """Train until ``steps`` more steps, the step budget or the epoch budget is reached."""
        limit = self.cfg.max_steps
        if steps is not None:
            limit = self.step_count + steps
        history = []
        writer = None
        fh = None
        if metrics_path is not None:
            new = not Path(metrics_path).exists() or self.step_count == 0
            fh = open(metrics_path, "w" if new else "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(METRICS_HEADER)
        try:
            for batch in self.batches():
                if limit is not None and self.step_count >= limit:
                    break
                m = self.train_step(batch)
                history.append(m)
                if writer:
                    writer.writerow(m.row())
                if checkpoint_path and checkpoint_every and self.step_count % checkpoint_every == 0:
                    save_checkpoint(checkpoint_path, self)
        finally:
            if fh:
                fh.close()
        if checkpoint_path:
            save_checkpoint(checkpoint_path, self)
        return history


def train_step(trainer, batch, streams=None):
    """One critic update (or ``d_steps_per_g_step`` of them) followed by one generator update."""
    t0 = time.perf_counter()
    cfg, g, d = trainer.cfg, trainer.g, trainer.d
    streams = streams or trainer.streams
    if len(batch) != cfg.batch_size:
        raise ValueError(f"batch has {len(batch)} samples, config says {cfg.batch_size}")
    step = trainer.step_count
    real = batch_pyramid(batch, trainer.model_config)
    d_params = list(d.parameters().values())
    g_params = list(g.parameters().values())

    for _ in range(cfg.d_steps_per_g_step):
        with no_grad():
            fake = g(Tensor(streams["latent"].normal((cfg.batch_size, trainer.model_config.latent_dim))))
        loss_d, parts = d_loss(d, real, fake, streams["gp"], cfg.lambda_gp, step, return_parts=True)
        if not np.isfinite(loss_d.item()):
            raise TrainingError(f"non-finite discriminator loss at step {step}: {parts}")
        d_grads = grad(loss_d, d_params)
        trainer.opt_d.step(d_grads)

    fake = g(Tensor(streams["latent"].normal((cfg.batch_size, trainer.model_config.latent_dim))))
    loss_g = g_loss(d, fake)
    if not np.isfinite(loss_g.item()):
        raise TrainingError(f"non-finite generator loss at step {step}")
    g_grads = grad(loss_g, g_params)
    trainer.opt_g.step(g_grads)

    trainer.step_count += 1
    return StepMetrics(
        step=trainer.step_count,
        d_loss=float(loss_d.item()),
        g_loss=float(loss_g.item()),
        gp=float(parts["gp"]),
        grad_norm_median=float(np.median(parts["norms"])),
        wall_ms=(time.perf_counter() - t0) * 1000.0,
        d_grad_norm=_global_norm(d_grads),
        g_grad_norm=_global_norm(g_grads),
        grad_norms=tuple(float(v) for v in parts["norms"]),
    )


# --------------------------------------------------------------- checkpoint

def _blob_bytes(name, arr):
    enc = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", len(enc)) + enc + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


@dataclass
class Checkpoint:
    snapshot: dict
    blobs: dict


def save_checkpoint(path, trainer_or_ckpt):
    """Write a checkpoint atomically (temporary file, then rename)."""
    if isinstance(trainer_or_ckpt, Checkpoint):
        ckpt = trainer_or_ckpt
    else:
        ckpt = trainer_checkpoint(trainer_or_ckpt)
    snap = json.dumps(ckpt.snapshot, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(snap)), snap,
             struct.pack("<I", len(ckpt.blobs))]
    parts += [_blob_bytes(name, arr) for name, arr in ckpt.blobs.items()]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointTruncatedError(f"{path}: truncated at byte {len(buf)} (needed {pos + n})")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != CKPT_MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint (bad magic)")
    version, snap_len = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    try:
        snapshot = json.loads(take(snap_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config snapshot: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    blobs = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        blobs[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return Checkpoint(snapshot, blobs)


def trainer_checkpoint(trainer):
    snapshot = {
        "model": trainer.model_config.to_dict(),
        "train": trainer.cfg.to_dict(),
        "step": trainer.step_count,
        "rng": {k: s.state() for k, s in trainer.streams.items()},
    }
    blobs = {}
    for prefix, model in (("g", trainer.g), ("d", trainer.d)):
        for name, p in model.parameters().items():
            blobs[f"param/{name}"] = p.data
    for prefix, opt in (("g", trainer.opt_g), ("d", trainer.opt_d)):
        for name, v in opt.state.items():
            blobs[f"rmsprop/{name}"] = v
    return Checkpoint(snapshot, blobs)


def trainer_from_checkpoint(ckpt):
    """Rebuild a :class:`Trainer` whose next step continues the saved trajectory."""
    snap = ckpt.snapshot
    mc = ModelConfig.from_dict(snap["model"])
    tc = TrainConfig.from_dict(snap["train"])
    trainer = Trainer(mc, tc, init=False)
    dtype = default_dtype()
    for model in (trainer.g, trainer.d):
        for layer in model.layers():
            layer.weight = Tensor(_blob(ckpt, f"param/{layer.name}.weight", layer.weight_shape).astype(dtype),
                                  requires_grad=True, name=f"{layer.name}.weight")
            layer.bias = Tensor(_blob(ckpt, f"param/{layer.name}.bias", (layer.out_features,)).astype(dtype),
                                requires_grad=True, name=f"{layer.name}.bias")
    trainer._make_optimizers()
    for opt in (trainer.opt_g, trainer.opt_d):
        for name in opt.state:
            opt.state[name] = _blob(ckpt, f"rmsprop/{name}", opt.state[name].shape).astype(dtype)
    trainer.step_count = int(snap["step"])
    trainer.streams = {k: RngStream.from_state(v) for k, v in snap["rng"].items()}
    return trainer


def _blob(ckpt, name, shape):
    if name not in ckpt.blobs:
        raise CheckpointError(f"checkpoint lacks blob {name!r}")
    arr = ckpt.blobs[name]
    if tuple(arr.shape) != tuple(shape):
        raise CheckpointError(f"blob {name!r} has shape {arr.shape}, expected {tuple(shape)}")
    return arr.copy()
