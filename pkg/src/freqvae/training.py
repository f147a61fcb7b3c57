"""Training loop: Adam over the VAE parameters under a configured
objective, per-epoch metrics, and a versioned binary checkpoint container.

Determinism contract: a (config, seed) pair reproduces the run bitwise.
Randomness is split counter-style off the run seed, so the shuffle for
epoch e draws from rng([seed, 0, e]) and the reparameterization noise for
step s of epoch e from rng([seed, 1, e, s]); resuming from a checkpoint
replays the identical streams.
"""

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .data import DatasetSpec, batches, load_dataset
from .errors import ConfigError, FormatError, NumericError, UsageError
from .losses import LossConfig, objective_parts
from .models import (DEFAULT_LATENT, UpsamplingMode, VaeParams, build_vae,
                     forward)

CHECKPOINT_MAGIC = b"FVAE"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("epoch", "loss_total", "loss_recon", "loss_spectral",
                  "loss_kl", "wall_seconds")


@dataclass
class TrainConfig:
    dataset: DatasetSpec
    loss: LossConfig
    mode: UpsamplingMode
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    latent_dim: int = 0
    widths: Optional[tuple] = None
    train_count: int = 0

    def __post_init__(self):
        if not isinstance(self.dataset, DatasetSpec):
            raise ConfigError("dataset must be a DatasetSpec")
        if not isinstance(self.loss, LossConfig):
            raise ConfigError("loss must be a LossConfig")
        if not isinstance(self.mode, UpsamplingMode):
            raise ConfigError("mode must be an UpsamplingMode")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ConfigError("adam betas must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.checkpoint_every < 0 or self.latent_dim < 0 or self.train_count < 0:
            raise ConfigError("checkpoint_every, latent_dim, and train_count must be >= 0")
        if self.widths is not None:
            self.widths = tuple(int(w) for w in self.widths)

    def resolved_latent(self) -> int:
        return self.latent_dim or DEFAULT_LATENT[self.dataset.resolution]

    def channels(self) -> int:
        return 3 if self.dataset.name == "image_dir" else 1


@dataclass
class AdamMoments:
    m: dict
    v: dict

    @staticmethod
    def zeros_like(tensors) -> "AdamMoments":
        return AdamMoments(m={k: np.zeros_like(t.data) for k, t in tensors.items()},
                           v={k: np.zeros_like(t.data) for k, t in tensors.items()})


@dataclass
class EpochMetrics:
    epoch: int
    loss_total: float
    loss_recon: float
    loss_spectral: float
    loss_kl: float
    wall_seconds: float


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    tensors: dict
    moments: AdamMoments
    epoch: int


def config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "dataset": {"name": cfg.dataset.name, "resolution": cfg.dataset.resolution,
                    "split": cfg.dataset.split, "root": cfg.dataset.root,
                    "seed": cfg.dataset.seed},
        "loss": {"kind": cfg.loss.kind, "alpha": cfg.loss.alpha,
                 "beta": cfg.loss.beta, "ai_weight": cfg.loss.ai_weight},
        "mode": cfg.mode.value,
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr": cfg.lr,
        "adam_beta1": cfg.adam_beta1, "adam_beta2": cfg.adam_beta2,
        "adam_eps": cfg.adam_eps, "seed": cfg.seed,
        "checkpoint_every": cfg.checkpoint_every,
        "latent_dim": cfg.latent_dim,
        "widths": list(cfg.widths) if cfg.widths is not None else None,
        "train_count": cfg.train_count,
    }


def config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(
        dataset=DatasetSpec(**d["dataset"]),
        loss=LossConfig(**d["loss"]),
        mode=UpsamplingMode(d["mode"]),
        epochs=d["epochs"], batch_size=d["batch_size"], lr=d["lr"],
        adam_beta1=d["adam_beta1"], adam_beta2=d["adam_beta2"],
        adam_eps=d["adam_eps"], seed=d["seed"],
        checkpoint_every=d["checkpoint_every"], latent_dim=d["latent_dim"],
        widths=tuple(d["widths"]) if d["widths"] is not None else None,
        train_count=d["train_count"],
    )


def adam_step(tensors, grads, moments: AdamMoments, t: int, cfg: TrainConfig):
    """In-place Adam update with bias correction, all float32."""
    if t < 1:
        raise UsageError(f"step counter must be >= 1, got {t}")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, tensor in tensors.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for tensor {name!r} at step {t}")
        m = moments.m[name]
        v = moments.v[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        mhat = m / np.float32(c1)
        vhat = v / np.float32(c2)
        tensor.data[...] = tensor.data - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    return moments


def _epoch_steps(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def train(cfg: TrainConfig, out_dir=None, resume: Optional[Checkpoint] = None):
    """Run the configured training; returns (Checkpoint, [EpochMetrics]).

    With out_dir set, writes metrics.csv and checkpoint.fvae there, the
    checkpoint also at every checkpoint_every epochs.  A non-finite loss
    aborts with NumericError; the last checkpoint written stays intact.
    Pass a loaded checkpoint as resume to continue an interrupted run; its
    config must match exactly and the replay is bitwise identical to an
    uninterrupted run.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    dataset = load_dataset(cfg.dataset, cfg.train_count)
    if resume is not None:
        if config_to_dict(resume.config) != config_to_dict(cfg):
            raise UsageError("resume checkpoint was trained under a different config")
        params = restore_params(resume)
        moments = AdamMoments(m={k: a.copy() for k, a in resume.moments.m.items()},
                              v={k: a.copy() for k, a in resume.moments.v.items()})
        start_epoch = resume.epoch
    else:
        params = build_vae(cfg.dataset.resolution, cfg.channels(), cfg.resolved_latent(),
                           cfg.mode, seed=cfg.seed, widths=cfg.widths)
        moments = AdamMoments.zeros_like(params.tensors)
        start_epoch = 0

    n = len(dataset)
    t = start_epoch * _epoch_steps(n, cfg.batch_size)
    rows = []
    names = list(params.tensors)
    for epoch in range(start_epoch, cfg.epochs):
        tick = time.monotonic()
        sums = {"total": 0.0, "recon": 0.0, "spectral": 0.0, "kl": 0.0}
        for step, batch in enumerate(batches(dataset, cfg.batch_size,
                                             shuffle_seed=[cfg.seed, 0, epoch])):
            eps_rng = np.random.default_rng([cfg.seed, 1, epoch, step])
            x = ad.tensor(batch.data)
            xhat, mu, logvar = forward(params, x, eps_rng)
            parts = objective_parts(x, xhat, mu, logvar, cfg.loss)
            total = parts["total"].item()
            if not np.isfinite(total):
                raise NumericError(f"non-finite loss {total} at epoch {epoch} step {step}; "
                                   "training aborted, last checkpoint kept")
            for tensor in params.tensors.values():
                tensor.grad = None
            ad.backward(parts["total"])
            t += 1
            adam_step(params.tensors, {k: params.tensors[k].grad for k in names},
                      moments, t, cfg)
            for tensor in params.tensors.values():
                if not np.isfinite(tensor.data).all():
                    raise NumericError(f"non-finite parameter after step {t}; "
                                       "training aborted, last checkpoint kept")
            w = len(batch) / n
            for key in sums:
                sums[key] += parts[key].item() * w
        rows.append(EpochMetrics(epoch=epoch + 1, loss_total=sums["total"],
                                 loss_recon=sums["recon"], loss_spectral=sums["spectral"],
                                 loss_kl=sums["kl"],
                                 wall_seconds=time.monotonic() - tick))
        done = epoch + 1
        if out_dir is not None:
            write_metrics_csv(out_dir / "metrics.csv", rows)
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.epochs:
                save_checkpoint(_snapshot(cfg, params, moments, done),
                                out_dir / "checkpoint.fvae")

    ckpt = _snapshot(cfg, params, moments, cfg.epochs)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoint.fvae")
    return ckpt, rows


def _snapshot(cfg, params, moments, epoch) -> Checkpoint:
    return Checkpoint(version=CHECKPOINT_VERSION, config=cfg,
                      tensors={k: t.data.copy() for k, t in params.tensors.items()},
                      moments=AdamMoments(m={k: a.copy() for k, a in moments.m.items()},
                                          v={k: a.copy() for k, a in moments.v.items()}),
                      epoch=epoch)


def restore_params(ckpt: Checkpoint) -> VaeParams:
    """Rebuild VaeParams carrying the checkpoint's trained tensors."""
    cfg = ckpt.config
    params = build_vae(cfg.dataset.resolution, cfg.channels(), cfg.resolved_latent(),
                       cfg.mode, seed=cfg.seed, widths=cfg.widths)
    for name, arr in ckpt.tensors.items():
        params.tensors[name].data[...] = arr
    return params


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for r in rows:
            writer.writerow([r.epoch, repr(r.loss_total), repr(r.loss_recon),
                             repr(r.loss_spectral), repr(r.loss_kl),
                             repr(r.wall_seconds)])


def read_metrics_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise FormatError(f"{path}: unexpected metrics columns {reader.fieldnames}")
        for rec in reader:
            rows.append(EpochMetrics(epoch=int(rec["epoch"]),
                                     loss_total=float(rec["loss_total"]),
                                     loss_recon=float(rec["loss_recon"]),
                                     loss_spectral=float(rec["loss_spectral"]),
                                     loss_kl=float(rec["loss_kl"]),
                                     wall_seconds=float(rec["wall_seconds"])))
    return rows


def _pack_tensor_section(arrays: dict) -> bytes:
    out = [len(arrays).to_bytes(4, "little")]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], "<f4")
        enc = name.encode()
        out.append(len(enc).to_bytes(2, "little"))
        out.append(enc)
        out.append(arr.ndim.to_bytes(1, "little"))
        for d in arr.shape:
            out.append(int(d).to_bytes(4, "little"))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated at offset {len(self.raw)}, "
                              f"needed {self.pos + n}")
        chunk = self.raw[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def u(self, n: int) -> int:
        return int.from_bytes(self.take(n), "little")


def _unpack_tensor_section(r: _Reader) -> dict:
    arrays = {}
    for _ in range(r.u(4)):
        name = r.take(r.u(2)).decode()
        shape = tuple(r.u(4) for _ in range(r.u(1)))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arrays[name] = np.frombuffer(r.take(4 * count), "<f4").reshape(shape).copy()
    return arrays


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Serialize to the FVAE container: magic, version, config JSON, epoch,
    then parameter / first-moment / second-moment tensor sections of
    little-endian float32 with shape headers.  Byte-stable: saving a loaded
    checkpoint reproduces the file exactly."""
    cfg_json = json.dumps(config_to_dict(ckpt.config), sort_keys=True,
                          separators=(",", ":")).encode()
    blob = b"".join([
        CHECKPOINT_MAGIC,
        ckpt.version.to_bytes(4, "little"),
        len(cfg_json).to_bytes(4, "little"),
        cfg_json,
        int(ckpt.epoch).to_bytes(4, "little"),
        _pack_tensor_section(ckpt.tensors),
        _pack_tensor_section(ckpt.moments.m),
        _pack_tensor_section(ckpt.moments.v),
    ])
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u(4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: incompatible checkpoint version {version}, "
                          f"this build reads {CHECKPOINT_VERSION}")
    cfg = config_from_dict(json.loads(r.take(r.u(4)).decode()))
    epoch = r.u(4)
    tensors = _unpack_tensor_section(r)
    m = _unpack_tensor_section(r)
    v = _unpack_tensor_section(r)
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes after payload")
    return Checkpoint(version=version, config=cfg, tensors=tensors,
                      moments=AdamMoments(m=m, v=v), epoch=epoch)


def smoothed_is_non_increasing(totals, window: int = 5) -> bool:
    """Soft trend check: the window-point moving average of the per-epoch
    training loss never rises.  A False is a red flag to investigate, not
    proof of a bug."""
    totals = np.asarray(totals, np.float64)
    if totals.size < window + 1:
        return True
    avg = np.convolve(totals, np.ones(window) / window, mode="valid")
    return bool((np.diff(avg) <= 1e-12).all())