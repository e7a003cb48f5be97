"""Self-supervised and supervised training loops, validation, early stopping
and the ``N2TD`` checkpoint container."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import metrics
from .model import ModelConfig, Noise2NoiseTD, init_model
from .noiseloss import (
    REG_TARGETS, REG_WEIGHT, NoiseModel, loss as likelihood_loss, noise_variance, posterior_mean, prior_variance,
)
from .projsim import SequenceSample, sequence_centers, window_indices

log = logging.getLogger(__name__)

TRAIN_MODES = ("selfsup_mixed", "selfsup_gaussian", "selfsup_poisson", "supervised_mse")
CKPT_MAGIC = b"N2TD"
CKPT_VERSION = 1
HISTORY_COLUMNS = ("step", "loss", "val_psnr_db", "val_ssim", "val_l1", "stop_metric", "a", "lambda")


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CleanAccessError(RuntimeError):
    """Raised when self-supervised training touches ground-truth frames."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "selfsup_mixed"
    lr: Optional[float] = None
    noise_lr: float = 5e-2
    batch_size: Optional[int] = None
    crop: int = 64
    k: int = 3
    max_epochs: int = 10
    steps_per_epoch: int = 500
    patience: int = 3
    seed: int = 0
    stop_weights: tuple[float, float] = (0.86, 0.14)
    blind_mode: str = "paper"
    boundary: str = "wrap"
    val_frames: Optional[int] = None
    noise_init: tuple[float, float] = (1e-3, 100.0)
    reg_weight: float = REG_WEIGHT
    reg_on: str = "total"
    noise_warmup: int = 0

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}")
        supervised = self.mode == "supervised_mse"
        if self.lr is None:
            object.__setattr__(self, "lr", 4e-4 if supervised else 1e-4)
        if self.batch_size is None:
            object.__setattr__(self, "batch_size", 64 if supervised else 8)
        object.__setattr__(self, "stop_weights", tuple(float(w) for w in self.stop_weights))
        object.__setattr__(self, "noise_init", tuple(float(w) for w in self.noise_init))
        if self.lr < 0 or self.noise_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.crop < 16:
            raise ValueError("crop must be at least 16")
        if self.batch_size < 1 or self.k < 1 or self.steps_per_epoch < 1 or self.patience < 1:
            raise ValueError("batch_size, k, steps_per_epoch and patience must be positive")
        if self.noise_warmup < 0:
            raise ValueError("noise_warmup must be non-negative")
        if self.reg_on not in REG_TARGETS:
            raise ValueError(f"reg_on must be one of {REG_TARGETS}")
        if abs(sum(self.stop_weights) - 1.0) > 1e-12:
            raise ValueError("stop weights must sum to 1")

    @property
    def noise_mode(self) -> Optional[str]:
        return None if self.mode == "supervised_mse" else self.mode.split("_", 1)[1]

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


class SelfSupervisedView:
    """Read-only view of a stack that refuses access to its clean frames."""

    def __init__(self, stack):
        self._stack = stack

    @property
    def frames(self):
        return self._stack.frames

    @property
    def geometry(self):
        return self._stack.geometry

    @property
    def shape(self):
        return self._stack.shape

    @property
    def clean_frames(self):
        raise CleanAccessError("self-supervised training must not read clean frames")


def sample_batch(stacks: Sequence, config: TrainConfig, rng: np.random.Generator,
                 with_targets: bool = False) -> list[SequenceSample]:
    """Random crops of random (2k+1)-frame windows; one crop window per sample."""
    batch = []
    for _ in range(config.batch_size):
        stack = stacks[int(rng.integers(len(stacks)))]
        n, z, u = stack.shape
        if config.crop > z or config.crop > u:
            raise ValueError(f"crop {config.crop} larger than frames {z}x{u}")
        centers = sequence_centers(n, config.k, config.boundary, stack.geometry.circular)
        center = centers[int(rng.integers(len(centers)))]
        r0 = int(rng.integers(z - config.crop + 1))
        c0 = int(rng.integers(u - config.crop + 1))
        rows, cols = slice(r0, r0 + config.crop), slice(c0, c0 + config.crop)
        idx = window_indices(center, config.k, n)
        target = stack.clean_frames[center, rows, cols] if with_targets else None
        batch.append(SequenceSample(stack.frames[idx, rows, cols], config.k, center, (r0, c0), target))
    return batch


def batch_tensor(batch: Sequence[SequenceSample], dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack([s.frames for s in batch])[:, :, None], dtype=dtype)


def denoise_windows(model: Noise2NoiseTD, noise: Optional[NoiseModel], windows: torch.Tensor,
                    noise_mode: Optional[str]) -> torch.Tensor:
    """Posterior-mean estimate of each middle frame; prior mean in supervised mode."""
    with torch.no_grad():
        mu, log_var = model(windows)
        if noise_mode is None:
            return mu
        y = windows[:, model.config.k, 0]
        return posterior_mean(y, mu, prior_variance(log_var), noise_variance(mu, noise, noise_mode))


def denoise_frames(model, noise, frames: np.ndarray, circular: bool, noise_mode: Optional[str],
                   centers: Optional[Sequence[int]] = None, batch_size: int = 4) -> tuple[np.ndarray, list[int]]:
    """Denoise the given center indices of an (N, Z, U) array.

    Returns (denoised frames for those centers, centers). Without ``centers``
    every eligible index is used (all of them for circular scans).
    """
    k = model.config.k
    n = frames.shape[0]
    if centers is None:
        centers = list(sequence_centers(n, k, "wrap" if circular else "skip", circular))
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(centers), batch_size):
        chunk = centers[i:i + batch_size]
        windows = np.stack([frames[window_indices(c, k, n)] for c in chunk])[:, :, None]
        out.append(denoise_windows(model, noise, torch.as_tensor(windows, dtype=dtype), noise_mode).double().numpy())
    return np.concatenate(out), list(centers)


def _val_centers(stack, config: TrainConfig) -> list[int]:
    n = stack.shape[0]
    boundary = "wrap" if stack.geometry.circular else "skip"
    centers = list(sequence_centers(n, config.k, boundary, stack.geometry.circular))
    if config.val_frames is not None and config.val_frames < len(centers):
        pick = np.linspace(0, len(centers) - 1, config.val_frames).round().astype(int)
        centers = [centers[i] for i in pick]
    return centers


def score_frames(denoised: np.ndarray, clean: np.ndarray, data_range: float,
                 stop_weights=(0.86, 0.14)) -> dict:
    """Mean PSNR / SSIM / L1 over frames plus the stop metric built from them."""
    ps = [metrics.psnr(d, c, data_range) for d, c in zip(denoised, clean)]
    ss = [metrics.ssim(d, c, data_range) for d, c in zip(denoised, clean)]
    ls = [metrics.l1(d, c) for d, c in zip(denoised, clean)]
    s, l = float(np.mean(ss)), float(np.mean(ls))
    return {"psnr": float(np.mean(ps)), "ssim": s, "l1": l, "stop_metric": metrics.stop_metric(s, l, *stop_weights)}


def validate(model, noise, val_stacks: Sequence, config: TrainConfig) -> dict:
    """Denoise validation centers and score them against the full-dose frames."""
    denoised, clean = [], []
    for stack in val_stacks:
        if stack.clean_frames is None:
            raise ValueError("validation stacks need clean_frames")
        frames, centers = denoise_frames(
            model, noise, stack.frames, stack.geometry.circular, config.noise_mode, _val_centers(stack, config))
        denoised.append(frames)
        clean.append(stack.clean_frames[centers])
    clean_all = np.concatenate(clean).astype(np.float64)
    data_range = float(clean_all.max() - clean_all.min())
    return score_frames(np.concatenate(denoised), clean_all, data_range, config.stop_weights)


def early_stop(history: Sequence[dict], patience: int) -> bool:
    """True once the last ``patience`` records all have worse PSNR *and* worse
    stop metric than the best seen before them."""
    if not history:
        raise ValueError("empty history")
    best_psnr, best_stop = -math.inf, math.inf
    run = 0
    for rec in history:
        psnr, stop = rec["val_psnr_db"], rec["stop_metric"]
        if psnr < best_psnr and stop > best_stop:
            run += 1
        else:
            run = 0
        best_psnr, best_stop = max(best_psnr, psnr), min(best_stop, stop)
    return run >= patience


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    model_state: dict
    noise_state: dict
    optimizer_state: dict
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    rng_state: Optional[dict] = None

    @property
    def noise_params(self) -> dict:
        noise = NoiseModel()
        noise.load_state_dict(self.noise_state)
        return noise.values()

    def build_model(self) -> Noise2NoiseTD:
        model = Noise2NoiseTD(self.model_config)
        model.load_state_dict(self.model_state)
        model.eval()
        return model

    def build_noise(self) -> NoiseModel:
        noise = NoiseModel()
        noise.load_state_dict(self.noise_state)
        return noise


class Trainer:
    """Owns the network, the noise model, Adam state and the batch RNG."""

    def __init__(self, model_config: ModelConfig, config: TrainConfig):
        self.config = config
        self.model_config = dataclasses.replace(model_config, k=config.k, blind_mode=config.blind_mode)
        self.model = init_model(self.model_config, config.seed)
        self.noise = NoiseModel(*config.noise_init)
        groups = [{"params": list(self.model.parameters()), "lr": config.lr}]
        if config.noise_mode is not None:
            groups.append({"params": list(self.noise.parameters()), "lr": config.noise_lr})
        self.optimizer = torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-8)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.epoch = 0
        self.history: list[dict] = []

    @property
    def supervised(self) -> bool:
        return self.config.noise_mode is None

    def batch_loss(self, batch: Sequence[SequenceSample]) -> torch.Tensor:
        x = batch_tensor(batch)
        mu, log_var = self.model(x)
        if self.supervised:
            target = torch.as_tensor(np.stack([s.target for s in batch]), dtype=mu.dtype)
            return ((mu - target) ** 2).mean()
        y = x[:, self.config.k, 0]
        return likelihood_loss(y, mu, log_var, self.noise, self.config.noise_mode, self.config.reg_weight,
                               self.config.reg_on)

    def train_step(self, batch: Sequence[SequenceSample]) -> float:
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        value = self.batch_loss(batch)
        if not torch.isfinite(value):
            raise FloatingPointError(f"non-finite loss {float(value)} at step {self.step}; noise {self.noise.values()}")
        value.backward()
        if self.step < self.config.noise_warmup:
            # hold the noise model fixed while the prior network settles; Adam skips params without grads
            for p in self.noise.parameters():
                p.grad = None
        self.optimizer.step()
        self.step += 1
        return float(value.detach())

    def training_view(self, stacks):
        return list(stacks) if self.supervised else [SelfSupervisedView(s) for s in stacks]

    def validate(self, val_stacks) -> dict:
        self.model.eval()
        return validate(self.model, self.noise, val_stacks, self.config)

    def run_epoch(self, train_stacks) -> float:
        view = self.training_view(train_stacks)
        losses = []
        for _ in range(self.config.steps_per_epoch):
            batch = sample_batch(view, self.config, self.rng, with_targets=self.supervised)
            losses.append(self.train_step(batch))
        self.epoch += 1
        return float(np.mean(losses))

    def fit(self, train_stacks, val_stacks=(), history_path=None) -> Checkpoint:
        """Train for up to ``max_epochs`` epochs; return the best-validation checkpoint."""
        if not train_stacks:
            raise ValueError("need at least one training stack")
        best = self.checkpoint()
        best_stop = math.inf
        while self.epoch < self.config.max_epochs:
            train_loss = self.run_epoch(train_stacks)
            rec = {"step": self.step, "loss": train_loss, **self.noise.values()}
            if val_stacks:
                v = self.validate(val_stacks)
                rec.update(val_psnr_db=v["psnr"], val_ssim=v["ssim"], val_l1=v["l1"], stop_metric=v["stop_metric"])
            else:
                rec.update(val_psnr_db=math.nan, val_ssim=math.nan, val_l1=math.nan, stop_metric=math.nan)
            self.history.append(rec)
            log.info("step %d loss %.5f psnr %.3f stop %.5f a %.3g lambda %.4g", self.step, train_loss,
                     rec["val_psnr_db"], rec["stop_metric"], rec["a"], rec["lambda"])
            if not val_stacks or rec["stop_metric"] < best_stop:
                best_stop = rec["stop_metric"] if val_stacks else best_stop
                best = self.checkpoint()
            if history_path is not None:
                write_history(self.history, history_path)
            if val_stacks and early_stop(self.history, self.config.patience):
                log.info("early stop after epoch %d", self.epoch)
                break
        best.history = copy.deepcopy(self.history)
        return best

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            self.model_config, self.config,
            {k: v.detach().clone() for k, v in self.model.state_dict().items()},
            {k: v.detach().clone() for k, v in self.noise.state_dict().items()},
            copy.deepcopy(self.optimizer.state_dict()),
            self.epoch, self.step, copy.deepcopy(self.history),
            copy.deepcopy(self.rng.bit_generator.state),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Trainer":
        trainer = cls(ckpt.model_config, ckpt.train_config)
        trainer.model.load_state_dict(ckpt.model_state)
        trainer.noise.load_state_dict(ckpt.noise_state)
        trainer.optimizer.load_state_dict(ckpt.optimizer_state)
        trainer.epoch, trainer.step = ckpt.epoch, ckpt.step
        trainer.history = copy.deepcopy(ckpt.history)
        if ckpt.rng_state is not None:
            trainer.rng.bit_generator.state = copy.deepcopy(ckpt.rng_state)
        return trainer


def fit(train_stacks, val_stacks, config: TrainConfig, model_config: ModelConfig = ModelConfig(),
        history_path=None) -> Checkpoint:
    return Trainer(model_config, config).fit(train_stacks, val_stacks, history_path)


def write_history(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_COLUMNS, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for rec in history:
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in rec.items()})


# -- checkpoint container ---------------------------------------------------

def _tensor_blocks(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    blocks = [(f"model/{k}", v) for k, v in ckpt.model_state.items()]
    blocks += [(f"noise/{k}", v) for k, v in ckpt.noise_state.items()]
    for pid, st in sorted(ckpt.optimizer_state["state"].items()):
        for name in ("exp_avg", "exp_avg_sq"):
            blocks.append((f"adam/{pid}/{name}", st[name]))
    # np.ascontiguousarray would promote 0-d scalars to 1-d
    return [(name, np.array(torch.as_tensor(v).detach().numpy(), dtype="<f4", order="C")) for name, v in blocks]


def _manifest(ckpt: Checkpoint) -> dict:
    opt = ckpt.optimizer_state
    return {
        "model_config": ckpt.model_config.to_dict(),
        "model_config_digest": ckpt.model_config.digest(),
        "train_config": ckpt.train_config.to_dict(),
        "train_config_digest": ckpt.train_config.digest(),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "history": ckpt.history,
        "rng_state": ckpt.rng_state,
        "adam_steps": {str(pid): float(st["step"]) for pid, st in opt["state"].items()},
        "adam_groups": [{k: v for k, v in g.items() if k != "params"} | {"params": list(g["params"])}
                        for g in opt["param_groups"]],
        "metrics": ckpt.history[-1] if ckpt.history else None,
    }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """magic, u32 version, sha256(body), body = u32 len + JSON manifest + blocks.

    Each block: u32 name length, name, u32 ndim, u32 dims, u32 crc32, float32 LE data.
    """
    manifest = json.dumps(_manifest(ckpt), sort_keys=True, allow_nan=True).encode("utf-8")
    body = bytearray(struct.pack("<I", len(manifest)) + manifest)
    for name, arr in _tensor_blocks(ckpt):
        raw = arr.tobytes()
        enc = name.encode("utf-8")
        body += struct.pack("<I", len(enc)) + enc + struct.pack("<I", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<I", zlib.crc32(raw)) + raw
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + hashlib.sha256(body).digest() + bytes(body))


def load_checkpoint(path, expected_model_config: Optional[ModelConfig] = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC or len(data) < 40:
        raise CheckpointError(f"{path}: not an N2TD checkpoint")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    body = data[40:]
    if hashlib.sha256(body).digest() != data[8:40]:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupted")
    (mlen,) = struct.unpack_from("<I", body, 0)
    manifest = json.loads(body[4:4 + mlen].decode("utf-8"))
    pos = 4 + mlen
    blocks = {}
    while pos < len(body):
        (nlen,) = struct.unpack_from("<I", body, pos)
        name = body[pos + 4:pos + 4 + nlen].decode("utf-8")
        pos += 4 + nlen
        (ndim,) = struct.unpack_from("<I", body, pos)
        shape = struct.unpack_from(f"<{ndim}I", body, pos + 4)
        (crc,) = struct.unpack_from("<I", body, pos + 4 + 4 * ndim)
        pos += 8 + 4 * ndim
        size = 4 * int(np.prod(shape, dtype=np.int64))
        raw = body[pos:pos + size]
        if zlib.crc32(raw) != crc:
            raise ChecksumError(f"{path}: block {name} failed its crc32 check")
        blocks[name] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32))
        pos += size

    model_config = ModelConfig.from_dict(manifest["model_config"])
    if model_config.digest() != manifest["model_config_digest"]:
        raise ChecksumError(f"{path}: model config digest does not match its contents")
    if expected_model_config is not None and expected_model_config.digest() != model_config.digest():
        raise ConfigMismatchError(
            f"{path}: config mismatch, checkpoint model config {model_config.to_dict()} "
            f"vs expected {expected_model_config.to_dict()}")
    train_config = TrainConfig(**manifest["train_config"])

    def section(prefix):
        return {k[len(prefix):]: v for k, v in blocks.items() if k.startswith(prefix)}

    state = {}
    for pid, step in manifest["adam_steps"].items():
        state[int(pid)] = {"step": torch.tensor(step), "exp_avg": blocks[f"adam/{pid}/exp_avg"],
                           "exp_avg_sq": blocks[f"adam/{pid}/exp_avg_sq"]}
    optimizer_state = {"state": state, "param_groups": manifest["adam_groups"]}
    return Checkpoint(model_config, train_config, section("model/"), section("noise/"), optimizer_state,
                      manifest["epoch"], manifest["step"], manifest["history"], manifest["rng_state"])
