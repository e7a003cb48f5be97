"""Time-distributed Bi-ConvLSTM denoiser.

A pooling-free U-Net runs on every frame with shared weights. Bi-ConvLSTM
layers sit in the bottleneck and after the decoder; the tail output is
summed over time without the middle frame and mapped to a per-pixel prior
mean and log-variance. No layer carries a bias term.

Tensors are laid out as (batch, time, channel, height, width).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .noiseloss import VAR_X_MAX, VAR_X_MIN

BLIND_MODES = ("paper", "strict")


@dataclass(frozen=True)
class ModelConfig:
    k: int = 3
    levels: int = 3
    channels_per_level: tuple[int, ...] = (32, 48, 64)
    lstm_hidden: tuple[int, int] = (64, 32)
    kernel_size: int = 3
    blind_mode: str = "paper"
    attention_reduction: int = 8
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channels_per_level", tuple(int(c) for c in self.channels_per_level))
        object.__setattr__(self, "lstm_hidden", tuple(int(c) for c in self.lstm_hidden))
        if self.levels != len(self.channels_per_level):
            raise ValueError(f"levels={self.levels} but {len(self.channels_per_level)} channel counts given")
        if self.levels < 1:
            raise ValueError("need at least one level")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if len(self.lstm_hidden) != 2:
            raise ValueError("lstm_hidden is (bottleneck, tail)")
        counts = (*self.channels_per_level, *self.lstm_hidden, self.in_channels)
        if min(counts) < 1 or self.attention_reduction < 1 or self.k < 1:
            raise ValueError("channel counts, k and attention_reduction must be positive")
        if self.blind_mode not in BLIND_MODES:
            raise ValueError(f"blind_mode must be one of {BLIND_MODES}")

    @property
    def num_frames(self) -> int:
        return 2 * self.k + 1

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class PriorPrediction:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.clip(np.exp(self.log_var), VAR_X_MIN, VAR_X_MAX)


def _conv(cin: int, cout: int, kernel: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel, padding=kernel // 2, padding_mode="replicate", bias=False)


class ConvBlock(nn.Module):
    """Two conv+ReLU layers at constant resolution."""

    def __init__(self, cin: int, cout: int, kernel: int):
        super().__init__()
        self.conv1 = _conv(cin, cout, kernel)
        self.conv2 = _conv(cout, cout, kernel)

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gate: sigmoid(W2 relu(W1 avgpool(x))) * x."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.squeeze = nn.Linear(channels, hidden, bias=False)
        self.excite = nn.Linear(hidden, channels, bias=False)

    def gate(self, x):
        pooled = x.mean(dim=(-2, -1))
        return torch.sigmoid(self.excite(F.relu(self.squeeze(pooled))))

    def forward(self, x):
        return x * self.gate(x)[..., None, None]


class ConvLSTMCell(nn.Module):
    """ConvLSTM without peephole terms: gates see only [x_t, h_prev]."""

    def __init__(self, cin: int, hidden: int, kernel: int):
        super().__init__()
        self.hidden = hidden
        self.gates = _conv(cin + hidden, 4 * hidden, kernel)

    def init_state(self, x):
        shape = (x.shape[0], self.hidden, *x.shape[-2:])
        return x.new_zeros(shape), x.new_zeros(shape)

    def forward(self, x, h_prev, c_prev, return_gates: bool = False):
        z = self.gates(torch.cat([x, h_prev], dim=1))
        zi, zf, zo, zg = z.chunk(4, dim=1)
        i, f, o, g = torch.sigmoid(zi), torch.sigmoid(zf), torch.sigmoid(zo), torch.tanh(zg)
        c = f * c_prev + i * g
        h = o * torch.tanh(c)
        if return_gates:
            return h, c, (i, f, o, g)
        return h, c


class BiConvLSTM(nn.Module):
    """Forward and backward ConvLSTM scans summed per time step."""

    def __init__(self, cin: int, hidden: int, kernel: int):
        super().__init__()
        self.fwd = ConvLSTMCell(cin, hidden, kernel)
        self.bwd = ConvLSTMCell(cin, hidden, kernel)

    @staticmethod
    def scan(cell: ConvLSTMCell, x, reverse: bool = False):
        steps = range(x.shape[1] - 1, -1, -1) if reverse else range(x.shape[1])
        h, c = cell.init_state(x[:, 0])
        out = [None] * x.shape[1]
        for t in steps:
            h, c = cell(x[:, t], h, c)
            out[t] = h
        return torch.stack(out, dim=1)

    def forward(self, x):
        return self.scan(self.fwd, x) + self.scan(self.bwd, x, reverse=True)


def time_distributed(module: nn.Module, x):
    """Apply a per-frame module to a (B, T, ...) tensor with shared weights."""
    b, t = x.shape[:2]
    y = module(x.reshape(b * t, *x.shape[2:]))
    return y.reshape(b, t, *y.shape[1:])


def aggregate_blind(lstm_out, middle_index: int):
    """Sum over the time axis, leaving out ``middle_index``."""
    t = lstm_out.shape[1]
    if not 0 <= middle_index < t:
        raise IndexError(f"middle_index {middle_index} outside 0..{t - 1}")
    if t == 1:
        warnings.warn("single-frame sequence: blind aggregation is an empty sum", RuntimeWarning, stacklevel=2)
    keep = [i for i in range(t) if i != middle_index]
    if not keep:
        return torch.zeros_like(lstm_out[:, 0])
    return lstm_out[:, keep].sum(dim=1)


class Noise2NoiseTD(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        ch, kern = config.channels_per_level, config.kernel_size
        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for c in ch:
            self.encoders.append(ConvBlock(cin, c, kern))
            cin = c
        self.bottleneck_lstm = BiConvLSTM(ch[-1], config.lstm_hidden[0], kern)
        # decoder block for each level below the bottleneck, deepest first
        self.decoders = nn.ModuleList()
        up = config.lstm_hidden[0]
        for c in reversed(ch[:-1]):
            self.decoders.append(ConvBlock(up + c, c, kern))
            up = c
        # attention after every block on levels 2 and 3 (1-based)
        self.enc_attention = nn.ModuleDict(
            {str(lvl): ChannelAttention(ch[lvl], config.attention_reduction) for lvl in range(len(ch)) if lvl in (1, 2)})
        self.dec_attention = nn.ModuleDict(
            {str(lvl): ChannelAttention(ch[lvl], config.attention_reduction) for lvl in range(len(ch) - 1) if lvl in (1, 2)})
        self.tail_lstm = BiConvLSTM(up, config.lstm_hidden[1], kern)
        hid = config.lstm_hidden[1]
        self.fuse1 = _conv(hid, hid, kern)
        self.fuse2 = _conv(hid, hid, kern)
        self.head = nn.Conv2d(hid, 2, 1, bias=False)

    def encode_frame(self, x, return_skips: bool = False):
        """Per-frame encoder on (N, C, H, W); spatial size is preserved."""
        skips = []
        for lvl, block in enumerate(self.encoders):
            x = block(x)
            if str(lvl) in self.enc_attention:
                x = self.enc_attention[str(lvl)](x)
            skips.append(x)
        return (x, skips) if return_skips else x

    def decode_frames(self, x, skips):
        for j, block in enumerate(self.decoders):
            lvl = len(self.encoders) - 2 - j
            x = block(torch.cat([x, skips[lvl]], dim=1))
            if str(lvl) in self.dec_attention:
                x = self.dec_attention[str(lvl)](x)
        return x

    def forward(self, seq, probe: Optional[list] = None):
        """(B, T, C, H, W) -> (mu, log_var), each (B, H, W)."""
        b, t = seq.shape[:2]
        if t != self.config.num_frames:
            raise ValueError(f"expected {self.config.num_frames} frames, got {t}")
        mid = self.config.k
        if self.config.blind_mode == "strict":
            mask = torch.ones(t, dtype=seq.dtype, device=seq.device)
            mask[mid] = 0
            seq = seq * mask.view(1, t, 1, 1, 1)
        flat = seq.reshape(b * t, *seq.shape[2:])
        feats, skips = self.encode_frame(flat, return_skips=True)
        x = self.bottleneck_lstm(feats.reshape(b, t, *feats.shape[1:]))
        x = x.reshape(b * t, *x.shape[2:])
        x = self.decode_frames(x, skips)
        x = self.tail_lstm(x.reshape(b, t, *x.shape[1:]))
        x = aggregate_blind(x, mid)
        x = F.relu(self.fuse1(x))
        x = F.relu(self.fuse2(x))
        out = self.head(x)
        if probe is not None:
            probe.extend([*skips, feats, x, out])
        return out[:, 0], out[:, 1]


def _init_weights(model: nn.Module, generator: torch.Generator):
    for name, p in sorted(model.named_parameters()):
        fan_in = p[0].numel() if p.dim() > 1 else p.numel()
        # gain sqrt(2) for ReLU layers, plain 1/sqrt(fan_in) for gates and heads
        relu_fed = "conv" in name or "fuse" in name
        bound = math.sqrt(6.0 / fan_in) if relu_fed else math.sqrt(3.0 / fan_in)
        with torch.no_grad():
            p.copy_(torch.rand(p.shape, generator=generator, dtype=p.dtype) * 2 * bound - bound)


def init_model(config: ModelConfig = ModelConfig(), seed: int = 0, dtype=torch.float32) -> Noise2NoiseTD:
    model = Noise2NoiseTD(config).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    _init_weights(model, gen)
    return model


def parameter_count(config: ModelConfig) -> int:
    """Closed-form number of weights for ``config``."""
    kk = config.kernel_size**2
    ch = config.channels_per_level
    total, cin = 0, config.in_channels
    for c in ch:
        total += kk * (cin * c + c * c)
        cin = c
    hb, ht = config.lstm_hidden
    total += 2 * kk * (ch[-1] + hb) * 4 * hb
    up = hb
    for c in reversed(ch[:-1]):
        total += kk * ((up + c) * c + c * c)
        up = c
    total += 2 * kk * (up + ht) * 4 * ht
    total += 2 * kk * ht * ht + 2 * ht

    def se(c):
        return 2 * c * max(c // config.attention_reduction, 1)

    total += sum(se(ch[l]) for l in range(len(ch)) if l in (1, 2))
    total += sum(se(ch[l]) for l in range(len(ch) - 1) if l in (1, 2))
    return total


def predict_prior(model: Noise2NoiseTD, sample) -> PriorPrediction:
    """Prior mean and log-variance for the middle frame of one sequence sample."""
    frames = np.asarray(sample.frames if hasattr(sample, "frames") else sample)
    if frames.ndim == 3:
        frames = frames[:, None]
    param = next(model.parameters())
    x = torch.as_tensor(frames, dtype=param.dtype)[None]
    with torch.no_grad():
        mu, log_var = model(x)
    return PriorPrediction(mu[0].numpy().astype(np.float64), log_var[0].numpy().astype(np.float64))
