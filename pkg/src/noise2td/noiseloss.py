"""Mixed Poisson-Gaussian observation model, likelihood loss and posterior mean.

The tensors passed to :func:`loss` may be numpy arrays or torch tensors; torch
inputs keep the autograd graph so the trainer can backpropagate through it.
:func:`loss_gradients` gives the same derivatives in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

NOISE_MODES = ("mixed", "gaussian", "poisson")
# which standard deviation the -0.1 sigma term rewards: total (prior + noise) or noise only
REG_TARGETS = ("total", "noise")
VAR_X_MIN, VAR_X_MAX = 1e-6, 1e6
PARAM_FLOOR = 1e-8
MIN_TOTAL_VAR = 1e-12
REG_WEIGHT = 0.1


class DegeneratePosteriorError(ValueError):
    pass


def softplus_inverse(value: float) -> float:
    return value + math.log(-math.expm1(-value))


def raw_from_value(value: float) -> float:
    """Raw parameter whose mapped value (softplus + floor) equals ``value``."""
    return softplus_inverse(value - PARAM_FLOOR)


class NoiseModel(nn.Module):
    """Learnable (a, lambda) through a softplus map of unconstrained raw values."""

    def __init__(self, a: float = 1e-3, lam: float = 100.0, dtype=torch.float32):
        super().__init__()
        self.raw_a = nn.Parameter(torch.tensor(raw_from_value(a), dtype=dtype))
        self.raw_lambda = nn.Parameter(torch.tensor(raw_from_value(lam), dtype=dtype))

    @property
    def a(self) -> torch.Tensor:
        return nn.functional.softplus(self.raw_a) + PARAM_FLOOR

    @property
    def lam(self) -> torch.Tensor:
        return nn.functional.softplus(self.raw_lambda) + PARAM_FLOOR

    def values(self) -> dict[str, float]:
        return {"a": float(self.a.detach()), "lambda": float(self.lam.detach())}

    def variance(self, mu, mode: str = "mixed"):
        return noise_variance(mu, self, mode)


@dataclass(frozen=True)
class NoiseModelParams:
    """Plain-number snapshot of the raw noise parameters."""

    raw_a: float
    raw_lambda: float

    @classmethod
    def from_values(cls, a: float, lam: float) -> "NoiseModelParams":
        return cls(raw_from_value(a), raw_from_value(lam))

    @property
    def a(self) -> float:
        return _softplus(self.raw_a) + PARAM_FLOOR

    @property
    def lam(self) -> float:
        return _softplus(self.raw_lambda) + PARAM_FLOOR


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def _sigmoid(x: float) -> float:
    return 0.5 * (1.0 + math.tanh(0.5 * x))


def _check_mode(mode: str):
    if mode not in NOISE_MODES:
        raise ValueError(f"unknown noise mode {mode!r}, expected one of {NOISE_MODES}")


def noise_variance(mu, params, mode: str = "mixed"):
    """sigma_n^2 for the given mode; negative means are clamped to zero."""
    _check_mode(mode)
    if isinstance(mu, torch.Tensor):
        pos = torch.clamp(mu, min=0.0)
        zeros = torch.zeros_like(mu)
    else:
        mu = np.asarray(mu, dtype=float)
        pos = np.clip(mu, 0.0, None)
        zeros = np.zeros_like(mu)
    a, lam = params.a, params.lam
    if mode == "gaussian":
        return zeros + a
    if mode == "poisson":
        return pos / lam + PARAM_FLOOR
    return pos / lam + a


def prior_variance(log_var):
    if isinstance(log_var, torch.Tensor):
        return torch.clamp(torch.exp(log_var), VAR_X_MIN, VAR_X_MAX)
    return np.clip(np.exp(log_var), VAR_X_MIN, VAR_X_MAX)


def _pixel_loss(y, mu, var, reg_var, reg_weight=REG_WEIGHT):
    lib = torch if isinstance(var, torch.Tensor) else np
    return (y - mu) ** 2 / (2 * var) + 0.5 * lib.log(var) - reg_weight * lib.sqrt(reg_var)


def _check_reg_on(reg_on):
    if reg_on not in REG_TARGETS:
        raise ValueError(f"reg_on must be one of {REG_TARGETS}, got {reg_on!r}")


def loss(y, mu, log_var, params, mode: str = "mixed", reg_weight: float = REG_WEIGHT, reg_on: str = "total"):
    """Mean over pixels of (y-mu)^2/(2 s^2) + log(s^2)/2 - 0.1 s, s^2 = var_x + var_n.

    With ``reg_on="noise"`` the last term uses the noise standard deviation only.
    """
    _check_reg_on(reg_on)
    if isinstance(mu, torch.Tensor):
        y = torch.as_tensor(y, dtype=mu.dtype)
        if not (torch.isfinite(y).all() and torch.isfinite(mu).all() and torch.isfinite(log_var).all()):
            raise ValueError("non-finite input to loss")
        var_n = noise_variance(mu, params, mode)
        var = torch.clamp(prior_variance(log_var) + var_n, min=MIN_TOTAL_VAR)
        return _pixel_loss(y, mu, var, var if reg_on == "total" else var_n, reg_weight).mean()
    y, mu, log_var = (np.asarray(v, dtype=float) for v in (y, mu, log_var))
    if not (np.isfinite(y).all() and np.isfinite(mu).all() and np.isfinite(log_var).all()):
        raise ValueError("non-finite input to loss")
    var_n = noise_variance(mu, params, mode)
    var = np.maximum(prior_variance(log_var) + var_n, MIN_TOTAL_VAR)
    return float(_pixel_loss(y, mu, var, var if reg_on == "total" else var_n, reg_weight).mean())


def loss_gradients(y, mu, log_var, params: NoiseModelParams, mode: str = "mixed",
                   reg_weight: float = REG_WEIGHT, reg_on: str = "total") -> dict:
    """Closed-form derivatives of :func:`loss` (numpy, float64)."""
    _check_mode(mode)
    _check_reg_on(reg_on)
    y, mu, log_var = (np.asarray(v, dtype=float) for v in (y, mu, log_var))
    n = mu.size
    a, lam = params.a, params.lam
    var_x = np.exp(log_var)
    in_range = (var_x > VAR_X_MIN) & (var_x < VAR_X_MAX)
    var_x = np.clip(var_x, VAR_X_MIN, VAR_X_MAX)
    pos = np.clip(mu, 0.0, None)
    var_n = noise_variance(mu, params, mode)
    var = var_x + var_n
    r = y - mu
    # d(pixel loss)/d(var_x) and d(pixel loss)/d(var_n)
    g = -(r**2) / (2 * var**2) + 1.0 / (2 * var)
    if reg_on == "total":
        g = g - reg_weight / (2 * np.sqrt(var))
        g_n = g
    else:
        g_n = g - reg_weight / (2 * np.sqrt(var_n))
    uses_lam = mode in ("mixed", "poisson")
    uses_a = mode in ("mixed", "gaussian")
    d_mu = -r / var
    if uses_lam:
        d_mu = d_mu + g_n * (mu > 0) / lam
    return {
        "mu": d_mu / n,
        "log_var": g * var_x * in_range / n,
        "raw_a": float(np.sum(g_n)) * _sigmoid(params.raw_a) / n if uses_a else 0.0,
        "raw_lambda": float(np.sum(g_n * -pos / lam**2)) * _sigmoid(params.raw_lambda) / n if uses_lam else 0.0,
    }


def posterior_mean(y, mu_x, var_x, var_n):
    """(mu_x var_n + y var_x) / (var_n + var_x), elementwise."""
    lib = torch if isinstance(mu_x, torch.Tensor) else np
    if lib is np:
        y, mu_x, var_x, var_n = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (y, mu_x, var_x, var_n)))
    if (var_x < 0).any() or (var_n < 0).any():
        raise ValueError("variances must be non-negative")
    total = var_x + var_n
    if (total <= 0).any():
        raise DegeneratePosteriorError("degenerate posterior: both variances are zero")
    w = var_x / total
    # anchor on the nearer endpoint so the w=0, w=1/2 and w=1 limits come out exact
    near_prior = mu_x + w * (y - mu_x)
    near_obs = y + (1 - w) * (mu_x - y)
    out = lib.where(w <= 0.5, near_prior, near_obs)
    return lib.where(var_x == var_n, 0.5 * (mu_x + y), out)
