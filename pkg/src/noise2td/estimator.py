"""scikit-learn style wrapper: ``fit`` on noisy stacks, ``transform`` to denoise them."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .model import ModelConfig
from .projsim import Geometry, ProjectionStack
from .training import Trainer, TrainConfig, denoise_frames


def check_stack(X, min_frames: int = 3) -> ProjectionStack:
    """Accept a ProjectionStack or an (N, Z, U) array (taken as a full circular scan)."""
    if isinstance(X, ProjectionStack):
        stack = X
    else:
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"expected an (N, Z, U) array, got shape {arr.shape}")
        n, z, u = arr.shape
        stack = ProjectionStack(Geometry.full_circle(n, detector_bins=u, num_rows=z), arr)
    if not np.isfinite(stack.frames).all():
        raise ValueError("stack contains non-finite values")
    if stack.shape[0] < min_frames:
        raise ValueError(f"need at least {min_frames} frames, got {stack.shape[0]}")
    return stack


def check_stacks(X, min_frames: int = 3) -> list[ProjectionStack]:
    if isinstance(X, (list, tuple)):
        if not X:
            raise ValueError("empty list of stacks")
        return [check_stack(s, min_frames) for s in X]
    return [check_stack(X, min_frames)]


class Noise2TDDenoiser(TransformerMixin, BaseEstimator):
    """Self-supervised projection denoiser.

    ``fit`` never looks at clean frames in the self-supervised modes;
    ``validation_stacks`` (with clean frames) only drive early stopping.
    """

    def __init__(self, mode="selfsup_mixed", k=3, blind_mode="paper", channels_per_level=(32, 48, 64),
                 lstm_hidden=(64, 32), lr=None, noise_lr=5e-2, reg_on="total", noise_warmup=0, batch_size=None,
                 crop=64, max_epochs=10, steps_per_epoch=500, patience=3, seed=0, validation_stacks=None):
        self.mode = mode
        self.k = k
        self.blind_mode = blind_mode
        self.channels_per_level = channels_per_level
        self.lstm_hidden = lstm_hidden
        self.lr = lr
        self.noise_lr = noise_lr
        self.reg_on = reg_on
        self.noise_warmup = noise_warmup
        self.batch_size = batch_size
        self.crop = crop
        self.max_epochs = max_epochs
        self.steps_per_epoch = steps_per_epoch
        self.patience = patience
        self.seed = seed
        self.validation_stacks = validation_stacks

    def _configs(self):
        model_config = ModelConfig(k=self.k, levels=len(self.channels_per_level),
                                   channels_per_level=tuple(self.channels_per_level),
                                   lstm_hidden=tuple(self.lstm_hidden), blind_mode=self.blind_mode)
        train_config = TrainConfig(mode=self.mode, lr=self.lr, noise_lr=self.noise_lr, reg_on=self.reg_on,
                                   noise_warmup=self.noise_warmup, batch_size=self.batch_size,
                                   crop=self.crop, k=self.k, max_epochs=self.max_epochs,
                                   steps_per_epoch=self.steps_per_epoch, patience=self.patience, seed=self.seed,
                                   blind_mode=self.blind_mode)
        return model_config, train_config

    def fit(self, X, y=None):
        stacks = check_stacks(X, 2 * self.k + 1)
        val = check_stacks(self.validation_stacks) if self.validation_stacks is not None else []
        model_config, train_config = self._configs()
        trainer = Trainer(model_config, train_config)
        if train_config.mode == "supervised_mse" and any(s.clean_frames is None for s in stacks):
            raise ValueError("supervised_mse needs stacks with clean frames")
        self.checkpoint_ = trainer.fit(stacks, val)
        self.model_ = self.checkpoint_.build_model()
        self.noise_ = self.checkpoint_.build_noise()
        self.noise_params_ = self.checkpoint_.noise_params
        self.history_ = self.checkpoint_.history
        self.n_frames_in_ = stacks[0].shape[0]
        return self

    def noise_variance(self, mu):
        """Fitted noise variance as a function of the clean intensity."""
        check_is_fitted(self, "noise_params_")
        p = self.noise_params_
        mu = np.asarray(mu, dtype=np.float64)
        if self.mode == "selfsup_gaussian":
            return np.full_like(mu, p["a"])
        if self.mode == "selfsup_poisson":
            return np.maximum(mu, 0) / p["lambda"] + 1e-8
        if self.mode == "supervised_mse":
            return np.full_like(mu, math.nan)
        return np.maximum(mu, 0) / p["lambda"] + p["a"]

    def transform(self, X):
        """Denoised frames, same type and shape as ``X``; frames without a full window pass through."""
        check_is_fitted(self, "model_")
        stack = check_stack(X, 2 * self.k + 1)
        frames, centers = denoise_frames(self.model_, self.noise_, stack.frames, stack.geometry.circular,
                                         self.checkpoint_.train_config.noise_mode)
        out = stack.frames.astype(np.float64).copy()
        out[centers] = frames
        if isinstance(X, ProjectionStack):
            return ProjectionStack(stack.geometry, out, stack.clean_frames, stack.noise_truth,
                                   stack.id + "-denoised", stack.scale_factor)
        return out

    predict = transform
