"""Self-supervised denoising of CT projection sequences."""

from .estimator import Noise2TDDenoiser
from .model import ModelConfig, Noise2NoiseTD, init_model, predict_prior
from .noiseloss import NoiseModel, loss, posterior_mean
from .projsim import Geometry, PhantomSpec, ProjectionStack, read_stack, simulate, write_stack
from .recon import Volume, read_volume, reconstruct, write_volume
from .training import TrainConfig, Trainer, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Geometry", "ModelConfig", "Noise2NoiseTD", "Noise2TDDenoiser", "NoiseModel", "PhantomSpec", "ProjectionStack",
    "TrainConfig", "Trainer", "Volume", "fit", "init_model", "load_checkpoint", "loss", "posterior_mean",
    "predict_prior", "read_stack", "read_volume", "reconstruct", "save_checkpoint", "simulate", "write_stack",
    "write_volume",
]
