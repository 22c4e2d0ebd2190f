"""Multi-modal GP-VAE: shared and modality-specific GP latents for paired behavior and neural data."""
from .config import PRESETS, ModelConfig
from .elbo_training import MMGPVAE, TrainState, elbo, grad_check, train
from .evaluation import align_latents, compare_models, reconstruction_metrics, subspace_variance
from .fourier_gp import KernelParams, build_fourier_basis, gp_prior_logdensity, kernel_spectrum, prune_count
from .latent_model import LatentPartition, LoadingsMatrix, mix_latents, to_time_domain
from .persistence import Dataset, load_checkpoint, read_dataset, save_checkpoint, write_dataset
from .simulation import SimConfig, simulate

__version__ = "0.1.0"

__all__ = [
    "PRESETS", "ModelConfig", "MMGPVAE", "TrainState", "elbo", "grad_check", "train",
    "align_latents", "compare_models", "reconstruction_metrics", "subspace_variance",
    "KernelParams", "build_fourier_basis", "gp_prior_logdensity", "kernel_spectrum", "prune_count",
    "LatentPartition", "LoadingsMatrix", "mix_latents", "to_time_domain",
    "Dataset", "load_checkpoint", "read_dataset", "save_checkpoint", "write_dataset",
    "SimConfig", "simulate",
]
