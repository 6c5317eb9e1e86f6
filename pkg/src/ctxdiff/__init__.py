"""Context-biased diffusion on low-dimensional conditional data.

The forward process adds a learned, condition-dependent shift
``b_t = k_t * r(x0, c, t)`` to every kernel mean; the reverse process and
the DDIM sampler carry the same shift. Everything reduces exactly to plain
DDPM/DDIM when the adapter is zero.
"""
from .adapter import ContextAdapter, LearnedAdapter, LinearToyAdapter, ZeroAdapter, bias
from .forward import GaussianParams, marginal_params, posterior_params, transition_params
from .reverse import Denoiser, SamplerConfig, ddim_step, ddpm_step, sample_chain
from .schedule import NoiseSchedule, context_gain, make_schedule
from .training import Model, TrainConfig, TrainState, loss_batch, nelbo, train

__version__ = "0.1.0"

__all__ = [
    "ContextAdapter", "LearnedAdapter", "LinearToyAdapter", "ZeroAdapter", "bias",
    "GaussianParams", "marginal_params", "posterior_params", "transition_params",
    "Denoiser", "SamplerConfig", "ddim_step", "ddpm_step", "sample_chain",
    "NoiseSchedule", "context_gain", "make_schedule",
    "Model", "TrainConfig", "TrainState", "loss_batch", "nelbo", "train",
]
