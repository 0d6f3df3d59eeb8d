"""Structured-noise removal via joint diffusion posterior sampling.

Two diffusion priors (signal and noise) run coupled reverse SDEs, entangled
only through the linear measurement model; pluggable data-consistency rules
(pigdm, dps, projection) supply the approximate likelihood scores. Analytic
Gaussian/mixture priors and closed-form oracles make the whole pipeline
quantitatively checkable at desk scale.
"""

from ._kernels import available_backends, get_backend, set_backend
from .guidance import (
    GuidanceParams,
    LikelihoodScorePair,
    LinearOperator,
    consistency_weights,
    dps_scores,
    pigdm_scores,
    projection_scores,
    tweedie_denoise,
    tweedie_vjp,
)
from .metrics import MetricReport, psnr, ssim
from .oracle import gaussian_posterior, grid_posterior, map_estimate
from .problems import (
    InverseProblem,
    NoiseModelSpec,
    gen_sine_noise,
    gen_sprite_noise,
    load_dataset,
    make_cs_operator,
    observe,
)
from .sampler import PosteriorRun, SamplerConfig, sample_posterior
from .scores import (
    AnalyticGaussianScore,
    GaussianMixtureScore,
    MlpScoreNet,
    ScoreFunction,
    TrainConfig,
    dsm_loss,
    load_model,
    save_model,
    train_dsm,
)
from .sde import DiffusionSchedule

__version__ = "0.1.0"

__all__ = [
    "AnalyticGaussianScore",
    "DiffusionSchedule",
    "GaussianMixtureScore",
    "GuidanceParams",
    "InverseProblem",
    "LikelihoodScorePair",
    "LinearOperator",
    "MetricReport",
    "MlpScoreNet",
    "NoiseModelSpec",
    "PosteriorRun",
    "SamplerConfig",
    "ScoreFunction",
    "TrainConfig",
    "available_backends",
    "consistency_weights",
    "dps_scores",
    "dsm_loss",
    "gaussian_posterior",
    "gen_sine_noise",
    "gen_sprite_noise",
    "get_backend",
    "grid_posterior",
    "load_dataset",
    "load_model",
    "make_cs_operator",
    "map_estimate",
    "observe",
    "pigdm_scores",
    "projection_scores",
    "psnr",
    "sample_posterior",
    "save_model",
    "set_backend",
    "ssim",
    "train_dsm",
    "tweedie_denoise",
    "tweedie_vjp",
    "__version__",
]
