"""Manifold latent variable models of neural population spiking.

Latents live on products of circles and lines; tuning-curve decoders share
features across neurons; soft ensemble weights assign neurons to latent spaces.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    DegenerateDirectionError,
    DomainError,
    FaeLVMError,
    FormatError,
    InvalidValueError,
    NumericError,
    ShapeError,
    TrainingAborted,
    VersionError,
)
from .manifold import LatentTopology, align_trajectories, geodesic_distance, wrap
from .model import FaeLVM, ModelConfig
from .training import FitResult, TrainConfig, fit, multi_seed_fit
from .inference import hybrid_infer, infer_variational, predict_test_rates
from .datagen import SynthConfig, generate_multi_ensemble, generate_ring_ensemble
from .evalkit import geodesic_error, mean_rank

__all__ = [
    "__version__",
    "ConfigError",
    "ContractError",
    "DegenerateDirectionError",
    "DomainError",
    "FaeLVMError",
    "FormatError",
    "InvalidValueError",
    "NumericError",
    "ShapeError",
    "TrainingAborted",
    "VersionError",
    "LatentTopology",
    "align_trajectories",
    "geodesic_distance",
    "wrap",
    "FaeLVM",
    "ModelConfig",
    "FitResult",
    "TrainConfig",
    "fit",
    "multi_seed_fit",
    "hybrid_infer",
    "infer_variational",
    "predict_test_rates",
    "SynthConfig",
    "generate_multi_ensemble",
    "generate_ring_ensemble",
    "geodesic_error",
    "mean_rank",
]
