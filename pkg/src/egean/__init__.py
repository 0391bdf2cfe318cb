"""Exposure-guided embedding alignment for debiased CVR estimation, with a
small numpy autodiff engine and a synthetic MNAR lab for estimator studies."""
from .autodiff import Adam, Tape, Tensor, backward
from .estimators import EstimatorBatch, KernelSpec, mmd2, pvdr_loss
from .model import EgeanModel, ModelConfig
from .synthetic import WorldSpec, generate_world, sample_observations
from .train import TrainConfig, train

__all__ = ["Adam", "Tape", "Tensor", "backward", "EstimatorBatch", "KernelSpec", "mmd2", "pvdr_loss",
           "EgeanModel", "ModelConfig", "WorldSpec", "generate_world", "sample_observations",
           "TrainConfig", "train"]
