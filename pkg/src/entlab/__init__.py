"""entlab: a desk-scale laboratory for entropy-guided attention.

Float64 reverse-mode autodiff, reduced-nonlinearity decoder-only
transformers, attention-entropy analysis, entropy regularization, and
private-inference cost accounting, on one CPU.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad
from .entropy import EntropyMatrix, bucket_fractions, head_entropy, model_entropy
from .model import ArchConfig, NAMED_CONFIGS, init_params, make_config, model_forward
from .picost import CostModel, count_nonlinear_ops, default_cost_model, estimate, flops
from .regularizer import RegConfig, ThresholdParams, reg_loss, total_loss
from .trainer import TrainConfig, Trainer, evaluate, load_train_config

__all__ = [
    "Tensor", "backward", "no_grad",
    "EntropyMatrix", "bucket_fractions", "head_entropy", "model_entropy",
    "ArchConfig", "NAMED_CONFIGS", "init_params", "make_config", "model_forward",
    "CostModel", "count_nonlinear_ops", "default_cost_model", "estimate", "flops",
    "RegConfig", "ThresholdParams", "reg_loss", "total_loss",
    "TrainConfig", "Trainer", "evaluate", "load_train_config",
    "__version__",
]
