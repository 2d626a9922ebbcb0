"""Large-margin softmax losses on the unit hypersphere."""
from amlab.kernels import BACKEND
from amlab.losses import Batch, ClassifierHead, LossConfig, Variant, grad_check, loss_forward_backward, predict

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Batch",
    "ClassifierHead",
    "LossConfig",
    "Variant",
    "grad_check",
    "loss_forward_backward",
    "predict",
]
