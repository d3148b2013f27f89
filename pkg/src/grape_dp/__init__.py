"""grape-dp: differentially private training with seeded random gradient projections."""

from .dp_core import PrivacySpec, calibrate_sigma, clip, gaussian_mechanism
from .models import Dataset, ModelSpec, Params, init_params
from .optimizers import AdamHyper, dp_adam_step, dp_grape_step
from .projection import SubspaceSchedule
from .tensor import RngStream, gaussian_matrix, topk_svd

__version__ = "0.1.0"

__all__ = [
    "AdamHyper",
    "Dataset",
    "ModelSpec",
    "Params",
    "PrivacySpec",
    "RngStream",
    "SubspaceSchedule",
    "calibrate_sigma",
    "clip",
    "dp_adam_step",
    "dp_grape_step",
    "gaussian_matrix",
    "gaussian_mechanism",
    "init_params",
    "topk_svd",
    "__version__",
]
