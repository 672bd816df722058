"""Blind motion deblurring with an unrolled half-quadratic splitting solver.

The solver alternates closed-form DFT-domain updates for an auxiliary
sharp image, learned-sparsity filter responses, and the blur kernel,
then unrolls a fixed number of those iterations into a differentiable
computation whose per-layer weights are trained end to end.
"""

from .errors import DeblurError
from .unroll import ModelParams, forward, tv_prewitt_params
from .training import TrainConfig, init_params, load_checkpoint, train
from .metrics import evaluate

__version__ = "0.1.0"

__all__ = [
    "DeblurError",
    "ModelParams",
    "TrainConfig",
    "__version__",
    "evaluate",
    "forward",
    "init_params",
    "load_checkpoint",
    "train",
    "tv_prewitt_params",
]
